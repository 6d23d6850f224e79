"""Tau-derivatives of the discrete solution and flux at tau = 0 from the jet of a.

The Galerkin residual is expanded as a truncated power series in tau around
u = lambda.  Writing u(tau) = lambda + sum_k c_k tau^k (c_1 = x . omega), the
order-k residual is linear in c_k with the constant matrix a(lambda, 0):

    int (A0 grad c_k + K_k) . grad phi_i = 0   (interior i),  c_k = 0 on the boundary,

where K_k collects the lower-order series terms of a(u, grad u) grad u.  The
same series, tested against boundary hat functions, gives the flux
derivatives.  Everything is exact for the discrete problem, so these values
are the tau-derivatives of what :func:`~quasijet.fem.solve_quasilinear`
would return.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import JetOrderError
from .fem import (LinearDivergenceProblem, assemble_flux_load, quad_values,
                  solve_linear_divergence, probe_vertices)
from .fem import _FACTORS
from .tensor_core import _multi_indices, multinomial

__all__ = ["TauJet", "cascade_fields", "flux_tau_derivative", "correction_terms",
           "required_slots"]


def required_slots(N):
    """Jet slots (j, k) entering the order-N flux derivative."""
    return [(j, k) for j in range(N) for k in range(N - j)]


def _series_mul(a, b, order):
    """Truncated Cauchy product along axis 0 (broadcasting trailing axes)."""
    shape = np.broadcast_shapes(a.shape[1:], b.shape[1:])
    out = np.zeros((order + 1,) + shape)
    for i in range(min(order, len(a) - 1) + 1):
        if not np.any(a[i]):
            continue
        for j in range(min(order - i, len(b) - 1) + 1):
            out[i + j] += a[i] * b[j]
    return out


@dataclass(frozen=True, eq=False)
class TauJet:
    """Fields w_k = d^k u / d tau^k at tau = 0 and boundary flux derivatives.

    ``fields[k - 1]`` is w_k (nodal); ``boundary_flux[k - 1]`` holds
    d^k flux / d tau^k at every vertex (NaN at interior vertices).
    """

    lam: float
    omega: tuple
    order: int
    mesh: object
    fields: tuple
    boundary_flux: tuple

    def flux_derivative(self, k, vertices):
        return self.boundary_flux[k - 1][np.asarray(vertices)]

    def to_dict(self):
        return {"lam": self.lam, "omega": list(self.omega), "order": self.order,
                "mesh_hash": self.mesh.hash,
                "fields": [[float(v) for v in w] for w in self.fields],
                "boundary_flux": [[None if np.isnan(v) else float(v) for v in f]
                                  for f in self.boundary_flux]}


def _a_series(jet, mesh, coeffs, order, dim):
    """Series of a(u, grad u) at quadrature points up to tau^order, shape (order+1, T, 3, n, n)."""
    T = mesh.n_triangles
    dmu = np.zeros((order + 1, T, 3))
    eta = np.zeros((order + 1, T, dim))
    for k in range(1, min(order, len(coeffs) - 1) + 1):
        dmu[k] = quad_values(mesh, coeffs[k])
        eta[k] = np.einsum("tk,tkd->td", coeffs[k][mesh.triangles], mesh.grads)
    out = np.zeros((order + 1, T, 3, dim, dim))
    out[0] = jet.slot(0, 0).value()
    mu_pow = [np.zeros((order + 1, T, 3))]
    mu_pow[0][0] = 1.0
    for j in range(1, order + 1):
        mu_pow.append(_series_mul(mu_pow[-1], dmu, order))
    eta_mono = {(): np.zeros((order + 1, T))}
    eta_mono[()][0] = 1.0
    for k in range(1, order + 1):
        for idx in _multi_indices(dim, k):
            eta_mono[idx] = _series_mul(eta_mono[idx[:-1]], eta[:, :, idx[-1]], order)
    for (j, k), tensor in jet.slots.items():
        if j + k == 0 or j + k > order:
            continue
        if not np.any(tensor.entries):
            continue
        scale = 1.0 / (math.factorial(j) * math.factorial(k))
        for r, idx in enumerate(_multi_indices(dim, k)):
            mat = tensor.entries[r]
            if not np.any(mat):
                continue
            ser = _series_mul(mu_pow[j], eta_mono[idx][:, :, None], order)
            out += (scale * multinomial(idx)) * ser[..., None, None] * mat
    return out


def _check_slots(jet, N):
    missing = [jk for jk in required_slots(N) if not jet.has(*jk)]
    if missing:
        raise JetOrderError(f"jet lacks slots {missing} needed for order {N}")


def cascade_fields(jet, mesh, omega, N):
    """Solve the linear cascade up to order N and collect boundary flux derivatives."""
    if N < 1:
        raise ValueError("N must be >= 1")
    _check_slots(jet, N)
    omega = np.asarray(omega, dtype=float)
    n = jet.dim
    A0 = jet.a0
    x = mesh.vertices
    coeffs = [np.full(mesh.n_vertices, jet.lam), x @ omega]
    b = mesh.boundary_vertices
    meas = mesh.flux_measure
    fluxes = []
    # order 1: residual of A0 omega against the boundary hat functions
    f1 = np.full(mesh.n_vertices, np.nan)
    r1 = assemble_flux_load(mesh, np.broadcast_to(A0 @ omega, (mesh.n_triangles, 3, n)))
    f1[b] = r1[b] / meas[b]
    fluxes.append(f1)
    for k in range(2, N + 1):
        aser = _a_series(jet, mesh, coeffs, k - 1, n)
        K = np.zeros((mesh.n_triangles, 3, n))
        for m in range(1, k):
            grad = np.einsum("tk,tkd->td", coeffs[k - m][mesh.triangles], mesh.grads)
            K += np.einsum("tqrs,ts->tqr", aser[m], grad)
        prob = LinearDivergenceProblem(A0, K=K, g=None)
        ck = solve_linear_divergence(prob, mesh)
        coeffs.append(ck)
        stiff, _ = _FACTORS.get(mesh, prob.A0)
        res = stiff @ ck + assemble_flux_load(mesh, K)
        fk = np.full(mesh.n_vertices, np.nan)
        fk[b] = math.factorial(k) * res[b] / meas[b]
        fluxes.append(fk)
    fields = tuple(math.factorial(k) * c for k, c in enumerate(coeffs) if k >= 1)
    return TauJet(jet.lam, tuple(omega), N, mesh, fields, tuple(fluxes))


def _probe_data(mesh, probes):
    pts = probes.points if hasattr(probes, "points") else np.atleast_2d(probes)
    normals = probes.normals if hasattr(probes, "normals") else mesh.domain.normal_at(pts)
    return probe_vertices(mesh, pts), np.asarray(normals, dtype=float)


def flux_tau_derivative(jet, mesh, omega, N, probes):
    """d^N/d tau^N of the conormal flux at tau = 0 at each probe."""
    verts, normals = _probe_data(mesh, probes)
    if N == 1:
        _check_slots(jet, 1)
        return normals @ (jet.a0 @ np.asarray(omega, dtype=float))
    tj = cascade_fields(jet, mesh, omega, N)
    return tj.flux_derivative(N, verts)


def correction_terms(jet_lower, mesh, omega, N, probes):
    """Order-N flux derivative with the top slot D_eta^{N-1} a(lambda, 0) set to zero.

    The order-N flux derivative is affine in that slot, with coefficient
    N (.)(omega, ..., omega) omega . nu, so this is the remainder needed to
    isolate it.
    """
    verts, _ = _probe_data(mesh, probes)
    if N == 1:
        return np.zeros(len(verts))
    missing = [(j, k) for (j, k) in required_slots(N) if k <= N - 2 and not jet_lower.has(j, k)]
    if missing:
        raise JetOrderError(f"correction terms need slots {missing}")
    jet = jet_lower.zero_slot(0, N - 1)
    tj = cascade_fields(jet, mesh, omega, N)
    return tj.flux_derivative(N, verts)
