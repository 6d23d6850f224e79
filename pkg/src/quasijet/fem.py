"""P1 finite elements for -div(a(u, grad u) grad u) = 0 with affine Dirichlet data.

Quadrature is the interior three-point rule (barycentric (2/3, 1/6, 1/6) and
permutations, equal weights), so the coefficient sees u at three points per
triangle and the piecewise-constant gradient.
"""
from __future__ import annotations

import json
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (EllipticityLost, ModelRangeError, NewtonDiverged,
                     ProbeNotOnBoundary)

__all__ = [
    "QUAD_BARY",
    "NewtonReport",
    "FieldSolution",
    "SolverOptions",
    "LinearDivergenceProblem",
    "quad_values",
    "element_gradients",
    "assemble_flux_load",
    "assemble_source",
    "nonlinear_residual",
    "solve_quasilinear",
    "solve_linear_divergence",
    "boundary_fluxes",
    "flux_at_probe",
    "probe_vertices",
    "linear_boundary_flux",
]

QUAD_BARY = np.array([[2 / 3, 1 / 6, 1 / 6],
                      [1 / 6, 2 / 3, 1 / 6],
                      [1 / 6, 1 / 6, 2 / 3]])


def quad_values(mesh, nodal):
    """Values of a P1 field at the quadrature points, shape (T, 3, ...)."""
    nodal = np.asarray(nodal, dtype=float)
    return np.einsum("qk,tk...->tq...", QUAD_BARY, nodal[mesh.triangles])


def element_gradients(mesh, nodal):
    """Piecewise-constant gradient of a P1 field, shape (T, 2)."""
    return np.einsum("tk,tkd->td", np.asarray(nodal, dtype=float)[mesh.triangles], mesh.grads)


def _scatter(mesh, elem):
    """Sum element contributions (T, 3) onto vertices."""
    return np.bincount(mesh.triangles.ravel(), weights=elem.ravel(), minlength=mesh.n_vertices)


def assemble_flux_load(mesh, field_q):
    """int F . grad(phi_i) for a vector field given at quadrature points (T, 3, 2)."""
    fsum = field_q.sum(axis=1) * (mesh.areas / 3.0)[:, None]
    return _scatter(mesh, np.einsum("td,tkd->tk", fsum, mesh.grads))


def assemble_source(mesh, f_q):
    """int f phi_i for a scalar field given at quadrature points (T, 3)."""
    elem = np.einsum("tq,qk->tk", f_q, QUAD_BARY) * (mesh.areas / 3.0)[:, None]
    return _scatter(mesh, elem)


def _stiffness(mesh, coef):
    """Assemble int (C grad phi_j) . grad phi_i for per-triangle matrices C (T, 2, 2)."""
    ke = np.einsum("tkr,trl,tjl->tkj", mesh.grads, coef, mesh.grads) * mesh.areas[:, None, None]
    return _coo(mesh, ke)


def _coo(mesh, ke):
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(n, n))


# -- nonlinear problem -------------------------------------------------------------

def _coefficient_fields(model, mesh, u, derivatives):
    uq = quad_values(mesh, u)
    g = element_gradients(mesh, u)
    T = mesh.n_triangles
    mu = uq.ravel()
    eta = np.repeat(g, 3, axis=0)
    out = model.eval_batch(mu, eta, derivatives=derivatives)
    if derivatives:
        a, dmu, deta = out
        a = np.moveaxis(a, -1, 0).reshape(T, 3, 2, 2)
        dmu = np.moveaxis(dmu, -1, 0).reshape(T, 3, 2, 2)
        deta = np.moveaxis(deta, -1, 0).reshape(T, 3, 2, 2, 2)
        return uq, g, a, dmu, deta
    return uq, g, np.moveaxis(out, -1, 0).reshape(T, 3, 2, 2)


def nonlinear_residual(model, mesh, u):
    """Full residual vector int a(u, grad u) grad u . grad phi_i over all vertices."""
    _, g, a = _coefficient_fields(model, mesh, u, False)
    flux = np.einsum("tqrs,ts->tqr", a, g)
    return assemble_flux_load(mesh, flux)


def _jacobian(model, mesh, u):
    uq, g, a, dmu, deta = _coefficient_fields(model, mesh, u, True)
    flux = np.einsum("tqrs,ts->tqr", a, g)
    res = assemble_flux_load(mesh, flux)
    # d flux / d eta and d flux / d mu at each quadrature point
    J = a + np.einsum("tqrsl,ts->tqrl", deta, g)
    fmu = np.einsum("tqrs,ts->tqr", dmu, g)
    w = (mesh.areas / 3.0)
    ke = np.einsum("tkr,trl,tjl->tkj", mesh.grads, J.sum(axis=1), mesh.grads) * w[:, None, None]
    ke += np.einsum("tkr,tqr,qj->tkj", mesh.grads, fmu, QUAD_BARY) * w[:, None, None]
    sym = 0.5 * (J + np.swapaxes(J, -1, -2))
    tr = sym[..., 0, 0] + sym[..., 1, 1]
    det = sym[..., 0, 0] * sym[..., 1, 1] - sym[..., 0, 1] ** 2
    min_eig = 0.5 * tr - np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    return res, _coo(mesh, ke), float(np.min(min_eig))


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-12
    max_newton: int = 30
    continuation_steps: int = 4
    tau_cap: float = 1.0
    armijo: float = 1e-4


@dataclass(frozen=True)
class NewtonReport:
    iterations: int
    residual: float
    continuation: int = 0
    converged: bool = True


@dataclass(frozen=True, eq=False)
class FieldSolution:
    mesh: object
    values: np.ndarray
    lam: float
    omega: tuple
    tau: float
    report: NewtonReport = field(default_factory=lambda: NewtonReport(0, 0.0))

    def to_dict(self):
        return {"mesh_hash": self.mesh.hash, "lam": self.lam, "omega": list(self.omega),
                "tau": self.tau, "values": [float(v) for v in self.values],
                "report": {"iterations": self.report.iterations, "residual": self.report.residual,
                           "continuation": self.report.continuation,
                           "converged": self.report.converged}}

    @classmethod
    def from_dict(cls, d, mesh):
        if d["mesh_hash"] != mesh.hash:
            raise ValueError("solution snapshot belongs to a different mesh")
        return cls(mesh, np.array(d["values"], dtype=float), float(d["lam"]),
                   tuple(float(x) for x in d["omega"]), float(d["tau"]), NewtonReport(**d["report"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path, mesh):
        with open(path) as fh:
            return cls.from_dict(json.load(fh), mesh)


def _boundary_values(mesh, lam, omega, tau):
    x = mesh.vertices[mesh.boundary_vertices]
    return lam + tau * (x @ np.asarray(omega, dtype=float))


def _newton(model, mesh, u, opts, lam, omega, tau):
    interior = mesh.interior_vertices
    res, jac, min_eig = _jacobian(model, mesh, u)
    rnorm = float(np.max(np.abs(res[interior]))) if len(interior) else 0.0
    scale = 1.0 + float(np.max(np.abs(u)))
    for it in range(opts.max_newton + 1):
        if rnorm <= opts.tol:
            return u, NewtonReport(it, rnorm)
        if it == opts.max_newton:
            break
        if not min_eig > 0:
            raise EllipticityLost(f"Jacobian lost positivity (min eigenvalue {min_eig:.3g})",
                                  lam, omega, tau)
        A = jac[interior][:, interior].tocsc()
        du = splu(A).solve(-res[interior])
        step = 1.0
        while True:
            trial = u.copy()
            trial[interior] += step * du
            if model.in_box(quad_values(mesh, trial), np.zeros((1, 2))) and model.in_box(
                    0.0, element_gradients(mesh, trial)):
                r_new, j_new, e_new = _jacobian(model, mesh, trial)
                new_norm = float(np.max(np.abs(r_new[interior])))
                if new_norm <= (1 - opts.armijo * step) * rnorm or \
                        step * float(np.max(np.abs(du))) <= 1e-14 * scale:
                    break
            step *= 0.5
            if step < 1e-6:
                raise NewtonDiverged(f"line search failed at residual {rnorm:.3e}", lam, omega, tau)
        u, res, jac, min_eig, rnorm = trial, r_new, j_new, e_new, new_norm
        if step == 1.0 and float(np.max(np.abs(du))) <= 1e-14 * scale:
            return u, NewtonReport(it + 1, rnorm)
    raise NewtonDiverged(f"Newton did not converge in {opts.max_newton} iterations "
                         f"(residual {rnorm:.3e})", lam, omega, tau)


def solve_quasilinear(model, mesh, lam, omega, tau, options=None, initial=None):
    """Galerkin solution with boundary data lam + tau x . omega.

    Starts from the affine lift of the boundary data; on failure falls back
    to ``continuation_steps`` equal increments of tau from 0.
    """
    opts = options or SolverOptions()
    omega = np.asarray(omega, dtype=float)
    if abs(tau) > opts.tau_cap:
        raise NewtonDiverged(f"|tau| = {abs(tau)} above cap {opts.tau_cap}", lam, tuple(omega), tau)
    bnd = mesh.boundary_vertices
    if initial is None:
        u0 = lam + tau * (mesh.vertices @ omega)
    else:
        u0 = np.array(initial, dtype=float)
        u0[bnd] = _boundary_values(mesh, lam, omega, tau)
    if not model.in_box(u0, np.zeros((1, 2))):
        raise ModelRangeError("boundary data leave the coefficient's validity box")
    key = (float(lam), tuple(float(x) for x in omega), float(tau))
    try:
        u, rep = _newton(model, mesh, u0, opts, *key)
        return FieldSolution(mesh, _freeze(u), *key, rep)
    except NewtonDiverged as first:
        if opts.continuation_steps <= 1 or tau == 0:
            raise
        err = first
    u = np.full(mesh.n_vertices, float(lam))
    total = 0
    for k in range(1, opts.continuation_steps + 1):
        tk = tau * k / opts.continuation_steps
        u[bnd] = _boundary_values(mesh, lam, omega, tk)
        try:
            u, rep = _newton(model, mesh, u, opts, lam, tuple(omega), tk)
        except NewtonDiverged as exc:
            raise NewtonDiverged(f"continuation failed at tau = {tk:.4g}: {exc} "
                                 f"(cold start: {err})", *key) from exc
        total += rep.iterations
    return FieldSolution(mesh, _freeze(u), *key,
                         NewtonReport(total, rep.residual, opts.continuation_steps))


def _freeze(u):
    u = np.array(u, dtype=float)
    u.setflags(write=False)
    return u


# -- flux extraction -------------------------------------------------------------

def boundary_fluxes(solution, model):
    """Consistent conormal flux at every vertex (NaN at interior vertices).

    The residual at boundary vertex j is divided by |sum_e nu_e |e| / 2| over
    the two boundary edges at j.
    """
    mesh = solution.mesh
    res = nonlinear_residual(model, mesh, solution.values)
    out = np.full(mesh.n_vertices, np.nan)
    b = mesh.boundary_vertices
    out[b] = res[b] / mesh.flux_measure[b]
    return out


def probe_vertices(mesh, points):
    """Boundary vertex indices for probe points (snapped; must be on the boundary)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = []
    for p in pts:
        if abs(mesh.domain.level(p) - 1.0) > 1e-9:
            raise ProbeNotOnBoundary(f"probe {p} is not on the outer boundary")
        j, d = mesh.nearest_boundary_vertex(p)
        if d > mesh.h:
            raise ProbeNotOnBoundary(f"probe {p} is {d:.3g} away from the nearest boundary vertex")
        out.append(j)
    return np.array(out, dtype=np.int64)


def flux_at_probe(solution, model, point):
    mesh = solution.mesh
    j = probe_vertices(mesh, point)[0]
    res = nonlinear_residual(model, mesh, solution.values)
    return float(res[j] / mesh.flux_measure[j])


# -- constant-coefficient linear problems ---------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearDivergenceProblem:
    """-div(A0 grad w) = div K + f weakly, w = g on the boundary.

    ``K`` is a vector field (T, 2) or (T, 3, 2) at quadrature points, ``f`` a
    scalar field (T, 3) at quadrature points, ``g`` a callable on points or
    an array of boundary-vertex values.
    """

    A0: np.ndarray
    K: np.ndarray = None
    g: object = None
    f: np.ndarray = None

    def __post_init__(self):
        A0 = np.asarray(self.A0, dtype=float)
        if np.max(np.abs(A0 - A0.T)) > 1e-12 * max(1.0, np.max(np.abs(A0))) or \
                np.linalg.eigvalsh(0.5 * (A0 + A0.T))[0] <= 0:
            raise ValueError("A0 must be symmetric positive definite")
        object.__setattr__(self, "A0", 0.5 * (A0 + A0.T))


class _FactorCache:
    def __init__(self, size=64):
        self.size = size
        self._d = OrderedDict()
        self._lock = threading.Lock()

    def get(self, mesh, A0):
        key = (mesh.hash, np.asarray(A0, dtype=float).tobytes())
        with self._lock:
            if key in self._d:
                self._d.move_to_end(key)
                return self._d[key]
        K = _stiffness(mesh, np.broadcast_to(A0, (mesh.n_triangles, 2, 2)))
        interior = mesh.interior_vertices
        lu = splu(K[interior][:, interior].tocsc())
        entry = (K, lu)
        with self._lock:
            self._d[key] = entry
            if len(self._d) > self.size:
                self._d.popitem(last=False)
        return entry


_FACTORS = _FactorCache()


def _rhs(mesh, problem):
    rhs = np.zeros(mesh.n_vertices)
    if problem.K is not None:
        K = np.asarray(problem.K, dtype=float)
        if K.ndim == 2:
            K = np.repeat(K[:, None, :], 3, axis=1)
        rhs -= assemble_flux_load(mesh, K)
    if problem.f is not None:
        rhs += assemble_source(mesh, np.asarray(problem.f, dtype=float))
    return rhs


def solve_linear_divergence(problem, mesh):
    """Nodal solution w; the reduced SPD system is factorized once per (mesh, A0)."""
    K, lu = _FACTORS.get(mesh, problem.A0)
    w = np.zeros(mesh.n_vertices)
    bnd = mesh.boundary_vertices
    if problem.g is not None:
        w[bnd] = problem.g(mesh.vertices[bnd]) if callable(problem.g) else problem.g
    rhs = _rhs(mesh, problem) - K @ w
    interior = mesh.interior_vertices
    w[interior] = lu.solve(rhs[interior])
    return w


def linear_boundary_flux(mesh, problem, w):
    """Consistent flux of (A0 grad w + K) at every vertex, using the source f too."""
    K, _ = _FACTORS.get(mesh, problem.A0)
    res = K @ w - _rhs(mesh, problem)
    out = np.full(mesh.n_vertices, np.nan)
    b = mesh.boundary_vertices
    out[b] = res[b] / mesh.flux_measure[b]
    return out
