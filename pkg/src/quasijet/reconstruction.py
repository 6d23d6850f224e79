"""Recover the jet of a(lambda, 0) from tau-derivatives of boundary fluxes.

Pipeline per lambda on a grid:

1. order 0: a(lambda, 0) from first derivatives at the probe-set basis
   directions (least squares over n^2 equations for n(n+1)/2 unknowns);
2. eigenstructure of a(lambda, 0), aligned along the grid;
3. for N = 1 .. N_max: subtract the lower-order flux contribution (computed
   by the tau-cascade from the jet recovered so far, with lambda-derivatives
   taken by finite differences on the grid), solve the probe-normal system
   for v = D_eta^N a(omega, ..., omega) omega, project v on each eigenvalue
   branch, and polarize the directional values into symmetric tensors.

Higher-order data are requested only after the eigenvectors are known,
because the evaluation directions are chosen to keep every branch
projection away from zero.  Data therefore come from a *source* that can be
queried for arbitrary directions (see :class:`OracleSource`,
:class:`SimulationSource`, :class:`TableSource`).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._version import __version__
from .cascade import correction_terms
from .coefficients import JetAt, jet_at
from .errors import (ConditionHViolated, InconsistentData, ProjectionDegenerate,
                     SignatureMismatch)
from .fem import LinearDivergenceProblem, linear_boundary_flux, probe_vertices, solve_linear_divergence
from .measurement import (DerivativeTable, add_noise, estimate_derivatives, fd_weights,
                          oracle_derivatives, simulate)
from .tensor_core import (SymTensor, _multi_indices, align_branches, polarization_directions,
                          polarize, sym_eigendecompose, sym_matrix)

__all__ = [
    "JetTable",
    "OracleSource",
    "SimulationSource",
    "TableSource",
    "PerturbedSource",
    "recover_order0",
    "recover_isotropic_onepoint",
    "recover_directional",
    "recover_jet",
    "design_basis",
    "lambda_derivative",
    "branch_tensors_from_jet",
    "order0_operator_norm",
]


# -- data sources --------------------------------------------------------------------

class OracleSource:
    """Exact tau-derivatives of the discrete problem from the model's jet."""

    noise_free = True

    def __init__(self, model, mesh):
        self.model, self.mesh = model, mesh

    def table(self, lam_grid, omegas, orders, probes):
        t = oracle_derivatives(self.model, self.mesh, probes, lam_grid, omegas, max(orders))
        return replace(t, d=t.d[np.array(orders) - 1], truncation=t.truncation[np.array(orders) - 1])


class SimulationSource:
    """Forward solves on a tau stencil followed by finite-difference estimates."""

    noise_free = False

    def __init__(self, model, mesh, delta=0.02, s=4, p=4, richardson=False, noise=0.0, seed=0,
                 workers=1, options=None):
        self.model, self.mesh = model, mesh
        self.delta, self.s, self.p, self.richardson = delta, s, p, richardson
        self.noise, self.seed, self.workers, self.options = noise, seed, workers, options
        self.calls = 0
        self.measurements = []

    def table(self, lam_grid, omegas, orders, probes):
        ms = simulate(self.model, self.mesh, probes, lam_grid, omegas, self.delta, self.s,
                      workers=self.workers, options=self.options)
        if self.noise > 0:
            ms = add_noise(ms, self.noise, seed=[int(self.seed), self.calls])
        self.calls += 1
        self.measurements.append(ms)
        return estimate_derivatives(ms, max(orders), p=self.p, richardson=self.richardson,
                                    orders=orders)


class PerturbedSource:
    """Wraps a source and adds uniform noise in [-eps, eps] to every derivative value."""

    noise_free = False

    def __init__(self, inner, eps, seed=0):
        self.inner, self.eps, self.seed = inner, float(eps), seed
        self.calls = 0

    def table(self, lam_grid, omegas, orders, probes):
        t = self.inner.table(lam_grid, omegas, orders, probes)
        rng = np.random.default_rng([int(self.seed), self.calls])
        self.calls += 1
        d = t.d + rng.uniform(-self.eps, self.eps, size=t.d.shape)
        meta = dict(t.meta, noise=self.eps)
        return replace(t, d=d, meta=meta)


class TableSource:
    """Serve requests from a fixed table; every requested direction must be present."""

    def __init__(self, table):
        self.data = table
        self.noise_free = table.meta.get("method") == "cascade-oracle" and \
            not table.meta.get("noise", 0.0)

    def table(self, lam_grid, omegas, orders, probes):
        t = self.data
        lam_idx = []
        for lam in lam_grid:
            hit = np.flatnonzero(np.abs(t.lam_grid - lam) <= 1e-12 * max(1.0, abs(lam)))
            if not len(hit):
                raise InconsistentData(f"lambda = {lam} not in the derivative table")
            lam_idx.append(hit[0])
        om = np.asarray(omegas, dtype=float)
        if om.ndim == 2:
            om = np.broadcast_to(om, (len(lam_grid),) + om.shape)
        d = np.empty((len(orders), len(lam_grid), om.shape[1], t.d.shape[-1]))
        tr = np.empty_like(d)
        for a, i in enumerate(lam_idx):
            for b in range(om.shape[1]):
                dots = t.omegas[i] @ om[a, b]
                j = int(np.argmax(dots))
                if dots[j] < 1 - 1e-10:
                    raise InconsistentData(f"direction {om[a, b]} missing at lambda = {lam_grid[a]}")
                for c, k in enumerate(orders):
                    d[c, a, b] = t.order(k)[i, j]
                    tr[c, a, b] = t.truncation[k - 1, i, j]
        return DerivativeTable(np.asarray(lam_grid, dtype=float), np.array(om), t.probes, d, tr,
                               dict(t.meta))


def _default_lam_order(source):
    """High order for exact data, moderate for clean FD data, low once noise is added."""
    if getattr(source, "noise_free", False):
        return 8
    noise = getattr(source, "noise", None)
    if noise is None:
        noise = getattr(source, "eps", 1.0)
    return 4 if noise == 0 else 2


def _as_source(source):
    return TableSource(source) if isinstance(source, DerivativeTable) else source


# -- order 0 ---------------------------------------------------------------------------

def _order0_design(normals, omegas):
    n = normals.shape[1]
    pairs = [(p, q) for p in range(n) for q in range(p, n)]
    rows = []
    for w in omegas:
        for nu in normals:
            rows.append([nu[p] * w[q] + (nu[q] * w[p] if p != q else 0.0) for p, q in pairs])
    return np.array(rows), pairs


def order0_operator_norm(normals, omegas):
    """Max-norm operator bound of the least-squares map d1 -> A (max entry per unit sup|d1|)."""
    G, pairs = _order0_design(normals, omegas)
    return float(np.max(np.sum(np.abs(np.linalg.pinv(G)), axis=1)))


def _check_H(probes):
    n = probes.dim
    if probes.mode == "full" and probes.margin >= 1 / math.sqrt(n):
        raise ConditionHViolated(probes.margin, 1 / math.sqrt(n))


def recover_order0(d1, probes, omegas, residual_tol=None):
    """Symmetric A with A omega_k . nu(x_j) = d1[k, j] (least squares).

    ``d1`` has shape (n_omega, m); ``omegas`` must contain an orthonormal basis.
    Returns ``(A, residual)``.
    """
    _check_H(probes)
    omegas = np.asarray(omegas, dtype=float)
    n = probes.dim
    if np.linalg.matrix_rank(omegas) < n:
        raise InconsistentData("order-0 directions do not span R^n")
    G, pairs = _order0_design(probes.normals, omegas)
    rhs = np.asarray(d1, dtype=float).reshape(-1)
    x, *_ = np.linalg.lstsq(G, rhs, rcond=None)
    A = np.zeros((n, n))
    for v, (p, q) in zip(x, pairs):
        A[p, q] = v
    A = sym_matrix(A)
    resid = float(np.max(np.abs(G @ x - rhs)))
    if residual_tol is not None and resid > residual_tol:
        raise InconsistentData(f"order-0 residual {resid:.3e} above {residual_tol:.1e}")
    return A, resid


def recover_isotropic_onepoint(d1, probe, omega):
    """gamma(lambda, 0) = d1 at x0 for omega = nu(x0)."""
    nu = np.asarray(probe.normals[0], dtype=float)
    if abs(float(np.dot(nu, omega)) - 1.0) > 1e-12:
        raise InconsistentData("one-point recovery needs omega = nu(x0)")
    return float(d1)


# -- directional values and designs ------------------------------------------------------

def design_basis(frame, projectors, N, threshold, projection="average"):
    """Evaluation basis (columns) whose polarization directions clear ``threshold``.

    Tries the frame itself, then skewed bases
    v_k = frame . normalize((1 - t)/n (1, .., 1) + t e_k) for decreasing t.
    Returns ``(V, directions, t)``.
    """
    frame = np.asarray(frame, dtype=float)
    n = frame.shape[0]
    for t in [1.0] + [0.6 - 0.05 * i for i in range(11)]:
        cols = []
        for k in range(n):
            c = (1 - t) / n * np.ones(n)
            c[k] += t
            cols.append(frame @ (c / np.linalg.norm(c)))
        V = np.array(cols).T
        dirs = polarization_directions(N, basis=V)
        ok = True
        for P, f1 in projectors:
            for d in dirs:
                m = np.linalg.norm(P @ d) if projection == "average" else abs(float(d @ f1))
                if m < threshold:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return V, dirs, t
    raise ProjectionDegenerate(f"no evaluation design clears projection threshold {threshold}")


def recover_directional(N, dK, corrections, probes, omega, eig, proj_threshold=0.2,
                        projection="average"):
    """Per-branch D_eta^N gamma_i(lambda, 0)(omega, ..., omega).

    ``dK`` holds the order-(N+1) flux derivatives at the probes and
    ``corrections`` the same quantity with the top jet slot removed.
    """
    omega = np.asarray(omega, dtype=float)
    r = (np.asarray(dK, dtype=float) - np.asarray(corrections, dtype=float)) / (N + 1)
    if probes.mode == "single":
        nu = probes.normals[0]
        c = float(nu @ omega)
        if abs(c) < proj_threshold:
            raise ProjectionDegenerate(f"|omega . nu(x0)| = {abs(c):.3g} below {proj_threshold}")
        return np.array([r[0] / c])
    v = np.linalg.solve(probes.normals, r)
    out = []
    for b in eig.branches:
        if projection == "average":
            pw = b.projector @ omega
            den = float(pw @ pw)
            if math.sqrt(den) < proj_threshold:
                raise ProjectionDegenerate(f"|P_i omega| = {math.sqrt(den):.3g} below {proj_threshold}")
            out.append(float(v @ pw) / den)
        else:
            f1 = b.vectors[:, 0]
            den = float(omega @ f1)
            if abs(den) < proj_threshold:
                raise ProjectionDegenerate(f"|omega . f_i1| = {abs(den):.3g} below {proj_threshold}")
            out.append(float(v @ f1) / den)
    return np.array(out)


# -- lambda derivatives ---------------------------------------------------------------------

def lambda_derivative(values, lam_grid, i, j, order):
    """j-th derivative at lam_grid[i] from the (j + order) nearest grid values."""
    values = np.asarray(values, dtype=float)
    if j == 0:
        return values[i]
    lam = np.asarray(lam_grid, dtype=float)
    npts = min(len(lam), j + order)
    if npts <= j:
        raise InconsistentData(f"lambda grid too short for a derivative of order {j}")
    dist = np.abs(lam - lam[i])
    idx = np.sort(np.argsort(dist, kind="stable")[:npts])
    w = fd_weights(lam[idx] - lam[i], j)
    return np.tensordot(w, values[idx], axes=(0, 0))


# -- jet tables ---------------------------------------------------------------------------------

def _matrix_slot_tensor(branch_tensors, eig, N):
    n = eig.dim
    ent = np.zeros((len(_multi_indices(n, N)), n, n))
    for T, b in zip(branch_tensors, eig.branches):
        ent += T.entries[:, None, None] * b.projector
    return SymTensor(n, N, ent)


def branch_tensors_from_jet(jet, N, eig):
    """Per-branch tensors tr(P_i D_eta^N a) / m_i of a model jet, for comparisons."""
    T = jet.slot(0, N)
    out = []
    for b in eig.branches:
        vals = np.einsum("irs,sr->i", T.entries, b.projector) / b.multiplicity
        out.append(SymTensor(eig.dim, N, vals))
    return out


@dataclass(frozen=True, eq=False)
class JetTable:
    lam_grid: np.ndarray
    A0: np.ndarray
    eig: tuple
    tensors: dict
    mode: str = "eigenform"
    gamma: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def N_max(self):
        return max(self.tensors, default=0)

    @property
    def signature(self):
        return self.eig[0].signature

    def branch_tensor(self, N, i, branch):
        return self.tensors[N][i][branch]

    def a_eta(self, N, i):
        """D_eta^N a(lambda_i, 0) as a matrix-slot symmetric tensor."""
        if N == 0:
            return SymTensor(self.A0.shape[1], 0, self.A0[i][None])
        return _matrix_slot_tensor(self.tensors[N][i], self.eig[i], N)

    def to_dict(self):
        def tens(t):
            return {"dim": t.dim, "rank": t.rank,
                    "indices": [list(ix) for ix in t.indices],
                    "values": [float(v) for v in t.entries.reshape(len(t.indices), -1)[:, 0]]}
        out = {"format": "quasijet-jet", "version": __version__, "mode": self.mode,
               "tensor_norm": "max over sorted multi-indices",
               "lam_grid": [float(x) for x in self.lam_grid], "A0": self.A0.tolist(),
               "eigen": [[{"eigenvalue": b.eigenvalue, "multiplicity": b.multiplicity,
                           "vectors": b.vectors.tolist()} for b in e.branches] for e in self.eig],
               "tensors": {str(N): [[tens(t) for t in per] for per in rows]
                           for N, rows in self.tensors.items()},
               "gamma": {str(N): [tens(t) for t in rows] for N, rows in self.gamma.items()},
               "diagnostics": _jsonable(self.diagnostics)}
        return out

    def save(self, path, extra=None):
        d = self.to_dict()
        if extra:
            d.update(extra)
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d):
        from .tensor_core import Branch, EigenStructure

        def tens(x):
            return SymTensor(x["dim"], x["rank"], np.array(x["values"], dtype=float))
        eig = tuple(EigenStructure(len(bs[0]["vectors"]), tuple(
            Branch(b["eigenvalue"], b["multiplicity"], np.array(b["vectors"])) for b in bs), 0.0)
            for bs in d["eigen"])
        tensors = {int(N): [[tens(t) for t in per] for per in rows] for N, rows in d["tensors"].items()}
        gamma = {int(N): [tens(t) for t in rows] for N, rows in d.get("gamma", {}).items()}
        return cls(np.array(d["lam_grid"]), np.array(d["A0"]), eig, tensors, d["mode"], gamma,
                   d.get("diagnostics", {}))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


# -- the pipeline --------------------------------------------------------------------------------

def _lower_jet(lam_grid, i, mats, N, lam_order):
    """JetAt at lam_grid[i] with slots (j, k), k <= N - 1, j + k <= N, from grid values.

    ``mats[k]`` is an array (L, C, n, n) of D_eta^k a on the grid.
    """
    n = mats[0].shape[-1]
    slots = {}
    for k in range(N):
        for j in range(N + 1 - k):
            vals = lambda_derivative(mats[k], lam_grid, i, j, lam_order)
            slots[(j, k)] = SymTensor(n, k, vals)
    return JetAt(float(lam_grid[i]), n, slots)


def _separable_first_order(table_d2, lam_grid, i, omegas, probes, mesh, A0s, lam_order):
    """D_eta gamma(lambda, 0)(omega) for a = gamma b with gamma(mu, 0) = 1.

    Uses  d2 = 2 (x . omega) b' omega . nu + 2 D_eta gamma(omega) b omega . nu + b grad y . nu
    with  -div(b grad y) = 2 omega . b' omega, y = 0 on the boundary.
    """
    b = A0s[i]
    db = lambda_derivative(A0s, lam_grid, i, 1, lam_order)
    verts = probe_vertices(mesh, probes.points)
    out = []
    for j, w in enumerate(omegas):
        f = np.full((mesh.n_triangles, 3), 2.0 * float(w @ db @ w))
        prob = LinearDivergenceProblem(b, f=f)
        y = solve_linear_divergence(prob, mesh)
        yflux = linear_boundary_flux(mesh, prob, y)[verts]
        xw = probes.points @ w
        term1 = 2.0 * xw * (probes.normals @ (db @ w))
        coef = 2.0 * (probes.normals @ (b @ w))
        r = table_d2[j] - term1 - yflux
        out.append(float(coef @ r) / float(coef @ coef))
    return np.array(out)


def recover_jet(source, probes, lam_grid, N_max, mode="eigenform", mesh=None, proj_threshold=0.2,
                projection="average", lam_order=None, cluster_tol=None, residual_tol=None,
                polarize_check=False):
    """Reconstruct D_eta^N a(lambda, 0) for N = 0 .. N_max on ``lam_grid``.

    ``source`` is a data source or a :class:`DerivativeTable` containing all
    requested directions.  ``mesh`` is required for N_max >= 1 (corrections
    are computed by the tau-cascade on it).
    """
    if mode not in ("eigenform", "isotropic_onepoint", "separable_explicit"):
        raise ValueError(f"unknown mode {mode!r}")
    if N_max >= 1 and mesh is None:
        raise ValueError("a mesh is required for N_max >= 1")
    source = _as_source(source)
    lam_grid = np.asarray(lam_grid, dtype=float)
    L = len(lam_grid)
    n = probes.dim
    if lam_order is None:
        lam_order = _default_lam_order(source)
    diag = {"mode": mode, "lam_order": lam_order, "proj_threshold": proj_threshold,
            "projection": projection, "tensor_norm": "max over sorted multi-indices"}

    # order 0
    if mode == "isotropic_onepoint":
        if probes.mode != "single":
            raise ValueError("isotropic_onepoint mode needs a single-probe set")
        nu = probes.normals[0]
        t1 = source.table(lam_grid, nu[None, :], [1], probes)
        g0 = np.array([recover_isotropic_onepoint(t1.d[0, i, 0, 0], probes, nu) for i in range(L)])
        A0s = g0[:, None, None] * np.eye(n)
        diag["order0_residual"] = [0.0] * L
    else:
        _check_H(probes)
        basis = probes.basis
        t1 = source.table(lam_grid, basis, [1], probes)
        A0s, res = [], []
        for i in range(L):
            A, r = recover_order0(t1.d[0, i], probes, basis, residual_tol)
            A0s.append(A)
            res.append(r)
        A0s = np.array(A0s)
        diag["order0_residual"] = res

    eigs = [sym_eigendecompose(A0s[0], cluster_tol)]
    for i in range(1, L):
        e = sym_eigendecompose(A0s[i], cluster_tol)
        try:
            e = align_branches(eigs[-1], e)
        except SignatureMismatch as exc:
            raise SignatureMismatch(f"{exc} between lambda = {lam_grid[i - 1]} and {lam_grid[i]}") from None
        eigs.append(e)
    if mode == "isotropic_onepoint":
        eigs = [_single_branch(A0s[i]) for i in range(L)]

    mats = {0: A0s[:, None, :, :]}
    tensors, gamma = {}, {}
    for N in range(1, N_max + 1):
        designs = []
        for i in range(L):
            if mode == "isotropic_onepoint":
                nu = probes.normals[0]
                frame = np.array([nu, [-nu[1], nu[0]]]).T
                proj = [(np.outer(nu, nu), nu)]
            else:
                frame = eigs[i].basis()
                proj = [(b.projector, b.vectors[:, 0]) for b in eigs[i].branches]
                if len(eigs[i].branches) == 1:
                    frame = np.eye(n)
            designs.append(design_basis(frame, proj, N, proj_threshold, projection))
        nd = max(len(d[1]) for d in designs)
        om = np.array([list(d[1]) + [d[1][0]] * (nd - len(d[1])) for d in designs])
        tk = source.table(lam_grid, om, [N + 1], probes)
        diag[f"design_t_{N}"] = [d[2] for d in designs]
        rows, grows = [], []
        for i in range(L):
            V, dirs, _ = designs[i]
            if mode == "separable_explicit" and N == 1:
                vals = _separable_first_order(tk.d[0, i], lam_grid, i, om[i], probes, mesh,
                                              A0s, lam_order)
                per_dir = {j: np.array([vals[j]]) for j in range(len(dirs))}
            else:
                jet = _lower_jet(lam_grid, i, mats, N, lam_order)
                per_dir = {}
                for j, w in enumerate(dirs):
                    corr = correction_terms(jet, mesh, w, N + 1, probes)
                    per_dir[j] = recover_directional(N, tk.d[0, i, j], corr, probes, w, eigs[i],
                                                     proj_threshold, projection)
            nb = len(next(iter(per_dir.values())))
            branch_T = []
            for bi in range(nb):
                def q(u, bi=bi):
                    dots = np.array([u @ d for d in dirs])
                    j = int(np.argmax(dots))
                    if dots[j] < 1 - 1e-9:
                        raise InconsistentData("polarization requested an unmeasured direction")
                    return per_dir[j][bi]
                branch_T.append(polarize(q, N, n, basis=V, check=polarize_check))
            if mode == "separable_explicit" and N == 1:
                grows.append(branch_T[0])
                branch_T = [branch_T[0] * b.eigenvalue for b in eigs[i].branches]
            elif mode == "isotropic_onepoint":
                pass
            rows.append(branch_T)
        tensors[N] = rows
        if grows:
            gamma[N] = grows
        mats[N] = np.array([_matrix_slot_tensor(rows[i], eigs[i], N).entries for i in range(L)])
    return JetTable(lam_grid, A0s, tuple(eigs), tensors, mode, gamma, diag)


def _single_branch(A):
    from .tensor_core import Branch, EigenStructure
    n = A.shape[0]
    return EigenStructure(n, (Branch(float(A[0, 0]), n, np.eye(n)),), 0.0)
