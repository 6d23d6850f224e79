"""Simulated boundary flux data and finite-difference tau-derivative estimates.

A :class:`MeasurementSet` stores fluxes on a (lambda, omega, tau, probe) grid.
The tau stencil is symmetric, tau in {+-delta, ..., +-s delta}; the value at
tau = 0 is known to be zero (u is constant there) and is never stored.
Direction sets may differ between lambda values, so ``omegas`` has shape
(n_lambda, n_omega, n).
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import multiprocessing
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._version import __version__
from .cascade import cascade_fields
from .coefficients import jet_at
from .errors import NewtonDiverged, StencilError
from .fem import SolverOptions, nonlinear_residual, probe_vertices, solve_quasilinear
from .geometry import ProbeSet

__all__ = [
    "MeasurementSet",
    "DerivativeTable",
    "NoiseAmplificationWarning",
    "fd_weights",
    "stencil_points_needed",
    "default_delta",
    "simulate",
    "add_noise",
    "estimate_derivatives",
    "oracle_derivatives",
]


class NoiseAmplificationWarning(UserWarning):
    pass


def _omega_grid(omegas, n_lam):
    om = np.asarray(omegas, dtype=float)
    if om.ndim == 2:
        om = np.broadcast_to(om, (n_lam,) + om.shape)
    if om.ndim != 3 or om.shape[0] != n_lam:
        raise ValueError("omegas must have shape (n_omega, n) or (n_lambda, n_omega, n)")
    norms = np.linalg.norm(om, axis=-1)
    if np.max(np.abs(norms - 1.0)) > 1e-12:
        raise ValueError("directions omega must be unit vectors")
    return np.array(om)


def _probes_from_dict(d):
    return ProbeSet(np.array(d["points"], dtype=float), np.array(d["normals"], dtype=float),
                    np.array(d["basis"], dtype=float), float(d["margin"]), d.get("mode", "full"))


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    lam_grid: np.ndarray
    omegas: np.ndarray
    delta: float
    s: int
    probes: ProbeSet
    flux: np.ndarray
    noise: float = 0.0
    seed: object = None
    provenance: dict = field(default_factory=dict)

    @property
    def taus(self):
        k = np.concatenate([-np.arange(self.s, 0, -1), np.arange(1, self.s + 1)])
        return self.delta * k

    @property
    def shape(self):
        return self.flux.shape

    def metadata(self):
        return {"format": "quasijet-measurements", "version": __version__,
                "lam_grid": [float(x) for x in self.lam_grid],
                "omegas": self.omegas.tolist(), "delta": self.delta, "s": self.s,
                "taus": [float(t) for t in self.taus], "probes": self.probes.to_dict(),
                "noise": self.noise, "seed": self.seed, "provenance": self.provenance,
                "flux_at_tau0": 0.0}

    def save(self, json_path, csv_path=None):
        if csv_path is None:
            csv_path = os.path.splitext(json_path)[0] + ".csv"
        meta = self.metadata()
        meta["table"] = os.path.basename(csv_path)
        with open(json_path, "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
        write_measurement_csv(self, csv_path)

    @classmethod
    def load(cls, json_path, csv_path=None):
        with open(json_path) as fh:
            meta = json.load(fh)
        if csv_path is None:
            csv_path = os.path.join(os.path.dirname(json_path), meta["table"])
        lam = np.array(meta["lam_grid"], dtype=float)
        om = np.array(meta["omegas"], dtype=float)
        probes = _probes_from_dict(meta["probes"])
        flux = np.full((len(lam), om.shape[1], 2 * meta["s"], probes.m), np.nan)
        with open(csv_path, newline="") as fh:
            rows = csv.reader(line for line in fh if not line.startswith("#"))
            header = next(rows)
            col = {name: i for i, name in enumerate(header)}
            for r in rows:
                flux[int(r[col["lam_index"]]), int(r[col["omega_index"]]),
                     int(r[col["tau_index"]]), int(r[col["probe_index"]])] = float(r[col["flux"]])
        if np.any(np.isnan(flux)):
            raise ValueError("measurement table is incomplete")
        return cls(lam, om, float(meta["delta"]), int(meta["s"]), probes, flux,
                   float(meta["noise"]), meta["seed"], meta["provenance"])


def write_measurement_csv(ms, path):
    taus = ms.taus
    with open(path, "w", newline="") as fh:
        fh.write(f"# quasijet {__version__} config {ms.provenance.get('config_hash', '')}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lam_index", "omega_index", "tau_index", "probe_index", "lam", "omega_1",
                    "omega_2", "tau", "probe_x", "probe_y", "flux"])
        for i, lam in enumerate(ms.lam_grid):
            for j in range(ms.omegas.shape[1]):
                om = ms.omegas[i, j]
                for t, tau in enumerate(taus):
                    for p in range(ms.probes.m):
                        x = ms.probes.points[p]
                        w.writerow([i, j, t, p, repr(float(lam)), repr(float(om[0])),
                                    repr(float(om[1])), repr(float(tau)), repr(float(x[0])),
                                    repr(float(x[1])), repr(float(ms.flux[i, j, t, p]))])


# -- simulation --------------------------------------------------------------------

_WORKER = {}


def _solve_cell(args):
    lam, omega, tau = args
    model, mesh, verts, opts = (_WORKER[k] for k in ("model", "mesh", "verts", "opts"))
    try:
        sol = solve_quasilinear(model, mesh, lam, omega, tau, opts)
    except NewtonDiverged as exc:
        return ("error", str(exc))
    res = nonlinear_residual(model, mesh, sol.values)
    return ("ok", res[verts] / mesh.flux_measure[verts])


def _init_worker(model, mesh, verts, opts):
    _WORKER.update(model=model, mesh=mesh, verts=verts, opts=opts)


def simulate(model, mesh, probes, lam_grid, omegas, delta, s, workers=1, options=None,
             provenance=None):
    """One forward solve and consistent-flux extraction per distinct (lambda, omega, tau).

    (omega, tau) and (-omega, -tau) carry identical boundary data, so such
    cells are solved once and copied.
    """
    lam_grid = np.asarray(lam_grid, dtype=float)
    om = _omega_grid(omegas, len(lam_grid))
    if s < 1 or delta <= 0:
        raise StencilError("stencil needs s >= 1 and delta > 0")
    opts = options or SolverOptions()
    verts = probe_vertices(mesh, probes.points)
    taus = delta * np.concatenate([-np.arange(s, 0, -1), np.arange(1, s + 1)])
    cells, where = [], {}
    for i, lam in enumerate(lam_grid):
        for j in range(om.shape[1]):
            for t, tau in enumerate(taus):
                key = (float(lam), tuple(np.round(om[i, j], 14)), round(float(tau), 15))
                neg = (key[0], tuple(np.round(-om[i, j], 14) + 0.0), round(-float(tau), 15))
                if neg in where:
                    where[key] = where[neg]
                elif key not in where:
                    where[key] = len(cells)
                    cells.append((float(lam), tuple(float(x) for x in om[i, j]), float(tau)))
                where.setdefault(("cell", i, j, t), where[key])
    if workers > 1 and "fork" in multiprocessing.get_all_start_methods():
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker, initargs=(model, mesh, verts, opts)) as pool:
            results = pool.map(_solve_cell, cells, chunksize=max(1, len(cells) // (4 * workers)))
    else:
        _init_worker(model, mesh, verts, opts)
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                results = list(ex.map(_solve_cell, cells))
        else:
            results = [_solve_cell(c) for c in cells]
    for c, (status, val) in zip(cells, results):
        if status != "ok":
            raise NewtonDiverged(f"forward solve failed at lambda={c[0]}, omega={c[1]}, "
                                 f"tau={c[2]}: {val}", *c)
    flux = np.empty((len(lam_grid), om.shape[1], 2 * s, probes.m))
    for i in range(len(lam_grid)):
        for j in range(om.shape[1]):
            for t in range(2 * s):
                flux[i, j, t] = results[where[("cell", i, j, t)]][1]
    prov = {"model_hash": model.model_hash, "mesh_hash": mesh.hash, "h": mesh.h,
            "solver_tol": opts.tol}
    prov.update(provenance or {})
    return MeasurementSet(lam_grid, om, float(delta), int(s), probes, flux, 0.0, None, prov)


def add_noise(ms, eps, seed=0):
    """Independent uniform noise in [-eps, eps] on every stored flux value."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0:
        return ms
    rng = np.random.default_rng(seed)
    flux = ms.flux + rng.uniform(-eps, eps, size=ms.flux.shape)
    return replace(ms, flux=flux, noise=ms.noise + float(eps), seed=seed)


# -- finite differences ----------------------------------------------------------------

def fd_weights(nodes, k):
    """Weights w with f^(k)(0) ~ sum w_i f(nodes_i) (Fornberg's recursion)."""
    x = np.asarray(nodes, dtype=float)
    n = len(x)
    if k >= n:
        raise StencilError(f"{n} nodes cannot resolve derivative order {k}")
    c = np.zeros((n, k + 1))
    c1, c4 = 1.0, x[0]
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, k)
        c2, c5, c4 = 1.0, c4, x[i]
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for m in range(mn, 0, -1):
                    c[i, m] = c1 * (m * c[i - 1, m - 1] - c5 * c[i - 1, m]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for m in range(mn, 0, -1):
                c[j, m] = (c4 * c[j, m] - m * c[j, m - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, k]


def stencil_points_needed(k, p):
    """Half-width s of the central stencil giving derivative k at accuracy order p."""
    if p < 2 or p % 2:
        raise StencilError("accuracy order p must be a positive even integer")
    return (2 * ((k + 1) // 2) - 1 + p) // 2


def _half_weights(k, sp):
    """Weights on +-1..+-sp (unit spacing) combined by parity; also the raw full-stencil weights."""
    nodes = np.arange(-sp, sp + 1)
    w = fd_weights(nodes, k)
    pos = w[sp + 1:]
    neg = w[:sp][::-1]
    if k % 2:
        half = 0.5 * (pos - neg)
    else:
        half = 0.5 * (pos + neg)
    return half, float(np.sum(np.abs(w)))


def default_delta(eps_floor, k, p):
    """Bias/variance balanced step delta* = eps_floor^(1/(k+p))."""
    return float(eps_floor) ** (1.0 / (k + p))


@dataclass(frozen=True, eq=False)
class DerivativeTable:
    """d[k-1, lambda, omega, probe] estimates of d^k flux / d tau^k at tau = 0."""

    lam_grid: np.ndarray
    omegas: np.ndarray
    probes: ProbeSet
    d: np.ndarray
    truncation: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.d.shape[0]

    def order(self, k):
        if not 1 <= k <= self.K:
            raise StencilError(f"derivative order {k} not in table (K = {self.K})")
        return self.d[k - 1]

    def select_lambda(self, idx):
        idx = np.atleast_1d(idx)
        return replace(self, lam_grid=self.lam_grid[idx], omegas=self.omegas[idx],
                       d=self.d[:, idx], truncation=self.truncation[:, idx])

    def with_orders(self, other):
        """Concatenate orders of ``other`` (same lambda grid) after those of self."""
        if not np.array_equal(self.lam_grid, other.lam_grid):
            raise ValueError("lambda grids differ")
        return replace(self, d=np.concatenate([self.d, other.d]),
                       truncation=np.concatenate([self.truncation, other.truncation]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# quasijet {__version__} config {self.meta.get('config_hash', '')}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "lam_index", "omega_index", "probe_index", "lam", "omega_1",
                        "omega_2", "probe_x", "probe_y", "value", "truncation"])
            K, nl, no, m = self.d.shape
            for k in range(K):
                for i in range(nl):
                    for j in range(no):
                        for p in range(m):
                            om = self.omegas[i, j]
                            x = self.probes.points[p]
                            w.writerow([k + 1, i, j, p, repr(float(self.lam_grid[i])),
                                        repr(float(om[0])), repr(float(om[1])), repr(float(x[0])),
                                        repr(float(x[1])), repr(float(self.d[k, i, j, p])),
                                        repr(float(self.truncation[k, i, j, p]))])

    @classmethod
    def from_csv(cls, path, probes, meta=None):
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(line for line in fh if not line.startswith("#"))
            rows = list(reader)
        K = max(int(r["k"]) for r in rows)
        nl = max(int(r["lam_index"]) for r in rows) + 1
        no = max(int(r["omega_index"]) for r in rows) + 1
        m = max(int(r["probe_index"]) for r in rows) + 1
        d = np.full((K, nl, no, m), np.nan)
        tr = np.full_like(d, np.nan)
        lam = np.zeros(nl)
        om = np.zeros((nl, no, 2))
        for r in rows:
            k, i, j, p = (int(r[c]) for c in ("k", "lam_index", "omega_index", "probe_index"))
            d[k - 1, i, j, p] = float(r["value"])
            tr[k - 1, i, j, p] = float(r["truncation"])
            lam[i] = float(r["lam"])
            om[i, j] = float(r["omega_1"]), float(r["omega_2"])
        return cls(lam, om, probes, d, tr, dict(meta or {}))


def estimate_derivatives(ms, K, p=2, richardson=False, orders=None):
    """Central finite-difference estimates of d^k flux / d tau^k at 0 for k = 1..K.

    Odd orders use only f(tau) - f(-tau), even orders only f(tau) + f(-tau)
    (f(0) = 0 is exact).  The truncation estimate compares steps delta and
    2 delta when the stencil is long enough, else accuracy orders p and p + 2.
    """
    orders = list(range(1, K + 1)) if orders is None else list(orders)
    taus_idx = {int(round(t / ms.delta)): i for i, t in enumerate(ms.taus)}
    f = ms.flux
    out = np.zeros((len(orders),) + f.shape[:2] + (f.shape[3],))
    trunc = np.zeros_like(out)
    gains = {}

    def level(k, step, sp):
        half, abs_sum = _half_weights(k, sp)
        acc = 0.0
        for i, wi in enumerate(half, start=1):
            plus, minus = f[:, :, taus_idx[i * step]], f[:, :, taus_idx[-i * step]]
            comb = (plus - minus) if k % 2 else (plus + minus)
            acc = acc + wi * comb
        h = step * ms.delta
        return acc / h ** k, abs_sum / h ** k

    for r, k in enumerate(orders):
        sp = stencil_points_needed(k, p)
        if sp > ms.s:
            raise StencilError(f"stencil half-width {ms.s} too short for derivative {k} at "
                               f"accuracy {p} (needs {sp})")
        fine, gain = level(k, 1, sp)
        coarse = None
        if 2 * sp <= ms.s:
            coarse, _ = level(k, 2, sp)
            est = np.abs(fine - coarse) / (2 ** p - 1)
        elif stencil_points_needed(k, p + 2) <= ms.s:
            est = np.abs(fine - level(k, 1, stencil_points_needed(k, p + 2))[0])
        else:
            est = np.full_like(fine, np.nan)
        if richardson:
            if coarse is None:
                raise StencilError("Richardson extrapolation needs a stencil with 2 levels")
            fine = (2 ** p * fine - coarse) / (2 ** p - 1)
            gain = gain * (2 ** p + 2.0 ** -k) / (2 ** p - 1)
        out[r] = fine
        trunc[r] = est
        gains[k] = gain
        if ms.noise > 0 and np.all(np.isfinite(est)):
            amp = ms.noise * gain
            if amp > 10 * max(float(np.max(est)), 1e-300):
                warnings.warn(f"noise amplification eps * sum|w| / delta^{k} = {amp:.2e} exceeds "
                              f"ten times the truncation estimate", NoiseAmplificationWarning,
                              stacklevel=2)
    meta = {"method": "central", "p": p, "richardson": richardson, "delta": ms.delta,
            "s": ms.s, "noise": ms.noise, "noise_gain": {str(k): g for k, g in gains.items()},
            "orders": orders, "effective_delta": {str(k): ms.delta for k in orders}}
    meta.update({k: v for k, v in ms.provenance.items() if k in ("config_hash", "model_hash",
                                                                  "mesh_hash")})
    return DerivativeTable(ms.lam_grid, ms.omegas, ms.probes, out, trunc, meta)


def oracle_derivatives(model, mesh, probes, lam_grid, omegas, K, exact_first=True):
    """Derivative table from the tau-cascade of the model's exact jet (no FD error).

    With ``exact_first`` the order-1 entries use the analytic a(lambda, 0)
    omega . nu at the probe normals.
    """
    lam_grid = np.asarray(lam_grid, dtype=float)
    om = _omega_grid(omegas, len(lam_grid))
    verts = probe_vertices(mesh, probes.points)
    d = np.zeros((K, len(lam_grid), om.shape[1], probes.m))
    for i, lam in enumerate(lam_grid):
        jet = jet_at(model, lam, max(K - 1, 0))
        for j in range(om.shape[1]):
            tj = cascade_fields(jet, mesh, om[i, j], K)
            for k in range(1, K + 1):
                d[k - 1, i, j] = tj.flux_derivative(k, verts)
            if exact_first:
                d[0, i, j] = probes.normals @ (jet.a0 @ om[i, j])
    meta = {"method": "cascade-oracle", "model_hash": model.model_hash, "mesh_hash": mesh.hash}
    return DerivativeTable(lam_grid, om, probes, d, np.zeros_like(d), meta)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
