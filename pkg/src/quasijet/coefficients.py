"""Quasilinear coefficient models a(mu, eta) and their jets at (lambda, 0).

Four families are supported:

``isotropic``      a = gamma(mu, eta) Id
``gradient_only``  a = gamma(eta) Id
``separable``      a = gamma(mu, eta) b(mu),  gamma(mu, 0) = 1
``eigenform``      a = U(mu) Diag(gamma_1 .. gamma_p) U(mu)^T

All scalar ingredients are :class:`~quasijet.expressions.Expression` objects,
so every partial derivative is exact.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import (EllipticityViolation, JetOrderError, ModelRangeError,
                     QuasijetError)
from .expressions import Expression, Taylor, parse_expression
from .tensor_core import SymTensor, _multi_indices

__all__ = [
    "CoefficientModel",
    "JetAt",
    "ValidityReport",
    "isotropic",
    "gradient_only",
    "separable",
    "eigenform",
    "model_from_config",
    "jet_at",
    "check_validity",
    "kirchhoff_flux_oracle",
    "kirchhoff_solution",
    "InsufficientModes",
]

FAMILIES = ("isotropic", "gradient_only", "separable", "eigenform")


class InsufficientModes(QuasijetError, ValueError):
    pass


def _givens_pairs(n):
    return [(p, q) for p in range(n) for q in range(p + 1, n)]


@dataclass(frozen=True, eq=False)
class CoefficientModel:
    dim: int
    family: str
    gammas: tuple
    b: tuple = None
    angles: tuple = None
    multiplicities: tuple = None
    mu_range: tuple = (-2.0, 2.0)
    eta_radius: float = 1.0
    max_jet_order: int = 6
    config: dict = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.family == "gradient_only" and self.gammas[0].uses_mu:
            raise ValueError("gradient_only coefficients must not depend on mu")
        if self.family == "separable":
            for row in self.b:
                for e in row:
                    if e.uses_eta:
                        raise ValueError("b(mu) must not depend on eta")
            mus = np.linspace(*self.mu_range, 33)
            g0 = np.asarray(self.gammas[0](mus, [np.zeros_like(mus)] * self.dim)) * np.ones_like(mus)
            if np.max(np.abs(g0 - 1.0)) > 1e-12:
                raise ValueError("separable family requires gamma(mu, 0) = 1")
        if self.family == "eigenform":
            if sum(self.multiplicities) != self.dim:
                raise ValueError("multiplicities must sum to dim")
            if len(self.gammas) != len(self.multiplicities):
                raise ValueError("one gamma per eigenvalue branch is required")
            if len(self.angles) != len(_givens_pairs(self.dim)):
                raise ValueError(f"eigenform in dim {self.dim} needs "
                                 f"{len(_givens_pairs(self.dim))} rotation angles")
            for e in self.angles:
                if e.uses_eta:
                    raise ValueError("eigenvector angles must depend on mu only")

    @property
    def model_hash(self):
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_config(self):
        if self.config is not None:
            return dict(self.config)
        cfg = {"family": self.family, "dim": self.dim,
               "box": {"mu": list(self.mu_range), "eta_radius": self.eta_radius},
               "max_jet_order": self.max_jet_order}
        if self.family == "eigenform":
            cfg["gammas"] = [g.source for g in self.gammas]
            cfg["angles"] = [a.source for a in self.angles]
            cfg["multiplicities"] = list(self.multiplicities)
        else:
            cfg["gamma"] = self.gammas[0].source
        if self.family == "separable":
            cfg["b"] = [[e.source for e in row] for row in self.b]
        return cfg

    @property
    def is_mu_only(self):
        return self.family == "isotropic" and not self.gammas[0].uses_eta

    # -- generic evaluation -------------------------------------------------
    def _entries(self, mu, eta):
        """Nested list of matrix entries; works for floats, arrays and Taylor."""
        n = self.dim
        if self.family in ("isotropic", "gradient_only"):
            g = self.gammas[0](mu, eta)
            zero = g * 0.0
            return [[g if i == j else zero for j in range(n)] for i in range(n)]
        if self.family == "separable":
            g = self.gammas[0](mu, eta)
            out = [[None] * n for _ in range(n)]
            for i in range(n):
                for j in range(i, n):
                    out[i][j] = out[j][i] = g * self.b[i][j](mu, eta)
            return out
        # eigenform
        cols = []
        for branch, m in zip(self.gammas, self.multiplicities):
            g = branch(mu, eta)
            cols.extend([g] * m)
        U = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
        for (p, q), ang in zip(_givens_pairs(n), self.angles):
            th = ang(mu, eta)
            c, s = _cos(th), _sin(th)
            for i in range(n):
                up, uq = U[i][p], U[i][q]
                U[i][p] = up * c + uq * s
                U[i][q] = uq * c - up * s
        out = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                acc = 0.0
                for k in range(n):
                    acc = acc + U[i][k] * U[j][k] * cols[k]
                out[i][j] = out[j][i] = acc
        return out

    def in_box(self, mu, eta, slack=1e-12):
        lo, hi = self.mu_range
        mu = np.asarray(mu, dtype=float)
        r = np.linalg.norm(np.asarray(eta, dtype=float), axis=-1)
        return bool(np.all(mu >= lo - slack) and np.all(mu <= hi + slack)
                    and np.all(r <= self.eta_radius + slack))

    def eval(self, mu, eta):
        """Symmetric matrix a(mu, eta); raises :class:`ModelRangeError` outside the box."""
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.dim,):
            raise ValueError(f"eta must have shape ({self.dim},)")
        if not self.in_box(mu, eta):
            raise ModelRangeError(
                f"(mu={mu}, |eta|={np.linalg.norm(eta):.4g}) outside validity box "
                f"mu in {self.mu_range}, |eta| <= {self.eta_radius}")
        ent = self._entries(float(mu), list(eta))
        return np.array([[float(x) for x in row] for row in ent])

    def eval_batch(self, mu, eta, derivatives=False):
        """Vectorized evaluation at points ``mu`` (shape B) and ``eta`` (shape (B, n)).

        Returns ``a`` with shape (n, n, B); with ``derivatives`` also
        ``d a / d mu`` (n, n, B) and ``d a / d eta_l`` stacked as (n, n, n, B)
        with the eta index third.
        """
        mu = np.asarray(mu, dtype=float)
        eta = np.asarray(eta, dtype=float)
        n = self.dim
        shape = mu.shape
        if not derivatives:
            ent = self._entries(mu, [eta[..., i] for i in range(n)])
            return np.array([[np.broadcast_to(x, shape) for x in row] for row in ent])
        nv = n + 1
        mu_t = Taylor.variable(nv, 1, 0, mu)
        eta_t = [Taylor.variable(nv, 1, i + 1, eta[..., i]) for i in range(n)]
        ent = self._entries(mu_t, eta_t)
        a = np.empty((n, n) + shape)
        da_mu = np.empty((n, n) + shape)
        da_eta = np.empty((n, n, n) + shape)
        sp = mu_t.space
        e_mu = sp.index[(1,) + (0,) * n]
        e_eta = [sp.index[tuple(1 if k == l + 1 else 0 for k in range(nv))] for l in range(n)]
        for i in range(n):
            for j in range(n):
                x = ent[i][j]
                if not isinstance(x, Taylor):
                    a[i, j] = x
                    da_mu[i, j] = 0.0
                    da_eta[i, j] = 0.0
                    continue
                c = np.broadcast_to(x.coeffs, (sp.size,) + shape)
                a[i, j] = c[0]
                da_mu[i, j] = c[e_mu]
                for l in range(n):
                    da_eta[i, j, l] = c[e_eta[l]]
        return a, da_mu, da_eta


def _cos(x):
    return x.cos() if isinstance(x, Taylor) else np.cos(x)


def _sin(x):
    return x.sin() if isinstance(x, Taylor) else np.sin(x)


# -- constructors --------------------------------------------------------------

def _box_kwargs(mu_range, eta_radius, max_jet_order):
    return dict(mu_range=tuple(float(v) for v in mu_range), eta_radius=float(eta_radius),
                max_jet_order=int(max_jet_order))


def isotropic(gamma, dim=2, mu_range=(-2.0, 2.0), eta_radius=1.0, max_jet_order=6):
    return CoefficientModel(dim, "isotropic", (parse_expression(gamma, dim),),
                            **_box_kwargs(mu_range, eta_radius, max_jet_order))


def gradient_only(gamma="1 + etasq", dim=2, mu_range=(-2.0, 2.0), eta_radius=1.0,
                  max_jet_order=6):
    return CoefficientModel(dim, "gradient_only", (parse_expression(gamma, dim),),
                            **_box_kwargs(mu_range, eta_radius, max_jet_order))


def separable(b, gamma="1", dim=None, mu_range=(-2.0, 2.0), eta_radius=1.0, max_jet_order=6):
    """``b`` is a square nested list of expressions in ``mu`` (upper triangle is used)."""
    dim = len(b) if dim is None else dim
    rows = []
    for i in range(dim):
        row = []
        for j in range(dim):
            src = b[i][j] if j >= i else b[j][i]
            row.append(parse_expression(src, dim))
        rows.append(tuple(row))
    return CoefficientModel(dim, "separable", (parse_expression(gamma, dim),), b=tuple(rows),
                            **_box_kwargs(mu_range, eta_radius, max_jet_order))


def eigenform(gammas, angles=None, multiplicities=None, dim=2, mu_range=(-2.0, 2.0),
              eta_radius=1.0, max_jet_order=6):
    """a = U(mu) Diag(gamma_i) U(mu)^T, U a product of Givens rotations.

    In two dimensions ``angles`` is a single expression theta(mu) and
    U(mu) = R(theta(mu)).
    """
    if multiplicities is None:
        multiplicities = (1,) * len(gammas)
    if angles is None:
        angles = ["0"] * len(_givens_pairs(dim))
    if isinstance(angles, (str, int, float)):
        angles = [angles]
    return CoefficientModel(dim, "eigenform", tuple(parse_expression(g, dim) for g in gammas),
                            angles=tuple(parse_expression(a, dim) for a in angles),
                            multiplicities=tuple(int(m) for m in multiplicities),
                            **_box_kwargs(mu_range, eta_radius, max_jet_order))


_MODEL_KEYS = {"family", "dim", "gamma", "gammas", "b", "angles", "multiplicities", "box",
               "max_jet_order", "name"}


def model_from_config(cfg):
    """Build a model from a declarative mapping (e.g. parsed JSON)."""
    unknown = set(cfg) - _MODEL_KEYS
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    family = cfg.get("family")
    dim = int(cfg.get("dim", 2))
    box = cfg.get("box", {})
    unknown = set(box) - {"mu", "eta_radius"}
    if unknown:
        raise ValueError(f"unknown box keys: {sorted(unknown)}")
    kw = dict(mu_range=tuple(box.get("mu", (-2.0, 2.0))), eta_radius=box.get("eta_radius", 1.0),
              max_jet_order=cfg.get("max_jet_order", 6))
    if family == "isotropic":
        m = isotropic(cfg["gamma"], dim, **kw)
    elif family == "gradient_only":
        m = gradient_only(cfg.get("gamma", "1 + etasq"), dim, **kw)
    elif family == "separable":
        m = separable(cfg["b"], cfg.get("gamma", "1"), dim, **kw)
    elif family == "eigenform":
        m = eigenform(cfg["gammas"], cfg.get("angles"), cfg.get("multiplicities"), dim, **kw)
    else:
        raise ValueError(f"unknown family {family!r}")
    return m


# -- jets ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class JetAt:
    """Matrix-valued derivative tensors d_mu^j D_eta^k a(lambda, 0).

    ``slots[(j, k)]`` is a rank-k :class:`SymTensor` whose stored values are
    n x n symmetric matrices.
    """

    lam: float
    dim: int
    slots: dict

    @property
    def order(self):
        return max((j + k for j, k in self.slots), default=-1)

    @property
    def a0(self):
        return self.slot(0, 0).value()

    def has(self, j, k):
        return (j, k) in self.slots

    def slot(self, j, k):
        try:
            return self.slots[(j, k)]
        except KeyError:
            raise JetOrderError(f"jet slot d_mu^{j} D_eta^{k} not available") from None

    def restricted(self, keep):
        """Copy keeping only slots for which ``keep(j, k)`` is true."""
        return JetAt(self.lam, self.dim, {jk: t for jk, t in self.slots.items() if keep(*jk)})

    def replace(self, j, k, tensor):
        slots = dict(self.slots)
        slots[(j, k)] = tensor
        return JetAt(self.lam, self.dim, slots)

    def zero_slot(self, j, k):
        n = self.dim
        return self.replace(j, k, SymTensor.zeros(n, k, (n, n)))


def jet_at(model, lam, order):
    """Exact jet of ``model`` at (lam, 0) for all j + k <= order."""
    if order > model.max_jet_order:
        raise JetOrderError(f"order {order} exceeds max_jet_order {model.max_jet_order}")
    n = model.dim
    nv = n + 1
    mu = Taylor.variable(nv, order, 0, lam)
    eta = [Taylor.variable(nv, order, i + 1, 0.0) for i in range(n)]
    ent = model._entries(mu, eta)
    ent = [[x if isinstance(x, Taylor) else Taylor.constant(mu.space, x) for x in row] for row in ent]
    slots = {}
    for j in range(order + 1):
        for k in range(order + 1 - j):
            idxs = _multi_indices(n, k)
            vals = np.empty((len(idxs), n, n))
            for r, idx in enumerate(idxs):
                beta = np.bincount(np.asarray(idx, dtype=int), minlength=n) if k else np.zeros(n, int)
                expo = (j,) + tuple(int(b) for b in beta)
                for a in range(n):
                    for c in range(n):
                        vals[r, a, c] = ent[a][c].derivative(expo)
            vals = 0.5 * (vals + np.swapaxes(vals, -1, -2))
            slots[(j, k)] = SymTensor(n, k, vals)
    return JetAt(float(lam), n, slots)


# -- validity ------------------------------------------------------------------

@dataclass(frozen=True)
class ValidityReport:
    kappa_min: float
    psi_bound: float
    symmetric: bool
    witness: tuple
    samples: int


def check_validity(model, mu_range=None, eta_radius=None, samples=512, jet_order=3):
    """Sample a(mu, eta) on the box and report ellipticity and jet bounds.

    Sampling is deterministic (unscrambled Halton points plus eta = 0 on a
    uniform mu grid).  Raises :class:`EllipticityViolation` with a witness
    point when the sampled minimum eigenvalue is not positive.
    """
    lo, hi = mu_range if mu_range is not None else model.mu_range
    r = model.eta_radius if eta_radius is None else eta_radius
    if not hi >= lo or r < 0:
        raise ValueError("empty validity box")
    n = model.dim
    pts = qmc.Halton(d=n + 2, scramble=False).random(samples + 1)[1:]
    mus = lo + (hi - lo) * pts[:, 0]
    radius = r * pts[:, 1] ** (1.0 / n)
    gauss = _normal_ppf(np.clip(pts[:, 2:], 1e-12, 1 - 1e-12))
    if n == 2:
        ang = 2 * np.pi * pts[:, 2]
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        dirs = np.concatenate([gauss, np.zeros((samples, 1))], axis=1)[:, :n]
        dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
    etas = radius[:, None] * dirs
    mu_grid = np.linspace(lo, hi, 33)
    mus = np.concatenate([mu_grid, mus])
    etas = np.concatenate([np.zeros((len(mu_grid), n)), etas])

    a = model.eval_batch(mus, etas)
    a = np.moveaxis(a, -1, 0)
    asym = float(np.max(np.abs(a - np.swapaxes(a, 1, 2))))
    scale = max(1.0, float(np.max(np.abs(a))))
    symmetric = asym <= 1e-13 * scale
    eig = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2)))[:, 0]
    imin = int(np.argmin(eig))
    kappa = float(eig[imin])
    witness = (float(mus[imin]), tuple(float(x) for x in etas[imin]))
    if not np.isfinite(kappa) or kappa <= 0.0:
        raise EllipticityViolation(
            f"ellipticity violated: min eigenvalue {kappa:.6g} at mu={witness[0]:.6g}, "
            f"eta={witness[1]}", witness=witness)

    psi = 0.0
    for mu in np.linspace(lo, hi, 9):
        jet = jet_at(model, mu, min(jet_order, model.max_jet_order))
        psi = max(psi, max(float(np.max(np.abs(t.entries))) for t in jet.slots.values()))
    return ValidityReport(kappa, psi, symmetric, witness, len(mus))


def _normal_ppf(p):
    from scipy.special import ndtri
    return ndtri(p)


# -- Kirchhoff oracle ------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(40)


def _scalar_b(b):
    if isinstance(b, CoefficientModel):
        if not b.is_mu_only:
            raise ValueError("Kirchhoff oracle needs an isotropic coefficient depending on u only")
        expr = b.gammas[0]
        return lambda mu: np.asarray(expr(mu, [0.0 * mu] * b.dim), dtype=float) * np.ones_like(mu)
    if isinstance(b, (str, Expression)):
        expr = parse_expression(b, 2)
        if expr.uses_eta:
            raise ValueError("Kirchhoff oracle needs b = b(mu)")
        return lambda mu: np.asarray(expr(mu, [0.0 * mu, 0.0 * mu]), dtype=float) * np.ones_like(mu)
    return lambda mu: np.asarray(b(mu), dtype=float)


def _antiderivative(bfun, lam, u):
    """B(u) = int_lam^u b(s) ds by 40-point Gauss-Legendre."""
    u = np.asarray(u, dtype=float)
    half = 0.5 * (u - lam)
    s = lam + half[..., None] * (_GL_X + 1.0)
    return half * np.sum(_GL_W * bfun(s), axis=-1)


def _kirchhoff_coeffs(bfun, lam, omega, tau, modes, tol):
    omega = np.asarray(omega, dtype=float)
    th_w = math.atan2(omega[1], omega[0])
    grid = np.linspace(lam - abs(tau), lam + abs(tau), 257)
    if np.any(bfun(grid) <= 0):
        raise ValueError("b must be positive on [lam - |tau|, lam + |tau|]")
    theta = 2 * np.pi * np.arange(modes) / modes
    g = _antiderivative(bfun, lam, lam + tau * np.cos(theta - th_w))
    c = np.fft.rfft(g) / modes
    tail = float(np.max(np.abs(c[3 * len(c) // 4:]))) if len(c) > 4 else np.inf
    if tail > tol:
        raise InsufficientModes(f"Fourier tail {tail:.2e} above tolerance {tol:.1e}; "
                                f"increase fourier_modes")
    return c


def kirchhoff_flux_oracle(b, lam, omega, tau, theta, fourier_modes=512, tol=1e-10):
    """Conormal flux of the unit-disk problem with a = b(u) Id, at boundary angles ``theta``.

    With B' = b the field v = B(u) is harmonic, so the flux b(u) du/dnu equals
    the Dirichlet-to-Neumann image of B(lam + tau cos(theta - theta_omega)).
    """
    bfun = _scalar_b(b)
    c = _kirchhoff_coeffs(bfun, lam, omega, tau, fourier_modes, tol)
    k = np.arange(len(c))
    c = c.copy()
    if fourier_modes % 2 == 0:
        c[-1] = 0.0
    theta = np.asarray(theta, dtype=float)
    phase = np.exp(1j * np.multiply.outer(theta, k[1:]))
    return 2.0 * np.real(phase @ (k[1:] * c[1:]))


def kirchhoff_solution(b, lam, omega, tau, points, fourier_modes=512, tol=1e-10):
    """Exact solution u at interior ``points`` (shape (m, 2)) of the unit-disk problem."""
    bfun = _scalar_b(b)
    c = _kirchhoff_coeffs(bfun, lam, omega, tau, fourier_modes, tol)
    pts = np.asarray(points, dtype=float)
    r = np.hypot(pts[:, 0], pts[:, 1])
    th = np.arctan2(pts[:, 1], pts[:, 0])
    k = np.arange(len(c))
    cc = c.copy()
    if fourier_modes % 2 == 0:
        cc[-1] = 0.0
    v = np.real(cc[0]) + 2.0 * np.real(
        (r[:, None] ** k[None, 1:] * np.exp(1j * th[:, None] * k[None, 1:])) @ cc[1:])
    # invert B by Newton; B is increasing
    u = lam + v / bfun(np.full_like(v, lam))
    for _ in range(50):
        du = (_antiderivative(bfun, lam, u) - v) / bfun(u)
        u = u - du
        if np.max(np.abs(du)) < 1e-15 * (1 + np.max(np.abs(u))):
            break
    return u
