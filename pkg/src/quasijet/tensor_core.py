"""Symmetric matrices and tensors, clustered eigendecomposition, polarization.

Symmetric rank-N tensors over R^n are stored on sorted multi-indices only,
``C(n+N-1, N)`` values.  Each stored value may itself be an array (a "slot"),
which is how matrix-valued derivative tensors such as D_eta^k a(lambda, 0)
are represented.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, NonPolynomialData, SignatureMismatch

__all__ = [
    "sym_matrix",
    "SymTensor",
    "EigenStructure",
    "contract",
    "polarize",
    "polarization_directions",
    "sym_eigendecompose",
    "align_branches",
    "tensor_max_norm",
    "multinomial",
]


def sym_matrix(a):
    """Return ``a`` as a float matrix that is symmetric by construction.

    The upper triangle is authoritative; the lower one is mirrored from it.
    """
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    upper = np.triu(a)
    return upper + np.triu(a, 1).T


@lru_cache(maxsize=None)
def _multi_indices(n, rank):
    return tuple(itertools.combinations_with_replacement(range(n), rank))


@lru_cache(maxsize=None)
def _index_map(n, rank):
    return {idx: i for i, idx in enumerate(_multi_indices(n, rank))}


def multinomial(idx):
    """Number of distinct permutations of the multi-index ``idx``."""
    counts = np.bincount(idx) if len(idx) else np.array([], dtype=int)
    out = math.factorial(len(idx))
    for c in counts:
        out //= math.factorial(int(c))
    return out


@dataclass(frozen=True, eq=False)
class SymTensor:
    """Symmetric rank-``rank`` tensor over R^``dim``.

    ``entries`` has shape ``(C(dim+rank-1, rank), *slot_shape)``; row ``i``
    holds the value at the ``i``-th sorted multi-index.
    """

    dim: int
    rank: int
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        expected = len(_multi_indices(self.dim, self.rank))
        if entries.ndim == 0 or entries.shape[0] != expected:
            raise DimensionMismatch(
                f"rank-{self.rank} symmetric tensor over R^{self.dim} needs "
                f"{expected} entries, got shape {entries.shape}")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def indices(self):
        return _multi_indices(self.dim, self.rank)

    @property
    def slot_shape(self):
        return self.entries.shape[1:]

    @classmethod
    def zeros(cls, dim, rank, slot_shape=()):
        return cls(dim, rank, np.zeros((len(_multi_indices(dim, rank)), *slot_shape)))

    @classmethod
    def scalar(cls, dim, value):
        value = np.asarray(value, dtype=float)
        return cls(dim, 0, value[None, ...])

    @classmethod
    def from_dense(cls, dense, rank=None, check=True, atol=1e-12):
        """Build from a dense array; axes beyond ``rank`` are slot axes.

        ``rank`` defaults to ``dense.ndim`` (scalar slots).
        """
        dense = np.asarray(dense, dtype=float)
        if rank is None:
            rank = dense.ndim
        if rank == 0:
            raise ValueError("use SymTensor.scalar for rank-0 tensors")
        dim = dense.shape[0]
        if dense.shape[:rank] != (dim,) * rank:
            raise DimensionMismatch(f"leading {rank} axes of {dense.shape} are not all equal")
        slot_shape = dense.shape[rank:]
        idxs = _multi_indices(dim, rank)
        entries = np.empty((len(idxs), *slot_shape))
        for i, idx in enumerate(idxs):
            entries[i] = dense[idx]
        out = cls(dim, rank, entries)
        if check and rank >= 2:
            err = float(np.max(np.abs(out.to_dense() - dense)))
            scale = max(1.0, float(np.max(np.abs(dense))))
            if err > atol * scale:
                raise ValueError(f"dense array is not symmetric (defect {err:.3e})")
        return out

    def to_dense(self):
        n, N = self.dim, self.rank
        out = np.empty((n,) * N + self.slot_shape)
        if N == 0:
            return self.entries[0].copy()
        for i, idx in enumerate(self.indices):
            val = self.entries[i]
            for perm in set(itertools.permutations(idx)):
                out[perm] = val
        return out

    def __getitem__(self, idx):
        if isinstance(idx, int):
            idx = (idx,)
        return self.entries[_index_map(self.dim, self.rank)[tuple(sorted(idx))]]

    def __add__(self, other):
        self._check_compatible(other)
        return SymTensor(self.dim, self.rank, self.entries + other.entries)

    def __sub__(self, other):
        self._check_compatible(other)
        return SymTensor(self.dim, self.rank, self.entries - other.entries)

    def __mul__(self, scalar):
        return SymTensor(self.dim, self.rank, self.entries * scalar)

    __rmul__ = __mul__

    def _check_compatible(self, other):
        if (self.dim, self.rank, self.slot_shape) != (other.dim, other.rank, other.slot_shape):
            raise DimensionMismatch("incompatible symmetric tensors")

    def __call__(self, *vectors):
        return contract(self, *vectors)

    def value(self):
        """Scalar (or slot) value of a rank-0 tensor."""
        if self.rank != 0:
            raise ValueError("value() is only defined for rank-0 tensors")
        v = self.entries[0]
        return float(v) if v.ndim == 0 else v.copy()

    def outer_slot(self, matrix):
        """Tensor with scalar entries multiplied by ``matrix`` (new slot axes)."""
        matrix = np.asarray(matrix, dtype=float)
        if self.slot_shape:
            raise ValueError("outer_slot needs a scalar-valued tensor")
        return SymTensor(self.dim, self.rank, self.entries[(...,) + (None,) * matrix.ndim] * matrix)

    def to_dict(self):
        return {
            "dim": self.dim,
            "rank": self.rank,
            "slot_shape": list(self.slot_shape),
            "indices": [list(i) for i in self.indices],
            "entries": self.entries.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["dim"]), int(d["rank"]), np.asarray(d["entries"], dtype=float))


def tensor_max_norm(t):
    """Max over stored sorted multi-indices (and slot entries) of absolute values."""
    return float(np.max(np.abs(t.entries))) if t.entries.size else 0.0


def contract(t, *vectors):
    """Contract the first ``len(vectors)`` slots of ``t`` with ``vectors``.

    Returns a symmetric tensor of rank ``t.rank - len(vectors)``; with ``rank``
    copies of ``v`` the result is the rank-0 tensor Q(v).
    """
    k = len(vectors)
    if k > t.rank:
        raise DimensionMismatch(f"cannot contract rank-{t.rank} tensor with {k} vectors")
    vs = [np.asarray(v, dtype=float) for v in vectors]
    for v in vs:
        if v.shape != (t.dim,):
            raise DimensionMismatch(f"vector of shape {v.shape} does not match dim {t.dim}")
    dense = t.to_dense()
    for v in vs:
        dense = np.tensordot(v, dense, axes=(0, 0))
    rank = t.rank - k
    if rank == 0:
        return SymTensor(t.dim, 0, np.asarray(dense)[None, ...])
    return SymTensor.from_dense(dense, rank=rank, check=False)


def polarization_directions(rank, basis=None, dim=None):
    """Unit directions at which a degree-``rank`` form is evaluated by :func:`polarize`.

    These are all nonzero subset sums of repeated basis vectors, normalized.
    """
    basis = _basis_matrix(basis, dim)
    n = basis.shape[0]
    dirs = {}
    for counts in _count_vectors(n, rank):
        v = basis @ np.asarray(counts, dtype=float)
        u = v / np.linalg.norm(v)
        dirs.setdefault(_dir_key(u), u)
    return list(dirs.values())


def _dir_key(u):
    return tuple(np.round(u, 12) + 0.0)


def _basis_matrix(basis, dim):
    if basis is None:
        if dim is None:
            raise ValueError("either basis or dim is required")
        return np.eye(dim)
    basis = np.asarray(basis, dtype=float)
    if basis.ndim != 2 or basis.shape[0] != basis.shape[1]:
        raise DimensionMismatch("basis must be a square matrix of column vectors")
    return basis


@lru_cache(maxsize=None)
def _count_vectors(n, rank):
    """Nonzero count vectors c with c <= multiplicity of some sorted multi-index."""
    out = set()
    for idx in _multi_indices(n, rank):
        mult = np.bincount(idx, minlength=n)
        for counts in itertools.product(*(range(m + 1) for m in mult)):
            if any(counts):
                out.add(counts)
    return tuple(sorted(out))


def polarize(q, rank, dim, basis=None, check=True, tol=1e-8):
    """Recover the symmetric tensor T with T(xi, ..., xi) = q(xi) on unit vectors.

    Uses the subset-sum identity
    ``T(v_1..v_N) = 1/N! sum_{S} (-1)^{N-|S|} Q(sum_{i in S} v_i)`` with Q
    extended off the sphere by degree-``rank`` homogeneity.  ``basis`` (columns)
    may be any invertible set of vectors; the result is returned in standard
    coordinates.
    """
    V = _basis_matrix(basis, dim)
    if V.shape[0] != dim:
        raise DimensionMismatch("basis dimension does not match dim")
    if rank == 0:
        return SymTensor.scalar(dim, q(V[:, 0] / np.linalg.norm(V[:, 0])))

    cache = {}

    def qh(counts):
        if counts not in cache:
            v = V @ np.asarray(counts, dtype=float)
            r = np.linalg.norm(v)
            cache[counts] = 0.0 if r == 0.0 else r ** rank * float(q(v / r))
        return cache[counts]

    idxs = _multi_indices(dim, rank)
    in_basis = np.empty(len(idxs))
    for i, idx in enumerate(idxs):
        mult = np.bincount(idx, minlength=dim)
        total = 0.0
        for counts in itertools.product(*(range(m + 1) for m in mult)):
            size = sum(counts)
            if size == 0:
                continue
            ways = 1
            for c, m in zip(counts, mult):
                ways *= math.comb(int(m), c)
            total += (-1) ** (rank - size) * ways * qh(tuple(counts))
        in_basis[i] = total / math.factorial(rank)

    t = SymTensor(dim, rank, in_basis)
    if basis is not None:
        W = np.linalg.inv(V)
        dense = t.to_dense()
        for _ in range(rank):
            # contract the leading basis axis with W, push result axis to the back
            dense = np.tensordot(dense, W, axes=(0, 0))
        t = SymTensor.from_dense(dense, check=False)

    if check:
        resid, scale = 0.0, 1.0
        for counts in list(cache)[: 4 * dim]:
            v = V @ np.asarray(counts, dtype=float)
            u = v / np.linalg.norm(v)
            qv = float(q(u))
            scale = max(scale, abs(qv))
            resid = max(resid, abs(contract(t, *([u] * rank)).value() - qv))
        for u in _check_directions(dim):
            qv = float(q(u))
            scale = max(scale, abs(qv))
            resid = max(resid, abs(contract(t, *([u] * rank)).value() - qv))
        if resid > tol * scale:
            raise NonPolynomialData(
                f"directional data inconsistent with a degree-{rank} form "
                f"(re-evaluation residual {resid:.3e})")
    return t


def _check_directions(dim):
    # fixed, irrational-looking directions; deterministic
    out = []
    for k in range(2):
        v = np.cos(np.arange(1, dim + 1) * (1.3 + 0.7 * k) + 0.4 * k)
        out.append(v / np.linalg.norm(v))
    return out


@dataclass(frozen=True)
class Branch:
    eigenvalue: float
    multiplicity: int
    vectors: np.ndarray  # columns, shape (n, multiplicity)

    @property
    def projector(self):
        return self.vectors @ self.vectors.T


@dataclass(frozen=True)
class EigenStructure:
    """Eigenvalue branches of a symmetric matrix, increasing, with orthonormal bases."""

    dim: int
    branches: tuple
    cluster_tol: float

    @property
    def signature(self):
        return tuple(b.multiplicity for b in self.branches)

    @property
    def eigenvalues(self):
        return np.array([b.eigenvalue for b in self.branches])

    def projectors(self):
        return [b.projector for b in self.branches]

    def matrix(self):
        """Reassemble sum_i gamma_i sum_j f_ij f_ij^T."""
        out = np.zeros((self.dim, self.dim))
        for b in self.branches:
            out += b.eigenvalue * b.projector
        return out

    def basis(self):
        """All eigenvectors as columns, branch by branch."""
        return np.hstack([b.vectors for b in self.branches])


def sym_eigendecompose(a, cluster_tol=None):
    """Eigendecompose a symmetric matrix, merging eigenvalues closer than ``cluster_tol``.

    Default tolerance is ``1e-6`` times the spectral radius.
    """
    a = sym_matrix(a)
    n = a.shape[0]
    w, v = np.linalg.eigh(a)
    if cluster_tol is None:
        cluster_tol = 1e-6 * max(float(np.max(np.abs(w))), np.finfo(float).tiny)
    if cluster_tol <= 0:
        raise ValueError("cluster_tol must be positive")
    groups = [[0]]
    for i in range(1, n):
        if w[i] - w[groups[-1][-1]] <= cluster_tol:
            groups[-1].append(i)
        else:
            groups.append([i])
    branches = tuple(
        Branch(float(np.mean(w[g])), len(g), v[:, g].copy()) for g in groups)
    return EigenStructure(n, branches, float(cluster_tol))


def align_branches(prev, nxt):
    """Rotate/flip eigenvectors of ``nxt`` inside each branch to best match ``prev``."""
    if prev.dim != nxt.dim or prev.signature != nxt.signature:
        raise SignatureMismatch(
            f"branch signature changed: {prev.signature} -> {nxt.signature}")
    out = []
    for bp, bn in zip(prev.branches, nxt.branches):
        overlap = bp.vectors.T @ bn.vectors
        u, _, vt = np.linalg.svd(overlap)
        rot = vt.T @ u.T
        out.append(Branch(bn.eigenvalue, bn.multiplicity, bn.vectors @ rot))
    return EigenStructure(nxt.dim, tuple(out), nxt.cluster_tol)
