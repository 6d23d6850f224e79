"""Domains, triangular meshes, boundary probes and the probe condition (H)."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import ConditionHViolated, MeshError, ProbeNotOnBoundary

__all__ = [
    "Domain",
    "Mesh",
    "ProbeSet",
    "HMargin",
    "generate_mesh",
    "make_probe_set",
    "probe_set_from_points",
    "single_probe",
    "condition_H_margin",
    "lipschitz_geometry_constant",
    "write_mesh",
    "read_mesh",
    "mesh_quality",
]


@dataclass(frozen=True)
class Domain:
    kind: str = "unit_disk"
    a: float = 1.0
    b: float = 1.0
    r0: float = 0.0

    def __post_init__(self):
        if self.kind not in ("unit_disk", "ellipse", "annulus"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "ellipse" and not (self.a > 0 and self.b > 0):
            raise ValueError("ellipse semi-axes must be positive")
        if self.kind == "annulus" and not 0 < self.r0 < 1:
            raise ValueError("annulus needs 0 < r0 < 1")

    @classmethod
    def unit_disk(cls):
        return cls("unit_disk")

    @classmethod
    def ellipse(cls, a, b):
        return cls("ellipse", float(a), float(b))

    @classmethod
    def annulus(cls, r0):
        return cls("annulus", r0=float(r0))

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "ellipse":
            d.update(a=self.a, b=self.b)
        if self.kind == "annulus":
            d.update(r0=self.r0)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "a", "b", "r0"}
        if unknown:
            raise ValueError(f"unknown domain keys: {sorted(unknown)}")
        return cls(d.get("kind", "unit_disk"), float(d.get("a", 1.0)), float(d.get("b", 1.0)),
                   float(d.get("r0", 0.0)))

    @property
    def semi_axes(self):
        return (self.a, self.b) if self.kind == "ellipse" else (1.0, 1.0)

    @property
    def diameter(self):
        return 2.0 * max(self.semi_axes)

    def point(self, theta):
        """Outer boundary point at parameter ``theta`` (counterclockwise)."""
        a, b = self.semi_axes
        theta = np.asarray(theta, dtype=float)
        return np.stack([a * np.cos(theta), b * np.sin(theta)], axis=-1)

    def normal(self, theta):
        """Outward unit normal on the outer boundary at parameter ``theta``."""
        a, b = self.semi_axes
        theta = np.asarray(theta, dtype=float)
        v = np.stack([b * np.cos(theta), a * np.sin(theta)], axis=-1)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def parameter_of(self, x):
        a, b = self.semi_axes
        x = np.asarray(x, dtype=float)
        return np.arctan2(x[..., 1] / b, x[..., 0] / a)

    def level(self, x):
        """Outer boundary level function, 1 on the outer boundary."""
        a, b = self.semi_axes
        x = np.asarray(x, dtype=float)
        return np.sqrt((x[..., 0] / a) ** 2 + (x[..., 1] / b) ** 2)

    def normal_at(self, x):
        """Analytic outward normal at boundary points ``x`` (inner circle included)."""
        x = np.asarray(x, dtype=float)
        a, b = self.semi_axes
        v = np.stack([x[..., 0] / a ** 2, x[..., 1] / b ** 2], axis=-1)
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        if self.kind == "annulus":
            inner = np.linalg.norm(x, axis=-1) < 0.5 * (1.0 + self.r0)
            v = np.where(inner[..., None], -v, v)
        return v

    def on_outer_boundary(self, x, tol):
        return np.abs(self.level(x) - 1.0) <= tol

    def support_parameter(self, e):
        """Parameter of the outer boundary point whose normal equals unit vector ``e``."""
        a, b = self.semi_axes
        return math.atan2(a * e[1], b * e[0])


# -- meshes ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    domain: Domain = field(default_factory=Domain)
    h_target: float = float("nan")

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2 or t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("vertices must be (N, 2) and triangles (T, 3)")
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        cross = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
        flip = cross < 0
        if np.any(flip):
            t = t.copy()
            t[flip, 1], t[flip, 2] = t[flip, 2].copy(), t[flip, 1].copy()
        if np.any(np.abs(cross) <= 0):
            raise MeshError("degenerate triangle")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def areas(self):
        p = self.vertices[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def grads(self):
        """Gradients of the three P1 basis functions per triangle, shape (T, 3, 2)."""
        p = self.vertices[self.triangles]
        g = np.empty((self.n_triangles, 3, 2))
        for k in range(3):
            a, b = p[:, (k + 1) % 3], p[:, (k + 2) % 3]
            # rotate the opposite edge b - a by -90 degrees
            g[:, k, 0] = a[:, 1] - b[:, 1]
            g[:, k, 1] = b[:, 0] - a[:, 0]
        return g / (2.0 * self.areas)[:, None, None]

    @cached_property
    def _edges(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(e, axis=1)
        uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        return e, uniq, inv, counts

    @cached_property
    def boundary_edges(self):
        """Boundary edges oriented counterclockwise with respect to the interior."""
        e, uniq, inv, counts = self._edges
        once = counts[inv] == 1
        return e[once]

    @cached_property
    def boundary_edge_normals(self):
        p = self.vertices[self.boundary_edges]
        d = p[:, 1] - p[:, 0]
        n = np.stack([d[:, 1], -d[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def boundary_edge_lengths(self):
        p = self.vertices[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    @cached_property
    def boundary_vertices(self):
        return np.unique(self.boundary_edges)

    @cached_property
    def boundary_mask(self):
        m = np.zeros(self.n_vertices, dtype=bool)
        m[self.boundary_vertices] = True
        m.setflags(write=False)
        return m

    @cached_property
    def interior_vertices(self):
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def h(self):
        _, uniq, _, _ = self._edges
        return float(np.max(np.linalg.norm(self.vertices[uniq[:, 0]] - self.vertices[uniq[:, 1]], axis=1)))

    @cached_property
    def flux_measure(self):
        """|sum over adjacent boundary edges of nu_e |e| / 2| per vertex (zero inside)."""
        acc = np.zeros((self.n_vertices, 2))
        w = 0.5 * self.boundary_edge_normals * self.boundary_edge_lengths[:, None]
        for k in range(2):
            np.add.at(acc, self.boundary_edges[:, k], w)
        return np.linalg.norm(acc, axis=1)

    @cached_property
    def boundary_mass(self):
        """Lumped boundary mass int phi_j ds per vertex."""
        acc = np.zeros(self.n_vertices)
        for k in range(2):
            np.add.at(acc, self.boundary_edges[:, k], 0.5 * self.boundary_edge_lengths)
        return acc

    @cached_property
    def _outer_tree(self):
        idx = self.boundary_vertices
        return idx, cKDTree(self.vertices[idx])

    def nearest_boundary_vertex(self, point):
        idx, tree = self._outer_tree
        d, k = tree.query(np.asarray(point, dtype=float))
        return int(idx[k]), float(d)

    @cached_property
    def hash(self):
        m = hashlib.sha256()
        m.update(json.dumps(self.domain.to_dict(), sort_keys=True).encode())
        m.update(self.vertices.tobytes())
        m.update(self.triangles.tobytes())
        return m.hexdigest()[:16]


def mesh_quality(mesh):
    """Minimum interior angle in degrees and maximum edge length."""
    p = mesh.vertices[mesh.triangles]
    angles = []
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        c = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
    return float(np.min(angles)), mesh.h


def _ring_points(r, count, phase):
    th = phase + 2 * np.pi * np.arange(count) / count
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _ring_mesh(h, r_inner, phase):
    """Concentric rings between r_inner (0 = centre point) and 1."""
    width = 1.0 - r_inner
    nr = max(1, int(math.ceil(width / (h * math.sqrt(3) / 2))))
    pts = []
    if r_inner == 0:
        pts.append(np.zeros((1, 2)))
    outer_count = 4 * int(math.ceil(2 * np.pi / (4 * h)))
    start = 1 if r_inner == 0 else 0
    for i in range(start, nr + 1):
        r = r_inner + width * i / nr
        if i == nr:
            count, ph = outer_count, phase
        else:
            count = max(6, int(math.ceil(2 * np.pi * r / h)))
            ph = phase + (np.pi / count) * (i % 2)
        pts.append(_ring_points(r, count, ph))
    return np.concatenate(pts), nr


def _delaunay(pts):
    return Delaunay(pts, qhull_options="Qbb Qc Qz Q12").simplices


def _distmesh_ellipse(domain, h, phase, iters=120):
    a, b = domain.semi_axes
    # arclength-uniform boundary nodes
    th = np.linspace(0, 2 * np.pi, 4097)
    xy = domain.point(th + phase)
    s = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    L = s[-1]
    nb = 4 * int(math.ceil(L / (4 * h)))
    th_b = np.interp(np.arange(nb) * L / nb, s, th) + phase
    bnd = domain.point(th_b)
    # hexagonal interior seed, kept away from the boundary
    ys = np.arange(-b, b + h, h * math.sqrt(3) / 2)
    seed = []
    for r, y in enumerate(ys):
        xs = np.arange(-a, a + h, h) + (h / 2) * (r % 2)
        seed.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    seed = np.concatenate(seed)
    seed = seed[domain.level(seed) < 1.0 - 0.45 * h / max(a, b)]
    nb_fixed = len(bnd)
    p = np.concatenate([bnd, seed])
    l0 = 1.2 * h
    for _ in range(iters):
        tri = _delaunay(p)
        cent = p[tri].mean(axis=1)
        tri = tri[domain.level(cent) < 1.0]
        e = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
        e = np.unique(e, axis=0)
        vec = p[e[:, 0]] - p[e[:, 1]]
        ln = np.linalg.norm(vec, axis=1)
        f = np.maximum(l0 - ln, 0.0) / ln
        fv = f[:, None] * vec
        force = np.zeros_like(p)
        np.add.at(force, e[:, 0], fv)
        np.add.at(force, e[:, 1], -fv)
        force[:nb_fixed] = 0.0
        p = p + 0.2 * force
        out = domain.level(p) >= 1.0 - 0.1 * h
        out[:nb_fixed] = False
        if np.any(out):
            p[out] *= ((1.0 - 0.1 * h) / domain.level(p[out]))[:, None]
    tri = _delaunay(p)
    cent = p[tri].mean(axis=1)
    tri = tri[domain.level(cent) < 1.0]
    return p, tri


def generate_mesh(domain=None, h_target=0.1, boundary_phase=0.0):
    """Deterministic quality triangulation of ``domain``.

    Outer boundary vertices are placed at parameters ``boundary_phase + 2 pi k / m``
    with ``m`` a multiple of four, so the support points of the standard
    basis (rotated by ``boundary_phase``) are mesh vertices.
    """
    domain = Domain() if domain is None else domain
    h = float(h_target)
    if not 0 < h <= 0.5:
        raise MeshError(f"h_target must lie in (0, 0.5], got {h_target}")
    # ring and force spacings overshoot the nominal size by up to ~30%
    hs = 0.88 * h
    if domain.kind == "unit_disk":
        pts, _ = _ring_mesh(hs, 0.0, boundary_phase)
        tri = _delaunay(pts)
    elif domain.kind == "annulus":
        if domain.r0 * 2 * np.pi / 6 < 0.3 * h and domain.r0 < h:
            raise MeshError("inner radius too small for the requested h")
        pts, _ = _ring_mesh(hs, domain.r0, boundary_phase)
        tri = _delaunay(pts)
        cent = pts[tri].mean(axis=1)
        tri = tri[np.linalg.norm(cent, axis=1) > domain.r0]
    else:
        pts, tri = _distmesh_ellipse(domain, hs, boundary_phase)
    used = np.unique(tri)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = Mesh(pts[used], remap[tri], domain, h)
    ang, hmax = mesh_quality(mesh)
    if ang < 20.0 or hmax > 1.2 * h:
        raise MeshError(f"mesh quality check failed: min angle {ang:.1f} deg, h {hmax:.4f}")
    return mesh


def write_mesh(mesh, path, comment=None):
    with open(path, "w") as fh:
        fh.write("# quasijet mesh v1\n")
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"domain {json.dumps(mesh.domain.to_dict(), sort_keys=True)}\n")
        fh.write(f"h_target {float(mesh.h_target)!r}\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write(f"triangles {mesh.n_triangles}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    it = iter(lines)
    try:
        key, rest = next(it).split(" ", 1)
        assert key == "domain"
        domain = Domain.from_dict(json.loads(rest))
        key, rest = next(it).split(" ", 1)
        assert key == "h_target"
        h_target = float(rest)
        key, nv = next(it).split()
        assert key == "vertices"
        verts = np.array([[float(s) for s in next(it).split()] for _ in range(int(nv))])
        key, nt = next(it).split()
        assert key == "triangles"
        tris = np.array([[int(s) for s in next(it).split()] for _ in range(int(nt))], dtype=np.int64)
    except (StopIteration, AssertionError, ValueError) as exc:
        raise MeshError(f"malformed mesh file {path}") from exc
    return Mesh(verts.reshape(-1, 2), tris.reshape(-1, 3), domain, h_target)


# -- probes ---------------------------------------------------------------------

def lipschitz_geometry_constant(M, n):
    """C1(M, n) = sqrt(2 (n + 2n / (1/n - M^2)) / (1 - n M^2)); infinite at M >= 1/sqrt(n)."""
    gap = 1.0 - n * M * M
    if M >= 1.0 / math.sqrt(n) or gap <= 0:
        return math.inf
    return math.sqrt(2.0 * (n + 2.0 * n / (1.0 / n - M * M)) / gap)


@dataclass(frozen=True)
class HMargin:
    M: float
    gap: float
    C1: float


@dataclass(frozen=True, eq=False)
class ProbeSet:
    points: np.ndarray
    normals: np.ndarray
    basis: np.ndarray
    margin: float
    mode: str = "full"

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def m(self):
        return len(self.points)

    def to_dict(self):
        return {"points": self.points.tolist(), "normals": self.normals.tolist(),
                "basis": self.basis.tolist(), "margin": self.margin, "mode": self.mode}


def _check_basis(basis, n):
    basis = np.asarray(basis, dtype=float)
    if basis.shape != (n, n):
        raise ValueError(f"basis must be {n} x {n}")
    if np.max(np.abs(basis @ basis.T - np.eye(n))) > 1e-12:
        raise ValueError("probe basis must be orthonormal to 1e-12")
    return basis


def probe_set_from_points(domain, points, basis=None, enforce=True):
    """Probe set at given boundary ``points`` paired with the rows of ``basis``."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[1]
    basis = _check_basis(np.eye(n) if basis is None else basis, n)
    if len(pts) != n:
        raise ValueError("full probe mode needs exactly n points")
    if np.any(np.abs(domain.level(pts) - 1.0) > 1e-9):
        raise ProbeNotOnBoundary("probe points must lie on the outer boundary")
    normals = domain.normal_at(pts)
    M = float(np.max(np.linalg.norm(normals - basis, axis=1)))
    if enforce and M >= 1.0 / math.sqrt(n):
        raise ConditionHViolated(M, 1.0 / math.sqrt(n))
    return ProbeSet(pts, normals, basis, M)


def make_probe_set(domain=None, basis=None):
    """For each basis vector e'_j pick the boundary point maximizing nu(x) . e'_j."""
    domain = Domain() if domain is None else domain
    n = 2
    basis = _check_basis(np.eye(n) if basis is None else basis, n)
    th = np.array([domain.support_parameter(e) for e in basis])
    return probe_set_from_points(domain, domain.point(th), basis)


def single_probe(domain=None, theta=0.0):
    """One-point probe set at parameter ``theta`` (basis row is the normal there)."""
    domain = Domain() if domain is None else domain
    x = domain.point(np.array([theta]))
    nu = domain.normal(np.array([theta]))
    return ProbeSet(x, nu, nu.copy(), 0.0, mode="single")


def condition_H_margin(probes):
    n = probes.dim
    M = probes.margin
    return HMargin(M, 1.0 - n * M * M, lipschitz_geometry_constant(M, n))
