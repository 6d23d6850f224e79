import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quasijet import (ConditionHViolated, Domain, MeshError, ProbeNotOnBoundary,
                      condition_H_margin, generate_mesh, lipschitz_geometry_constant,
                      make_probe_set, mesh_quality, probe_set_from_points, read_mesh,
                      single_probe, write_mesh)

from conftest import rotation


def test_disk_mesh_quality(mesh10):
    min_angle, _ = mesh_quality(mesh10)
    assert min_angle >= 20.0
    assert mesh10.h <= 1.2 * mesh10.h_target
    assert np.all(mesh10.areas > 0)


def test_boundary_vertices_on_circle(mesh10):
    b = mesh10.vertices[mesh10.boundary_vertices]
    assert np.max(np.abs(np.hypot(b[:, 0], b[:, 1]) - 1.0)) < 1e-14


def test_boundary_phase_places_vertex():
    mesh = generate_mesh(Domain(), 0.1, boundary_phase=0.7)
    j, d = mesh.nearest_boundary_vertex(np.array([math.cos(0.7), math.sin(0.7)]))
    assert d < 1e-14


def test_mesh_is_deterministic():
    a, b = generate_mesh(Domain(), 0.15), generate_mesh(Domain(), 0.15)
    assert a.hash == b.hash and np.array_equal(a.vertices, b.vertices)


@pytest.mark.parametrize("domain", [Domain.ellipse(1.3, 0.8), Domain.annulus(0.4)])
def test_other_domains(domain):
    mesh = generate_mesh(domain, 0.12)
    assert mesh_quality(mesh)[0] >= 20.0
    assert np.all(mesh.areas > 0)
    assert abs(mesh.areas.sum() - _area(domain)) < 0.02 * _area(domain)


def _area(d):
    if d.kind == "ellipse":
        return math.pi * d.a * d.b
    return math.pi * (1 - d.r0 ** 2)


def test_bad_h_rejected():
    with pytest.raises(MeshError):
        generate_mesh(Domain(), 0.0)


def test_write_read_round_trip(tmp_path, mesh10):
    p = tmp_path / "m.txt"
    write_mesh(mesh10, p, comment="test")
    back = read_mesh(p)
    assert np.array_equal(back.vertices, mesh10.vertices)
    assert np.array_equal(back.triangles, mesh10.triangles)
    assert back.hash == mesh10.hash


def test_flux_measure_sums_to_perimeter(mesh10):
    b = mesh10.boundary_vertices
    assert mesh10.flux_measure[b].sum() == pytest.approx(mesh10.boundary_edge_lengths.sum(),
                                                         rel=1e-3)


def test_geometry_constant_at_zero_margin():
    assert lipschitz_geometry_constant(0.0, 2) == pytest.approx(math.sqrt(20), rel=1e-15)
    assert lipschitz_geometry_constant(1 / math.sqrt(2), 2) == math.inf


def test_standard_disk_probes_have_zero_margin(probes):
    hm = condition_H_margin(probes)
    assert hm.M < 1e-15
    assert hm.C1 == pytest.approx(4.47213595499958)


@given(st.floats(0, 2 * math.pi))
def test_rotated_basis_gives_rotated_probes(angle):
    R = rotation(angle)
    ps = make_probe_set(basis=R.T)
    assert ps.margin < 1e-12
    assert np.allclose(ps.points, R.T, atol=1e-12)


def test_ellipse_support_points_have_zero_margin():
    ps = make_probe_set(Domain.ellipse(1.5, 0.7))
    assert ps.margin < 1e-12


def test_condition_H_rejects_clustered_probes():
    th = np.array([0.0, 0.2])
    pts = np.stack([np.cos(th), np.sin(th)], axis=1)
    with pytest.raises(ConditionHViolated) as err:
        probe_set_from_points(Domain(), pts)
    msg = str(err.value)
    assert "M =" in msg and "1/sqrt(n)" in msg
    th = np.array([-math.pi / 4 - 0.01, math.pi / 2])
    pts = np.stack([np.cos(th), np.sin(th)], axis=1)
    with pytest.raises(ConditionHViolated):
        probe_set_from_points(Domain(), pts)


def test_probe_must_lie_on_boundary():
    with pytest.raises(ProbeNotOnBoundary):
        probe_set_from_points(Domain(), np.array([[0.9, 0.0], [0.0, 1.0]]))


def test_single_probe_normal():
    p = single_probe(theta=1.1)
    assert np.allclose(p.normals[0], [math.cos(1.1), math.sin(1.1)])
    assert p.mode == "single"
