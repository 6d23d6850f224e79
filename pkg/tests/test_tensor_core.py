import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from quasijet import (DimensionMismatch, NonPolynomialData, SignatureMismatch, SymTensor,
                      align_branches, contract, multinomial, polarization_directions, polarize,
                      sym_eigendecompose, sym_matrix, tensor_max_norm)
from quasijet.tensor_core import _multi_indices

finite = st.floats(-3, 3, allow_nan=False)


def random_sym(rng, dim, rank):
    return SymTensor(dim, rank, rng.normal(size=len(_multi_indices(dim, rank))))


def test_entry_count_and_multinomial():
    assert len(_multi_indices(2, 3)) == 4
    assert len(_multi_indices(3, 2)) == 6
    assert multinomial((0, 0, 1)) == 3
    assert multinomial((0, 1, 2)) == 6


def test_dense_round_trip_and_symmetry_check():
    rng = np.random.default_rng(1)
    t = random_sym(rng, 3, 3)
    d = t.to_dense()
    assert np.allclose(d, d.transpose(1, 0, 2)) and np.allclose(d, d.transpose(2, 1, 0))
    assert np.array_equal(SymTensor.from_dense(d).entries, t.entries)
    bad = d.copy()
    bad[0, 1, 2] += 1.0
    with pytest.raises(ValueError):
        SymTensor.from_dense(bad)


def test_wrong_entry_count():
    with pytest.raises(DimensionMismatch):
        SymTensor(2, 2, np.zeros(4))


def test_contract_matches_dense():
    rng = np.random.default_rng(2)
    t = random_sym(rng, 2, 3)
    u, v, w = rng.normal(size=(3, 2))
    ref = np.einsum("ijk,i,j,k", t.to_dense(), u, v, w)
    assert contract(t, u, v, w).value() == pytest.approx(ref, rel=1e-13)
    assert t(u, v, w).value() == pytest.approx(ref, rel=1e-13)


def test_sym_matrix_mirrors_upper_triangle():
    assert np.array_equal(sym_matrix([[1.0, 2.0], [0.0, 1.0]]), [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(DimensionMismatch):
        sym_matrix(np.zeros((2, 3)))


def test_dict_round_trip_is_exact():
    t = random_sym(np.random.default_rng(3), 2, 4)
    assert np.array_equal(SymTensor.from_dict(t.to_dict()).entries, t.entries)


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_polarization_round_trip(rank, seed):
    rng = np.random.default_rng(seed)
    t = random_sym(rng, 2, rank)
    q = lambda u: contract(t, *([u] * rank)).value()
    back = polarize(q, rank, 2)
    assert np.max(np.abs(back.entries - t.entries)) <= 1e-10 * max(1.0, tensor_max_norm(t))


@given(st.integers(1, 3), st.floats(0, 2 * np.pi), st.integers(0, 10_000))
def test_polarization_in_rotated_and_skewed_frames(rank, angle, seed):
    rng = np.random.default_rng(seed)
    t = random_sym(rng, 2, rank)
    q = lambda u: contract(t, *([u] * rank)).value()
    c, s = np.cos(angle), np.sin(angle)
    frame = np.array([[c, -s], [s, c]])
    skew = frame @ np.array([[1.0, 0.4], [0.0, 1.0]])
    for V in (frame, skew):
        back = polarize(q, rank, 2, basis=V)
        assert np.max(np.abs(back.entries - t.entries)) <= 1e-9 * max(1.0, tensor_max_norm(t))


def test_polarization_directions_are_unit():
    for u in polarization_directions(3, dim=3):
        assert np.linalg.norm(u) == pytest.approx(1.0)


def test_nonpolynomial_data_detected():
    with pytest.raises(NonPolynomialData):
        polarize(lambda u: abs(u[0]) ** 3 + u[1] ** 4, 2, 2)


@given(arrays(float, (2, 2), elements=finite), st.floats(0.1, 5.0))
def test_eigendecomposition_reconstructs(m, shift):
    a = m + m.T + shift * np.eye(2) * 10
    e = sym_eigendecompose(a)
    assert np.max(np.abs(e.matrix() - a)) <= 1e-10 * max(1.0, np.max(np.abs(a)))
    assert sum(e.signature) == 2
    for P in e.projectors():
        assert np.allclose(P @ P, P, atol=1e-12)


def test_clustering_merges_double_eigenvalue():
    R = np.array([[0.6, -0.8], [0.8, 0.6]])
    a = R @ np.diag([2.0, 2.0 + 1e-9]) @ R.T
    e = sym_eigendecompose(a)
    assert e.signature == (2,)
    assert np.max(np.abs(e.matrix() - a)) < 1e-8


def test_align_branches_removes_sign_flips():
    a = np.array([[2.0, 0.3], [0.3, 1.0]])
    e1 = sym_eigendecompose(a)
    flipped = type(e1)(2, tuple(type(b)(b.eigenvalue, 1, -b.vectors) for b in e1.branches),
                       e1.cluster_tol)
    al = align_branches(e1, flipped)
    for b0, b1 in zip(e1.branches, al.branches):
        assert np.allclose(b0.vectors, b1.vectors)


def test_align_branches_signature_change():
    with pytest.raises(SignatureMismatch):
        align_branches(sym_eigendecompose(np.eye(2)), sym_eigendecompose(np.diag([1.0, 2.0])))
