import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quasijet import (DerivativeTable, MeasurementSet, NoiseAmplificationWarning, StencilError,
                      add_noise, default_delta, estimate_derivatives, fd_weights, isotropic,
                      oracle_derivatives, simulate, stencil_points_needed)


@given(st.integers(1, 5), st.integers(0, 4), st.integers(0, 1000))
def test_fd_weights_exact_on_polynomials(k, extra, seed):
    rng = np.random.default_rng(seed)
    nodes = np.sort(rng.uniform(-2, 2, size=k + 1 + extra))
    if np.min(np.diff(nodes)) < 0.05:
        return
    w = fd_weights(nodes, k)
    coeffs = rng.normal(size=k + 1 + extra)
    vals = np.polyval(coeffs[::-1], nodes)
    import math
    assert w @ vals == pytest.approx(math.factorial(k) * coeffs[k], rel=1e-7, abs=1e-7)


def test_stencil_sizes():
    assert stencil_points_needed(1, 2) == 1
    assert stencil_points_needed(2, 2) == 1
    assert stencil_points_needed(3, 2) == 2
    assert stencil_points_needed(3, 4) == 3
    with pytest.raises(StencilError):
        stencil_points_needed(1, 3)
    assert default_delta(1e-12, 2, 2) == pytest.approx(1e-3)


def _synthetic(probes, s=4, delta=0.1, coeffs=(0.0, 1.5, -0.7, 0.4, 0.2, -0.3, 0.05)):
    taus = delta * np.concatenate([-np.arange(s, 0, -1), np.arange(1, s + 1)])
    f = np.polyval(np.array(coeffs)[::-1], taus)
    flux = np.broadcast_to(f[None, None, :, None], (2, 1, 2 * s, probes.m)).copy()
    return MeasurementSet(np.array([0.0, 0.5]), np.array([[[1.0, 0.0]], [[1.0, 0.0]]]), delta, s,
                          probes, flux, provenance={"config_hash": "abc"})


def test_estimates_exact_for_low_degree(probes):
    ms = _synthetic(probes, coeffs=(0.0, 1.5, -0.7, 0.4, 0.2))
    t = estimate_derivatives(ms, 3, p=4)
    assert np.allclose(t.order(1), 1.5, atol=1e-12)
    assert np.allclose(t.order(2), -1.4, atol=1e-11)
    assert np.allclose(t.order(3), 2.4, atol=1e-10)


def test_accuracy_order(probes):
    errs = []
    for d in (0.1, 0.05):
        ms = _synthetic(probes, delta=d)
        errs.append(abs(estimate_derivatives(ms, 2, p=2).order(2)[0, 0, 0] + 1.4))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_richardson_improves(probes):
    ms = _synthetic(probes)
    plain = estimate_derivatives(ms, 1, p=2).order(1)[0, 0, 0]
    rich = estimate_derivatives(ms, 1, p=2, richardson=True).order(1)[0, 0, 0]
    assert abs(rich - 1.5) < abs(plain - 1.5)


def test_short_stencil_rejected(probes):
    ms = _synthetic(probes, s=1)
    with pytest.raises(StencilError):
        estimate_derivatives(ms, 3, p=2)


def test_noise_amplification_warning(probes):
    ms = add_noise(_synthetic(probes, delta=0.01), 1e-2, seed=3)
    with pytest.warns(NoiseAmplificationWarning):
        estimate_derivatives(ms, 3, p=2)


def test_add_noise_is_seeded(probes):
    ms = _synthetic(probes)
    a, b = add_noise(ms, 1e-3, seed=5), add_noise(ms, 1e-3, seed=5)
    assert np.array_equal(a.flux, b.flux)
    assert np.max(np.abs(a.flux - ms.flux)) <= 1e-3
    assert not np.array_equal(a.flux, add_noise(ms, 1e-3, seed=6).flux)


def test_measurement_round_trip_bit_exact(tmp_path, mesh10, probes):
    m = isotropic("exp(mu)")
    ms = simulate(m, mesh10, probes, [0.0, 0.1], np.array([[0.6, 0.8], [1.0, 0.0]]), 0.05, 2)
    ms = add_noise(ms, 1e-4, seed=[1, 2])
    ms.save(tmp_path / "m.json")
    back = MeasurementSet.load(tmp_path / "m.json")
    assert np.array_equal(back.flux, ms.flux)
    assert np.array_equal(back.omegas, ms.omegas)
    assert np.array_equal(back.lam_grid, ms.lam_grid)
    assert back.delta == ms.delta and back.s == ms.s and back.noise == ms.noise
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["version"] and meta["flux_at_tau0"] == 0.0


def test_derivative_table_csv_round_trip(tmp_path, probes):
    t = estimate_derivatives(_synthetic(probes), 3, p=2)
    t.to_csv(tmp_path / "d.csv")
    back = DerivativeTable.from_csv(tmp_path / "d.csv", probes)
    assert np.array_equal(back.d, t.d)
    assert np.array_equal(back.truncation, t.truncation)
    assert (tmp_path / "d.csv").read_text().startswith("# quasijet")


def test_parallel_simulation_is_identical(mesh10, probes):
    m = isotropic("exp(mu)*(1+0.3*eta1)")
    args = (m, mesh10, probes, [0.0, 0.2], np.array([[1.0, 0.0], [0.0, 1.0]]), 0.05, 2)
    a = simulate(*args, workers=1)
    b = simulate(*args, workers=3)
    assert np.array_equal(a.flux, b.flux)


def test_sign_symmetric_cells_are_shared(mesh10, probes):
    m = isotropic("exp(mu)")
    ms = simulate(m, mesh10, probes, [0.0], np.array([[1.0, 0.0], [-1.0, 0.0]]), 0.05, 1)
    # (omega, tau) and (-omega, -tau) describe the same boundary data
    assert np.array_equal(ms.flux[0, 0, 0], ms.flux[0, 1, 1])


def test_oracle_table_meta(mesh10, probes):
    t = oracle_derivatives(isotropic("exp(mu)"), mesh10, probes, [0.0], np.array([[1.0, 0.0]]), 2)
    assert t.meta["method"] == "cascade-oracle"
    assert np.allclose(t.order(1)[0, 0], probes.normals @ [1.0, 0.0])
