import numpy as np
import pytest
from hypothesis import given, strategies as st

from quasijet import (EllipticityViolation, InsufficientModes, JetOrderError, ModelRangeError,
                      check_validity, eigenform, gradient_only, isotropic, jet_at,
                      kirchhoff_flux_oracle, kirchhoff_solution, model_from_config, separable)
from quasijet.tensor_core import _multi_indices

from conftest import rotation


def test_eigenform_matches_rotation_formula():
    m = eigenform(["1", "2+eta1**2"], ["0.3"])
    R = rotation(0.3)
    for eta in ([0.0, 0.0], [0.4, -0.2]):
        ref = R @ np.diag([1.0, 2.0 + eta[0] ** 2]) @ R.T
        assert np.max(np.abs(m.eval(0.1, np.array(eta)) - ref)) < 1e-15


def test_separable_requires_unit_gamma_at_zero_gradient():
    with pytest.raises(ValueError):
        separable([["2", "0"], ["0", "3"]], "2+eta1")
    with pytest.raises(ValueError):
        separable([["2+eta1", "0"], ["0", "3"]])


def test_gradient_only_rejects_mu():
    with pytest.raises(ValueError):
        gradient_only("1+mu")


def test_eigenform_shape_checks():
    with pytest.raises(ValueError):
        eigenform(["1"], ["0.3"])
    with pytest.raises(ValueError):
        eigenform(["1", "2"], ["0.3", "0.1"])
    with pytest.raises(ValueError):
        eigenform(["1", "2"], ["eta1"])


def test_range_error_outside_box():
    m = isotropic("exp(mu)", mu_range=(-1, 1))
    with pytest.raises(ModelRangeError):
        m.eval(1.5, np.zeros(2))
    with pytest.raises(ModelRangeError):
        m.eval(0.0, np.array([2.0, 0.0]))


def test_validity_report_and_ellipticity_witness():
    rep = check_validity(isotropic("exp(mu)"))
    assert rep.symmetric
    assert rep.kappa_min == pytest.approx(np.exp(-2.0), rel=1e-12)
    with pytest.raises(EllipticityViolation) as err:
        check_validity(isotropic("mu"))
    assert err.value.witness[0] <= 0.0


@pytest.mark.parametrize("name", ["iso", "grad", "sep", "eig", "rot"])
def test_jets_against_finite_differences(models, name):
    m = models[name]
    lam = 0.2
    jet = jet_at(m, lam, 3)
    assert np.array_equal(jet.a0, m.eval(lam, np.zeros(2)))
    h = 1e-4
    e = np.eye(2)
    # d_mu a
    fd = (m.eval(lam + h, np.zeros(2)) - m.eval(lam - h, np.zeros(2))) / (2 * h)
    assert np.max(np.abs(jet.slot(1, 0).value() - fd)) < 1e-7
    # D_eta a, D_eta^2 a
    for l in range(2):
        fd = (m.eval(lam, h * e[l]) - m.eval(lam, -h * e[l])) / (2 * h)
        assert np.max(np.abs(jet.slot(0, 1)[l] - fd)) < 1e-7
    fd2 = (m.eval(lam, h * (e[0] + e[1])) - m.eval(lam, h * (e[0] - e[1]))
           - m.eval(lam, h * (e[1] - e[0])) + m.eval(lam, -h * (e[0] + e[1]))) / (4 * h * h)
    assert np.max(np.abs(jet.slot(0, 2)[0, 1] - fd2)) < 1e-6
    for t in jet.slots.values():
        assert np.allclose(t.entries, np.swapaxes(t.entries, -1, -2))


def test_jet_order_limit():
    m = isotropic("exp(mu)", max_jet_order=2)
    with pytest.raises(JetOrderError):
        jet_at(m, 0.0, 3)
    with pytest.raises(JetOrderError):
        jet_at(m, 0.0, 2).slot(2, 1)


def test_config_round_trip_and_unknown_keys():
    cfg = {"family": "eigenform", "gammas": ["1", "2+eta1**2"], "angles": ["0.3"],
           "box": {"mu": [-1, 1], "eta_radius": 0.5}}
    m = model_from_config(cfg)
    assert m.mu_range == (-1.0, 1.0)
    assert model_from_config(m.to_config()).model_hash == m.model_hash
    with pytest.raises(ValueError):
        model_from_config(dict(cfg, colour="red"))
    with pytest.raises(ValueError):
        model_from_config({"family": "nonsense"})


def test_batch_derivatives_match_jets(models):
    m = models["eig"]
    a, dmu, deta = m.eval_batch(np.array([0.1, 0.2]), np.zeros((2, 2)), derivatives=True)
    jet = jet_at(m, 0.2, 1)
    assert np.allclose(a[..., 1], jet.a0, atol=1e-15)
    assert np.allclose(dmu[..., 1], jet.slot(1, 0).value(), atol=1e-14)
    for l in range(2):
        assert np.allclose(deta[:, :, l, 1], jet.slot(0, 1)[l], atol=1e-14)


def test_kirchhoff_constant_coefficient_is_linear_flux():
    th = np.linspace(0, 2 * np.pi, 17)
    f = kirchhoff_flux_oracle("1", 0.0, [np.cos(0.4), np.sin(0.4)], 0.3, th)
    assert np.max(np.abs(f - 0.3 * np.cos(th - 0.4))) < 1e-13


def test_kirchhoff_mode_count_independent():
    th = np.linspace(0, 2 * np.pi, 9)
    a = kirchhoff_flux_oracle("exp(mu)", 0.1, [1.0, 0.0], 0.5, th, fourier_modes=512)
    b = kirchhoff_flux_oracle("exp(mu)", 0.1, [1.0, 0.0], 0.5, th, fourier_modes=2048)
    assert np.max(np.abs(a - b)) < 1e-12
    with pytest.raises(InsufficientModes):
        kirchhoff_flux_oracle("exp(mu)", 0.0, [1.0, 0.0], 0.5, th, fourier_modes=8)


def test_kirchhoff_solution_boundary_values():
    th = np.linspace(0, 2 * np.pi, 7, endpoint=False)
    pts = np.stack([np.cos(th), np.sin(th)], axis=1)
    u = kirchhoff_solution("exp(mu)", 0.0, [1.0, 0.0], 0.4, pts)
    assert np.max(np.abs(u - 0.4 * pts[:, 0])) < 1e-12


@given(st.floats(-1.5, 1.5), st.floats(0, 2 * np.pi), st.floats(0, 0.9))
def test_models_symmetric_positive(mu, ang, r):
    eta = r * np.array([np.cos(ang), np.sin(ang)])
    for m in (isotropic("exp(mu)*(1+0.3*eta1)"), eigenform(["1+0.2*mu", "2+eta1**2"], ["mu"]),
              separable([["2+sin(mu)", "0.5"], ["0.5", "3"]], "1+etasq")):
        a = m.eval(mu, eta)
        assert np.array_equal(a, a.T)
        assert np.linalg.eigvalsh(a)[0] > 0
