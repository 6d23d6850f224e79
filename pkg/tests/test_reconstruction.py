import numpy as np
import pytest

from quasijet import (ConditionHViolated, Domain, InconsistentData, JetTable, OracleSource,
                      PerturbedSource, SignatureMismatch, TableSource, branch_tensors_from_jet,
                      design_basis, eigenform, generate_mesh, isotropic, jet_at, lambda_derivative,
                      oracle_derivatives, probe_set_from_points, recover_isotropic_onepoint,
                      recover_jet, recover_order0, single_probe, sym_eigendecompose)
from quasijet.errors import ProjectionDegenerate

LAM = np.round(np.arange(-0.2, 0.2001, 0.05), 12)


def jet_errors(jt, model):
    errs = {}
    for i, lam in enumerate(jt.lam_grid):
        jet = jet_at(model, lam, jt.N_max)
        errs[0] = max(errs.get(0, 0.0), np.max(np.abs(jt.A0[i] - jet.a0)))
        for N in range(1, jt.N_max + 1):
            truth = branch_tensors_from_jet(jet, N, jt.eig[i])
            e = max(np.max(np.abs(a.entries - b.entries)) for a, b in zip(truth, jt.tensors[N][i]))
            errs[N] = max(errs.get(N, 0.0), e)
    return errs


@pytest.mark.parametrize("name", ["iso", "grad", "sep", "eig", "rot"])
def test_exact_data_recovers_jet(mesh10, probes, models, name):
    jt = recover_jet(OracleSource(models[name], mesh10), probes, LAM, 2, mesh=mesh10)
    errs = jet_errors(jt, models[name])
    assert errs[0] < 1e-10
    assert errs[1] < 1e-8 and errs[2] < 1e-8


def test_matrix_slot_reassembles_model_derivative(mesh10, probes, models):
    m = models["iso"]
    jt = recover_jet(OracleSource(m, mesh10), probes, LAM, 1, mesh=mesh10)
    for i, lam in enumerate(LAM):
        ref = jet_at(m, lam, 1).slot(0, 1).entries
        assert np.max(np.abs(jt.a_eta(1, i).entries - ref)) < 1e-9


def test_separable_explicit_first_order(mesh10, probes, models):
    m = models["sep"]
    jt = recover_jet(OracleSource(m, mesh10), probes, LAM, 1, mode="separable_explicit",
                     mesh=mesh10)
    for i, lam in enumerate(LAM):
        # gamma = 1 + 0.5 eta1 + |eta|^2 has D_eta gamma(lam, 0) = (0.5, 0)
        assert np.max(np.abs(jt.gamma[1][i].entries - [0.5, 0.0])) < 5e-3


def test_order0_exact_and_gate(probes):
    A = np.array([[2.0, 0.4], [0.4, 1.5]])
    d1 = np.array([[probes.normals @ (A @ w)] for w in probes.basis])[:, 0]
    rec, res = recover_order0(d1, probes, probes.basis)
    assert np.max(np.abs(rec - A)) < 1e-14 and res < 1e-14
    with pytest.raises(InconsistentData):
        recover_order0(d1, probes, np.array([[1.0, 0.0], [1.0, 0.0]]))
    bad = probe_set_from_points(Domain(), np.array([[1.0, 0.0], [np.cos(0.2), np.sin(0.2)]]),
                                enforce=False)
    with pytest.raises(ConditionHViolated):
        recover_order0(d1, bad, probes.basis)


def test_order0_noise_is_bounded(probes):
    rng = np.random.default_rng(0)
    A = np.array([[2.0, 0.4], [0.4, 1.5]])
    d1 = np.array([probes.normals @ (A @ w) for w in probes.basis])
    eps = 1e-3
    rec, _ = recover_order0(d1 + rng.uniform(-eps, eps, d1.shape), probes, probes.basis)
    assert np.max(np.abs(rec - A)) <= np.sqrt(20) * eps


def test_one_point_noise_factor_is_one():
    p = single_probe(theta=0.7)
    nu = p.normals[0]
    for e in (-1e-3, 0.0, 2e-4):
        assert recover_isotropic_onepoint(1.7 + e, p, nu) - 1.7 == pytest.approx(e, abs=1e-15)
    with pytest.raises(InconsistentData):
        recover_isotropic_onepoint(1.7, p, np.array([1.0, 0.0]))


def test_one_point_mode_matches_full_probes(probes):
    mesh = generate_mesh(Domain(), 0.1, boundary_phase=0.7)
    m = isotropic("exp(mu)*(1+0.3*eta1+eta2**2)")
    one = recover_jet(OracleSource(m, mesh), single_probe(theta=0.7), LAM, 2,
                      mode="isotropic_onepoint", mesh=mesh)
    full = recover_jet(OracleSource(m, mesh), probes, LAM, 2, mesh=mesh)
    assert np.max(np.abs(one.A0 - full.A0)) < 1e-12
    for N in (1, 2):
        for i in range(len(LAM)):
            assert np.max(np.abs(one.tensors[N][i][0].entries -
                                 full.tensors[N][i][0].entries)) < 1e-3


def test_signature_change_detected(mesh10, probes):
    m = eigenform(["1+0.5*mu", "1.2"], ["0.3"])
    with pytest.raises(SignatureMismatch):
        recover_jet(OracleSource(m, mesh10), probes, np.round(np.arange(0, 0.81, 0.1), 12), 0)


def test_table_source_matches_oracle(mesh10, probes, models):
    m = models["eig"]
    src = OracleSource(m, mesh10)
    a = recover_jet(src, probes, LAM, 1, mesh=mesh10)
    om = np.concatenate([np.broadcast_to(probes.basis, (len(LAM), 2, 2)),
                         np.array([a.eig[i].basis().T for i in range(len(LAM))]),
                         np.array([_dirs(a, i) for i in range(len(LAM))])], axis=1)
    table = oracle_derivatives(m, mesh10, probes, LAM, om, 2)
    b = recover_jet(TableSource(table), probes, LAM, 1, mesh=mesh10)
    assert np.max(np.abs(a.A0 - b.A0)) == 0.0
    for i in range(len(LAM)):
        for x, y in zip(a.tensors[1][i], b.tensors[1][i]):
            assert np.max(np.abs(x.entries - y.entries)) < 1e-12


def _dirs(jt, i):
    eig = jt.eig[i]
    V, dirs, _ = design_basis(eig.basis(), [(b.projector, b.vectors[:, 0]) for b in eig.branches],
                              1, 0.2)
    return np.array(dirs)


def test_noisy_derivatives_degrade_gracefully(mesh10, probes):
    m = isotropic("1+eta1")
    grid = 0.2 * np.arange(-2, 3)
    jt = recover_jet(PerturbedSource(OracleSource(m, mesh10), 1e-3, seed=1), probes, grid, 1,
                     mesh=mesh10)
    assert jet_errors(jt, m)[1] < 0.05


def test_design_basis_degenerate():
    e = sym_eigendecompose(np.diag([1.0, 2.0]))
    proj = [(b.projector, b.vectors[:, 0]) for b in e.branches]
    V, dirs, t = design_basis(e.basis(), proj, 2, 0.2)
    assert t < 1.0
    for P, _ in proj:
        assert min(np.linalg.norm(P @ d) for d in dirs) >= 0.2
    with pytest.raises(ProjectionDegenerate):
        design_basis(e.basis(), proj, 2, 0.9)


def test_lambda_derivative_accuracy():
    grid = np.linspace(-0.5, 0.5, 21)
    vals = np.sin(grid)
    for i in (0, 10, 20):
        assert lambda_derivative(vals, grid, i, 1, 8) == pytest.approx(np.cos(grid[i]), abs=1e-10)
        assert lambda_derivative(vals, grid, i, 2, 8) == pytest.approx(-np.sin(grid[i]), abs=1e-8)


def test_jet_table_round_trip(tmp_path, mesh10, probes, models):
    jt = recover_jet(OracleSource(models["eig"], mesh10), probes, LAM, 2, mesh=mesh10)
    jt.save(tmp_path / "jet.json")
    import json
    back = JetTable.from_dict(json.loads((tmp_path / "jet.json").read_text()))
    assert np.array_equal(back.A0, jt.A0)
    for N in (1, 2):
        for i in range(len(LAM)):
            for x, y in zip(back.tensors[N][i], jt.tensors[N][i]):
                assert np.array_equal(x.entries, y.entries)


def test_mesh_required_beyond_order_zero(probes, models):
    with pytest.raises(ValueError):
        recover_jet(OracleSource(models["iso"], None), probes, LAM, 1)
