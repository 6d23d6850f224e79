"""The nine acceptance criteria at their stated tolerances.

Each test records a one-line verdict that is printed in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from quasijet import (ConditionHViolated, Domain, MeasurementSet, OracleSource, PerturbedSource,
                      SimulationSource, SymTensor, add_noise, boundary_fluxes, branch_tensors_from_jet,
                      condition_H_margin, contract, eigenform, estimate_derivatives,
                      generate_mesh, gradient_only, holder_experiment, isotropic, jet_at,
                      kirchhoff_flux_oracle, lipschitz_experiment, make_probe_set, polarize,
                      probe_set_from_points, probe_vertices, recover_jet, recover_order0,
                      separable, simulate, single_probe, solve_quasilinear, sym_eigendecompose)
from quasijet.tensor_core import _multi_indices

OMEGA8 = np.array([[math.cos(2 * math.pi * k / 8), math.sin(2 * math.pi * k / 8)] for k in range(8)])
DEFAULT_LAM = np.round(np.arange(-0.3, 0.3001, 0.05), 12)


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    return ok


def eigen_model():
    return eigenform(["1", "2+eta1**2"], ["0.3"])


def jet_error(jt, model):
    out = {}
    for i, lam in enumerate(jt.lam_grid):
        jet = jet_at(model, lam, jt.N_max)
        out[0] = max(out.get(0, 0.0), float(np.max(np.abs(jt.A0[i] - jet.a0))))
        for N in range(1, jt.N_max + 1):
            truth = branch_tensors_from_jet(jet, N, jt.eig[i])
            e = max(float(np.max(np.abs(a.entries - b.entries)))
                    for a, b in zip(truth, jt.tensors[N][i]))
            out[N] = max(out.get(N, 0.0), e)
    return out


@pytest.fixture(scope="module")
def fine_mesh():
    return generate_mesh(Domain(), 0.02)


@pytest.fixture(scope="module")
def fine_d1(fine_mesh, probes):
    """FD first derivatives at h = 0.02, delta = 1e-2 for the three criterion-1 models."""
    t0 = time.perf_counter()
    models = {"identity": isotropic("1"), "exp": isotropic("exp(mu)"), "eigen": eigen_model()}
    tables = {}
    for name, m in models.items():
        ms = simulate(m, fine_mesh, probes, [-1.0, 0.0, 1.0], OMEGA8, 1e-2, 1, workers=4)
        tables[name] = (m, estimate_derivatives(ms, 1, p=2).order(1))
    return tables, time.perf_counter() - t0


def test_1_first_order_flux(fine_d1, probes):
    tables, runtime = fine_d1
    worst = 0.0
    for m, d1 in tables.values():
        for i, lam in enumerate([-1.0, 0.0, 1.0]):
            a0 = jet_at(m, lam, 0).a0
            exact = OMEGA8 @ a0 @ probes.normals.T
            worst = max(worst, float(np.max(np.abs(d1[i] - exact))) / np.linalg.norm(a0, 2))
    ok = worst < 1e-3 and runtime < 300
    record(1, ok, f"max relative d1 error {worst:.2e} (< 1e-3), runtime {runtime:.1f}s (< 300s)")
    assert ok


def test_2_affine_exactness(mesh10, probes):
    m = gradient_only("1+etasq")
    om = np.array([0.6, 0.8])
    x = mesh10.vertices
    b = mesh10.boundary_vertices
    nodal = flux = 0.0
    for tau in (0.1, 0.2, 0.3):
        sol = solve_quasilinear(m, mesh10, 0.0, om, tau)
        nodal = max(nodal, float(np.max(np.abs(sol.values - tau * x @ om))))
        f = boundary_fluxes(sol, m)[b]
        flux = max(flux, float(np.max(np.abs(f - (1 + tau ** 2) * tau * x[b] @ om))))
    ms = simulate(m, mesh10, probes, [0.0], om[None, :], 0.1, 2)
    d3 = estimate_derivatives(ms, 3, p=2).order(3)[0, 0]
    e3 = float(np.max(np.abs(d3 - 6 * probes.normals @ om)))
    ok = nodal < 1e-10 and flux < 1e-9 and e3 < 1e-6
    record(2, ok, f"nodal {nodal:.1e} (< 1e-10), flux {flux:.1e} (< 1e-9), d3 {e3:.1e} (< 1e-6)")
    assert ok


def test_3_kirchhoff_convergence(fine_mesh):
    m = isotropic("exp(mu)")
    om, tau = np.array([1.0, 0.0]), 0.5
    hs, errs = [], []
    for mesh in (generate_mesh(Domain(), 0.08), generate_mesh(Domain(), 0.04), fine_mesh):
        sol = solve_quasilinear(m, mesh, 0.0, om, tau)
        b = mesh.boundary_vertices
        th = np.arctan2(mesh.vertices[b, 1], mesh.vertices[b, 0])
        ref = kirchhoff_flux_oracle(m, 0.0, om, tau, th)
        errs.append(float(np.max(np.abs(boundary_fluxes(sol, m)[b] - ref))))
        hs.append(mesh.h)
    eoc = [math.log(errs[i] / errs[i + 1]) / math.log(hs[i] / hs[i + 1]) for i in range(2)]
    ok = errs[0] > errs[1] > errs[2] and min(eoc) >= 1.0
    record(3, ok, "errors " + ", ".join(f"{e:.2e}" for e in errs) +
           " EOC " + ", ".join(f"{e:.2f}" for e in eoc) + " (>= 1, monotone)")
    assert ok


def test_4_order0(fine_d1, fine_mesh, probes):
    tables, _ = fine_d1
    m, d1 = tables["eigen"]
    rows = [int(np.argmax(OMEGA8 @ e)) for e in probes.basis]
    fd_err = exact_err = 0.0
    for i, lam in enumerate([-1.0, 0.0, 1.0]):
        a0 = jet_at(m, lam, 0).a0
        A, _ = recover_order0(d1[i][rows], probes, probes.basis)
        fd_err = max(fd_err, float(np.max(np.abs(A - a0))))
        exact = np.array([probes.normals @ (a0 @ w) for w in probes.basis])
        A, _ = recover_order0(exact, probes, probes.basis)
        exact_err = max(exact_err, float(np.max(np.abs(A - a0))))
    ok = fd_err < 1e-3 and exact_err < 1e-10
    record(4, ok, f"FD {fd_err:.1e} (< 1e-3), exact {exact_err:.1e} (< 1e-10)")
    assert ok


def test_5_higher_order(mesh10, probes, models):
    exact, fd = {}, {}
    for name, m in models.items():
        jt = recover_jet(OracleSource(m, mesh10), probes, DEFAULT_LAM, 2, mesh=mesh10)
        e = jet_error(jt, m)
        exact[name] = max(e[1], e[2])
        jt = recover_jet(SimulationSource(m, mesh10, workers=4), probes, DEFAULT_LAM, 2,
                         mesh=mesh10)
        e = jet_error(jt, m)
        fd[name] = max(e[1], e[2])
    ok = max(exact.values()) < 1e-8 and max(fd.values()) < 5e-2
    record(5, ok, f"exact max {max(exact.values()):.1e} (< 1e-8), "
                  f"FD max {max(fd.values()):.1e} (< 5e-2) over {', '.join(models)}")
    assert ok


LIPSCHITZ_PAIRS = [
    ([["2", "0"], ["0", "3"]], "1", [["2.1", "0"], ["0", "3"]], "1"),
    ([["2+sin(mu)", "0"], ["0", "3"]], "1", [["2+sin(mu)", "0.1*cos(mu)"], ["0.1*cos(mu)", "3"]], "1"),
    ([["exp(mu/2)", "0.2"], ["0.2", "2"]], "1+etasq", [["exp(mu/2)+0.05*mu", "0.2"], ["0.2", "2"]], "1"),
    ([["3", "1"], ["1", "2"]], "1", [["3", "1.2"], ["1.2", "2.1"]], "1+0.5*eta1"),
    ([["1+mu**2/8", "0"], ["0", "1.5+0.2*tanh(mu)"]], "1",
     [["1+mu**2/8", "0"], ["0", "1.5+0.25*tanh(mu)"]], "1+eta1*eta2"),
]


def test_6_lipschitz(mesh10, probes):
    lam = np.linspace(-1, 1, 5)
    ratios, consts = [], set()
    ok = True
    for b1, g1, b2, g2 in LIPSCHITZ_PAIRS:
        pair = (separable(b1, g1), separable(b2, g2))
        for data in ("oracle", "pipeline"):
            rep = lipschitz_experiment(pair, probes, lam, mesh=mesh10, data=data,
                                       delta=0.02, s=2, workers=4)
            ratios.append(rep.summary["ratio"])
            consts.add(rep.summary["C1"])
            ok &= rep.passed and rep.summary["ratio"] <= math.sqrt(20)
    ok &= len(consts) == 1
    record(6, ok, f"max ratio {max(ratios):.4f} (<= 4.4721) over 5 pairs, oracle and FD data; "
                  f"C1 = {consts.pop():.4f} for every pair")
    assert ok


def test_7_one_point(probes):
    theta = 0.7
    mesh = generate_mesh(Domain(), 0.1, boundary_phase=theta)
    one_probe = single_probe(theta=theta)
    m = isotropic("exp(mu)*(1+0.3*eta1+eta2**2)")
    one = recover_jet(SimulationSource(m, mesh, workers=4), one_probe, DEFAULT_LAM, 0,
                      mode="isotropic_onepoint")
    full = recover_jet(SimulationSource(m, mesh, workers=4), probes, DEFAULT_LAM, 0)
    agree = float(np.max(np.abs(one.A0[:, 0, 0] - full.A0[:, 0, 0])))
    clean = recover_jet(OracleSource(m, mesh), one_probe, DEFAULT_LAM, 0, mode="isotropic_onepoint")
    eps = 1e-3
    factor = 0.0
    for seed in range(5):
        noisy = recover_jet(PerturbedSource(OracleSource(m, mesh), eps, seed), one_probe,
                            DEFAULT_LAM, 0, mode="isotropic_onepoint")
        factor = max(factor, float(np.max(np.abs(noisy.A0 - clean.A0))) / eps)
    ok = agree < 1e-3 and factor <= 1.0
    record(7, ok, f"one-point vs n-probe {agree:.1e} (< 1e-3), noise factor {factor:.3f} (<= 1)")
    assert ok


def test_8_holder(mesh10, probes):
    rep = holder_experiment(isotropic("1+eta1"), [1e-2, 1e-3, 1e-4], N=1, mesh=mesh10,
                            probes=probes)
    s = rep.summary
    ok = not s["inconclusive"] and 1 / 3 - 0.1 <= s["slope"] <= 1.05
    record(8, ok, f"slope {s['slope']:.3f} in [0.233, 1.05], R^2 {s['r2']:.4f}, "
                  f"floor {s['floor']:.1e}")
    assert ok


def test_9_invariants(mesh10, probes, tmp_path):
    rng = np.random.default_rng(9)
    pol = 0.0
    for n in (2, 3):
        for rank in (1, 2, 3, 4):
            for _ in range(5):
                t = SymTensor(n, rank, rng.normal(size=len(_multi_indices(n, rank))))
                back = polarize(lambda u: contract(t, *([u] * rank)).value(), rank, n)
                pol = max(pol, float(np.max(np.abs(back.entries - t.entries))))
    m = isotropic("exp(mu)*(1+0.3*eta1+eta2**2)")
    b = mesh10.boundary_vertices
    sym = 0.0
    for k in range(4):
        om = np.array([math.cos(k), math.sin(k)])
        f1 = boundary_fluxes(solve_quasilinear(m, mesh10, 0.2, om, 0.3), m)[b]
        f2 = boundary_fluxes(solve_quasilinear(m, mesh10, 0.2, -om, -0.3), m)[b]
        sym = max(sym, float(np.max(np.abs(f1 - f2))))
    accept = condition_H_margin(make_probe_set()).M == pytest.approx(0.0, abs=1e-15)
    reject = 0
    for th in ([0.0, 0.2], [-math.pi / 4 - 1e-3, math.pi / 2], [0.0, math.pi]):
        pts = np.stack([np.cos(th), np.sin(th)], axis=1)
        try:
            probe_set_from_points(Domain(), pts)
        except ConditionHViolated:
            reject += 1
    eig = 0.0
    for _ in range(20):
        a = rng.normal(size=(3, 3))
        a = a + a.T
        eig = max(eig, float(np.max(np.abs(sym_eigendecompose(a).matrix() - a))))
    ms = add_noise(simulate(m, mesh10, probes, [0.0, 0.1], OMEGA8[:3], 0.05, 2), 1e-5, seed=4)
    ms.save(tmp_path / "m.json")
    back = MeasurementSet.load(tmp_path / "m.json")
    exact_io = np.array_equal(back.flux, ms.flux) and np.array_equal(back.omegas, ms.omegas)
    ok = pol < 1e-9 and sym <= 1e-13 and accept and reject == 3 and eig < 1e-10 and exact_io
    record(9, ok, f"polarization {pol:.1e}, flux symmetry {sym:.1e}, H gate accept/reject "
                  f"{accept}/{reject}/3, eigen {eig:.1e}, serialization exact {exact_io}")
    assert ok
