"""Isotropic coefficients from a single boundary point.

With omega equal to the normal at x0 the first flux derivative is gamma
itself, so noise on the data passes through with gain one.
"""
import numpy as np

from quasijet import (Domain, OracleSource, PerturbedSource, generate_mesh, isotropic,
                      make_probe_set, recover_jet, single_probe)

theta = 0.7
mesh = generate_mesh(Domain(), 0.1, boundary_phase=theta)
model = isotropic("exp(mu)*(1+0.3*eta1+eta2**2)")
lam = np.round(np.arange(-0.3, 0.3001, 0.05), 12)

one = recover_jet(OracleSource(model, mesh), single_probe(theta=theta), lam, 2,
                  mode="isotropic_onepoint", mesh=mesh)
full = recover_jet(OracleSource(model, mesh), make_probe_set(), lam, 2, mesh=mesh)
for N in (1, 2):
    gap = max(np.max(np.abs(one.tensors[N][i][0].entries - full.tensors[N][i][0].entries))
              for i in range(len(lam)))
    print(f"order {N}: one point vs two probes, max difference {gap:.2e}")

for eps in (1e-2, 1e-3, 1e-4):
    noisy = recover_jet(PerturbedSource(OracleSource(model, mesh), eps, seed=0),
                        single_probe(theta=theta), lam, 0, mode="isotropic_onepoint")
    print(f"eps = {eps:.0e}: gamma error / eps = {np.max(np.abs(noisy.A0 - one.A0)) / eps:.3f}")
