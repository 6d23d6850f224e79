"""Simulated boundary data in, D_eta^N a(lambda, 0) out.

Data are generated by forward solves on a tau stencil and differentiated
numerically; the reconstruction never looks at the model except to score it.
"""
import numpy as np

from quasijet import (Domain, SimulationSource, branch_tensors_from_jet, eigenform,
                      generate_mesh, jet_at, make_probe_set, recover_jet)

mesh = generate_mesh(Domain(), 0.1)
probes = make_probe_set()
model = eigenform(["1+0.2*mu+0.4*eta1+eta1*eta2", "2+eta1**2+0.3*mu*eta2"], ["0.3+0.4*mu"])
lam = np.round(np.arange(-0.3, 0.3001, 0.05), 12)

src = SimulationSource(model, mesh, delta=0.02, s=4, p=4, workers=4)
jt = recover_jet(src, probes, lam, 2, mesh=mesh)

i = len(lam) // 2
print(f"lambda = {lam[i] + 0.0}")
print("recovered a(lambda, 0):\n", jt.A0[i])
print("true      a(lambda, 0):\n", jet_at(model, lam[i], 0).a0)
for N in (1, 2):
    truth = branch_tensors_from_jet(jet_at(model, lam[i], N), N, jt.eig[i])
    for k, (rec, ref) in enumerate(zip(jt.tensors[N][i], truth)):
        print(f"branch {k}, order {N}: recovered {np.round(rec.entries, 6)}  true {np.round(ref.entries, 6)}")
print("flux samples per probe:", sum(ms.flux.size // probes.m for ms in src.measurements))
