"""Flux derivatives in tau from the jet of a, checked against finite differences.

The cascade solves one constant-coefficient problem per order, so its
values are the exact tau-derivatives of the discrete forward map.
"""
import numpy as np

from quasijet import (Domain, cascade_fields, eigenform, estimate_derivatives, generate_mesh,
                      jet_at, make_probe_set, probe_vertices, simulate)

mesh = generate_mesh(Domain(), 0.1)
probes = make_probe_set()
model = eigenform(["1+0.2*mu+0.4*eta1", "2+eta1**2"], ["0.3"])
lam, omega = 0.1, np.array([np.cos(0.5), np.sin(0.5)])

tj = cascade_fields(jet_at(model, lam, 2), mesh, omega, 3)
verts = probe_vertices(mesh, probes.points)

for delta in (0.08, 0.04, 0.02):
    ms = simulate(model, mesh, probes, [lam], omega[None, :], delta, 4)
    est = estimate_derivatives(ms, 3, p=4)
    errs = [np.max(np.abs(est.order(k)[0, 0] - tj.flux_derivative(k, verts))) for k in (1, 2, 3)]
    print(f"delta = {delta:.2f}  |d1|,|d2|,|d3| errors: " + "  ".join(f"{e:.2e}" for e in errs))

print("cascade d_k at the probes:")
for k in (1, 2, 3):
    print(f"  d{k} = {tj.flux_derivative(k, verts)}")
