"""Forward problem on the unit disk and its consistent boundary flux.

For a = b(u) Id the Kirchhoff transform makes the problem linear, so the
flux has a spectral reference.  We refine the mesh and watch the error fall.
"""
import numpy as np

from quasijet import Domain, boundary_fluxes, generate_mesh, isotropic, kirchhoff_flux_oracle
from quasijet import solve_quasilinear

model = isotropic("exp(mu)")
omega, tau = np.array([1.0, 0.0]), 0.5

prev = None
for h in (0.08, 0.04, 0.02):
    mesh = generate_mesh(Domain(), h)
    sol = solve_quasilinear(model, mesh, 0.0, omega, tau)
    b = mesh.boundary_vertices
    theta = np.arctan2(mesh.vertices[b, 1], mesh.vertices[b, 0])
    err = np.max(np.abs(boundary_fluxes(sol, model)[b] -
                        kirchhoff_flux_oracle(model, 0.0, omega, tau, theta)))
    rate = "" if prev is None else f"  EOC {np.log(prev[1] / err) / np.log(prev[0] / mesh.h):.2f}"
    print(f"h = {mesh.h:.4f}  triangles {mesh.n_triangles:6d}  Newton its {sol.report.iterations}"
          f"  flux error {err:.3e}{rate}")
    prev = (mesh.h, err)
