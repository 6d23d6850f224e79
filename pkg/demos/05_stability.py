"""Lipschitz and Hoelder experiments, written out as JSON, CSV and SVG."""
import os

import numpy as np

from quasijet import (Domain, generate_mesh, holder_experiment, isotropic, lipschitz_experiment,
                      loglog_svg, make_probe_set, separable)

out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "out")
os.makedirs(out, exist_ok=True)
probes = make_probe_set()

pair = (separable([["2", "0"], ["0", "3"]]), separable([["2.1", "0"], ["0", "3"]]))
rep = lipschitz_experiment(pair, probes, np.linspace(-1, 1, 5))
s = rep.summary
print(f"Lipschitz: sup|db| = {s['lhs']:.4f}, sup|dd1| = {s['rhs']:.4f}, ratio {s['ratio']:.4f} "
      f"<= C1 = {s['C1']:.4f}")
rep.save_json(os.path.join(out, "lipschitz.json"))

mesh = generate_mesh(Domain(), 0.1)
eps = [1e-2, 1e-3, 1e-4]
rep = holder_experiment(isotropic("1+eta1"), eps, N=1, mesh=mesh, probes=probes)
s = rep.summary
print(f"Hoelder: slope {s['slope']:.3f} (bound exponent {s['bound_exponent']:.3f}), R^2 {s['r2']:.4f}")
rep.save_json(os.path.join(out, "holder.json"))
with open(os.path.join(out, "holder.csv"), "w") as fh:
    fh.write(rep.csv_text())
with open(os.path.join(out, "holder.svg"), "w") as fh:
    fh.write(loglog_svg([("mean error", eps, s["mean_errors"]),
                         ("eps^(1/3)", eps, [e ** (1 / 3) for e in eps])],
                        "first-order reconstruction under noise", "eps", "error"))
print("wrote", sorted(os.listdir(out)))
