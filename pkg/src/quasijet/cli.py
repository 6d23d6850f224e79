"""Command-line driver: ``quasijet {mesh,forward,simulate,reconstruct,stability,oracle-check} CONFIG``.

Exit status: 0 success, 1 other library error, 2 configuration error,
3 solver or meshing failure, 4 probe geometry violates the margin
condition, 5 a self-check or experiment did not pass.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from ._version import __version__
from .coefficients import jet_at, kirchhoff_flux_oracle, model_from_config
from .errors import (ConditionHViolated, ConfigError, MeshError, NewtonDiverged,
                     QuasijetError)
from .fem import SolverOptions, boundary_fluxes, probe_vertices, solve_quasilinear
from .geometry import (Domain, condition_H_margin, generate_mesh, make_probe_set, mesh_quality,
                       probe_set_from_points, read_mesh, single_probe, write_mesh)
from .measurement import config_hash, estimate_derivatives, oracle_derivatives, simulate
from .reconstruction import (OracleSource, SimulationSource, branch_tensors_from_jet,
                             recover_jet)
from .stability import (convergence_study, holder_experiment, lipschitz_experiment, loglog_svg,
                        unit_directions)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_SOLVER, EXIT_CONDITION_H, EXIT_CHECK = 0, 1, 2, 3, 4, 5
COMMANDS = ("mesh", "forward", "simulate", "reconstruct", "stability", "oracle-check")

log = logging.getLogger("quasijet")

DEFAULTS = {
    "domain": {"kind": "unit_disk", "a": 1.0, "b": 1.0, "r0": 0.5},
    "mesh": {"h": 0.1, "boundary_phase": None, "file": None},
    "model": {"family": "isotropic", "gamma": "exp(mu)"},
    "probes": {"mode": "full", "basis": None, "points": None, "theta": 0.0},
    "lambda": {"R": 0.3, "step": 0.05, "values": None},
    "omegas": {"count": 8, "phase": 0.0, "values": None},
    "stencil": {"delta": 0.02, "s": 4, "p": 4, "richardson": False},
    "noise": {"eps": 0.0, "seed": 0},
    "reconstruction": {"mode": "eigenform", "N_max": 2, "data": "simulation",
                       "proj_threshold": 0.2, "projection": "average", "lam_order": None},
    "forward": {"lam": 0.0, "omega": [1.0, 0.0], "tau": 0.3},
    "solver": {"tol": 1e-12, "max_newton": 30, "continuation_steps": 4, "tau_cap": 1.0},
    "stability": {"kind": "lipschitz", "pairs": None, "eps": [1e-2, 1e-3, 1e-4], "N": 1,
                  "seeds": [0, 1, 2], "data": "derivatives", "lam_targets": [0.0],
                  "slope_tol": 0.1, "h_levels": [0.08, 0.04, 0.02],
                  "delta_levels": [0.08, 0.04, 0.02], "K": 2, "tau": 0.3},
    "workers": 1,
}

_FREE_FORM = {"model"}
_DEFAULT_PAIR = [{"family": "separable", "b": [["2", "0"], ["0", "3"]]},
                 {"family": "separable", "b": [["2.1", "0"], ["0", "3"]]}]


def _merge(defaults, doc, path=""):
    out = copy.deepcopy(defaults)
    for key, val in doc.items():
        if key not in defaults:
            raise ConfigError(f"unknown configuration key {path + key!r}")
        if isinstance(defaults[key], dict) and key not in _FREE_FORM:
            if not isinstance(val, dict):
                raise ConfigError(f"{path + key!r} must be a mapping")
            out[key] = _merge(defaults[key], val, path + key + ".")
        else:
            out[key] = val
    return out


@dataclass(frozen=True)
class RunConfig:
    """Fully defaulted run configuration; ``doc`` is echoed into every artifact."""

    command: str
    doc: dict
    out: str

    @classmethod
    def from_document(cls, command, doc, out="out", seed=None, workers=None, kind=None):
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        full = _merge(DEFAULTS, doc)
        if seed is not None:
            full["noise"]["seed"] = int(seed)
        if workers is not None:
            full["workers"] = int(workers)
        if kind is not None:
            full["stability"]["kind"] = kind
        return cls(command, full, out)

    @property
    def hash(self):
        return config_hash({"command": self.command, "config": self.doc})

    def header(self):
        return {"quasijet_version": __version__, "config_hash": self.hash,
                "command": self.command, "config": self.doc}

    # -- builders -------------------------------------------------------------------------

    def domain(self):
        d = self.doc["domain"]
        try:
            return Domain(d["kind"], float(d["a"]), float(d["b"]), float(d["r0"]))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad domain: {exc}") from None

    def mesh(self):
        m = self.doc["mesh"]
        if m["file"]:
            return read_mesh(m["file"])
        phase = m["boundary_phase"]
        if phase is None:
            phase = float(self.doc["probes"]["theta"]) if self.doc["probes"]["mode"] == "single" else 0.0
        return generate_mesh(self.domain(), float(m["h"]), boundary_phase=phase)

    def model(self, cfg=None):
        try:
            return model_from_config(self.doc["model"] if cfg is None else cfg)
        except (ValueError, KeyError, TypeError, SyntaxError) as exc:
            raise ConfigError(f"bad model: {exc}") from None

    def probes(self):
        p = self.doc["probes"]
        dom = self.domain()
        if p["mode"] == "single":
            return single_probe(dom, float(p["theta"]))
        if p["mode"] != "full":
            raise ConfigError(f"unknown probe mode {p['mode']!r}")
        basis = None if p["basis"] is None else np.array(p["basis"], dtype=float)
        if p["points"] is not None:
            return probe_set_from_points(dom, np.array(p["points"], dtype=float), basis)
        return make_probe_set(dom, basis)

    def lam_grid(self):
        g = self.doc["lambda"]
        if g["values"] is not None:
            return np.array(g["values"], dtype=float)
        R, step = float(g["R"]), float(g["step"])
        if R < 0 or step <= 0:
            raise ConfigError("lambda range needs R >= 0 and step > 0")
        return np.round(np.arange(-R, R + step / 2, step), 12)

    def omegas(self):
        o = self.doc["omegas"]
        if o["values"] is not None:
            w = np.array(o["values"], dtype=float)
            return w / np.linalg.norm(w, axis=1, keepdims=True)
        return unit_directions(int(o["count"]), float(o["phase"]))

    def solver(self):
        s = self.doc["solver"]
        return SolverOptions(tol=float(s["tol"]), max_newton=int(s["max_newton"]),
                             continuation_steps=int(s["continuation_steps"]),
                             tau_cap=float(s["tau_cap"]))


# -- artifacts ------------------------------------------------------------------------------

def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not serializable: {type(x)}")


def _write_json(path, payload, cfg):
    d = dict(cfg.header())
    d.update(payload)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _stamp(cfg):
    return f"quasijet {__version__} config {cfg.hash}"


def _write_svg(path, svg, cfg):
    head, rest = svg.split("\n", 1)
    with open(path, "w") as fh:
        fh.write(f"{head}\n<!-- {_stamp(cfg)} -->\n{rest}")


# -- commands ---------------------------------------------------------------------------------

def cmd_mesh(cfg):
    mesh = cfg.mesh()
    min_angle, max_edge = mesh_quality(mesh)
    write_mesh(mesh, os.path.join(cfg.out, "mesh.txt"), comment=_stamp(cfg))
    _write_json(os.path.join(cfg.out, "report.json"),
                {"mesh_hash": mesh.hash, "vertices": mesh.n_vertices,
                 "triangles": mesh.n_triangles, "h": mesh.h, "min_angle_deg": min_angle,
                 "max_edge": max_edge, "boundary_vertices": len(mesh.boundary_vertices)}, cfg)
    log.info("mesh %d vertices %d triangles h=%.4g", mesh.n_vertices, mesh.n_triangles, mesh.h)
    return EXIT_OK


def cmd_forward(cfg):
    mesh, model = cfg.mesh(), cfg.model()
    f = cfg.doc["forward"]
    sol = solve_quasilinear(model, mesh, float(f["lam"]), np.array(f["omega"], dtype=float),
                            float(f["tau"]), cfg.solver())
    flux = boundary_fluxes(sol, model)
    b = mesh.boundary_vertices
    with open(os.path.join(cfg.out, "fluxes.csv"), "w") as fh:
        fh.write(f"# {_stamp(cfg)}\nvertex,x,y,flux\n")
        for v in b:
            x, y = mesh.vertices[v]
            fh.write(f"{v},{float(x)!r},{float(y)!r},{float(flux[v])!r}\n")
    _write_json(os.path.join(cfg.out, "solution.json"), sol.to_dict(), cfg)
    _write_json(os.path.join(cfg.out, "report.json"),
                {"mesh_hash": mesh.hash, "newton": sol.to_dict()["report"]}, cfg)
    return EXIT_OK


def cmd_simulate(cfg):
    mesh, model, probes = cfg.mesh(), cfg.model(), cfg.probes()
    st = cfg.doc["stencil"]
    lam, om = cfg.lam_grid(), cfg.omegas()
    prov = {"config_hash": cfg.hash, "model_hash": model.model_hash, "mesh_hash": mesh.hash}
    ms = simulate(model, mesh, probes, lam, om, float(st["delta"]), int(st["s"]),
                  workers=int(cfg.doc["workers"]), options=cfg.solver(), provenance=prov)
    eps = float(cfg.doc["noise"]["eps"])
    if eps > 0:
        from .measurement import add_noise
        ms = add_noise(ms, eps, seed=int(cfg.doc["noise"]["seed"]))
    ms.save(os.path.join(cfg.out, "measurements.json"), os.path.join(cfg.out, "measurements.csv"))
    K = int(cfg.doc["reconstruction"]["N_max"]) + 1
    table = estimate_derivatives(ms, K, p=int(st["p"]), richardson=bool(st["richardson"]))
    table.to_csv(os.path.join(cfg.out, "derivatives.csv"))
    oracle = oracle_derivatives(model, mesh, probes, lam, om, K)
    err = {str(k): float(np.max(np.abs(table.order(k) - oracle.order(k)))) for k in range(1, K + 1)}
    _write_json(os.path.join(cfg.out, "report.json"),
                {"mesh_hash": mesh.hash, "model_hash": model.model_hash,
                 "shape": list(ms.shape), "derivative_error_vs_cascade": err,
                 "noise_gain": table.meta["noise_gain"]}, cfg)
    return EXIT_OK


def _jet_errors(jt, model):
    out = {"0": 0.0}
    for i, lam in enumerate(jt.lam_grid):
        jet = jet_at(model, lam, jt.N_max)
        out["0"] = max(out["0"], float(np.max(np.abs(jt.A0[i] - jet.a0))))
        for N in range(1, jt.N_max + 1):
            truth = branch_tensors_from_jet(jet, N, jt.eig[i])
            e = max(float(np.max(np.abs(a.entries - b.entries)))
                    for a, b in zip(truth, jt.tensors[N][i]))
            out[str(N)] = max(out.get(str(N), 0.0), e)
    return out


def cmd_reconstruct(cfg):
    probes = cfg.probes()
    mesh, model = cfg.mesh(), cfg.model()
    r, st, nz = cfg.doc["reconstruction"], cfg.doc["stencil"], cfg.doc["noise"]
    if r["data"] == "oracle":
        src = OracleSource(model, mesh)
    elif r["data"] == "simulation":
        src = SimulationSource(model, mesh, delta=float(st["delta"]), s=int(st["s"]),
                               p=int(st["p"]), richardson=bool(st["richardson"]),
                               noise=float(nz["eps"]), seed=int(nz["seed"]),
                               workers=int(cfg.doc["workers"]), options=cfg.solver())
    else:
        raise ConfigError(f"unknown reconstruction data {r['data']!r}")
    lam = cfg.lam_grid()
    jt = recover_jet(src, probes, lam, int(r["N_max"]), mode=r["mode"], mesh=mesh,
                     proj_threshold=float(r["proj_threshold"]), projection=r["projection"],
                     lam_order=r["lam_order"])
    jt.save(os.path.join(cfg.out, "jet.json"), extra=cfg.header())
    if isinstance(src, SimulationSource):
        for k, ms in enumerate(src.measurements):
            ms.provenance["config_hash"] = cfg.hash
            ms.save(os.path.join(cfg.out, f"measurements_{k}.json"),
                    os.path.join(cfg.out, f"measurements_{k}.csv"))
    _write_json(os.path.join(cfg.out, "report.json"),
                {"mesh_hash": mesh.hash, "model_hash": model.model_hash,
                 "error_vs_truth": _jet_errors(jt, model), "diagnostics": jt.diagnostics}, cfg)
    return EXIT_OK


def cmd_stability(cfg):
    s = cfg.doc["stability"]
    kind = s["kind"]
    svgs = []
    if kind == "lipschitz":
        probes, lam = cfg.probes(), cfg.lam_grid()
        pairs = s["pairs"] if s["pairs"] is not None else [_DEFAULT_PAIR]
        reports = [lipschitz_experiment((cfg.model(a), cfg.model(b)), probes, lam, cfg.omegas())
                   for a, b in pairs]
        rows = [dict(pair=i, **row) for i, rep in enumerate(reports) for row in rep.rows]
        summary = {"pairs": [rep.summary for rep in reports],
                   "max_ratio": max(rep.summary["ratio"] for rep in reports),
                   "C1": reports[0].summary["C1"],
                   "passed": all(rep.passed for rep in reports)}
    elif kind == "holder":
        rep = holder_experiment(cfg.model(), s["eps"], N=int(s["N"]), seeds=tuple(s["seeds"]),
                                lam_targets=tuple(s["lam_targets"]), mesh=cfg.mesh(),
                                probes=cfg.probes(), data=s["data"], slope_tol=float(s["slope_tol"]))
        rows, summary = rep.rows, rep.summary
        svgs.append(("holder.svg", loglog_svg([("mean error", s["eps"], summary["mean_errors"])],
                                              "reconstruction error against noise", "eps",
                                              "max entry error")))
    elif kind == "convergence":
        f = cfg.doc["forward"]
        rep = convergence_study(cfg.model(), tuple(s["h_levels"]), tuple(s["delta_levels"]),
                                int(s["K"]), float(f["lam"]), tuple(f["omega"]), float(s["tau"]),
                                cfg.probes())
        rows, summary = rep.rows, rep.summary
        fe = summary["flux_errors"]
        svgs.append(("convergence_h.svg", loglog_svg([("flux", s["h_levels"][:len(fe)], fe)],
                                                     "flux error", "h", "max error")))
        svgs.append(("convergence_delta.svg", loglog_svg(
            [(f"d{k}", s["delta_levels"], v) for k, v in summary["d_errors"].items()],
            "tau-derivative error", "delta", "max error")))
    else:
        raise ConfigError(f"unknown stability kind {kind!r}")
    _write_json(os.path.join(cfg.out, "report.json"), {"kind": kind, "summary": summary,
                                                        "rows": rows}, cfg)
    if rows:
        keys = list(rows[0])
        with open(os.path.join(cfg.out, "report.csv"), "w") as fh:
            fh.write(f"# {_stamp(cfg)}\n{','.join(keys)}\n")
            for row in rows:
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in (row[k] for k in keys)) + "\n")
    for name, svg in svgs:
        _write_svg(os.path.join(cfg.out, name), svg, cfg)
    log.info("stability %s passed=%s", kind, summary.get("passed"))
    return EXIT_OK if summary.get("passed") else EXIT_CHECK


def cmd_oracle_check(cfg):
    mesh, model, probes = cfg.mesh(), cfg.model(), cfg.probes()
    f = cfg.doc["forward"]
    lam, om, tau = float(f["lam"]), np.array(f["omega"], dtype=float), float(f["tau"])
    checks = {}
    sol = solve_quasilinear(model, mesh, lam, om, tau, cfg.solver())
    b = mesh.boundary_vertices
    bd = float(np.max(np.abs(sol.values[b] - (lam + tau * mesh.vertices[b] @ om))))
    checks["boundary_trace"] = {"error": bd, "tol": 0.0, "passed": bd == 0.0}
    flux = boundary_fluxes(sol, model)
    flux_m = boundary_fluxes(solve_quasilinear(model, mesh, lam, -om, -tau, cfg.solver()), model)
    sym = float(np.max(np.abs(flux[b] - flux_m[b])))
    checks["flux_symmetry"] = {"error": sym, "tol": 1e-13, "passed": sym <= 1e-13}
    jet = jet_at(model, lam, 0)
    exact = probes.normals @ (jet.a0 @ om)
    cas = oracle_derivatives(model, mesh, probes, [lam], om[None, :], 2, exact_first=False)
    e1 = float(np.max(np.abs(cas.order(1)[0, 0] - exact)))
    checks["first_order_flux"] = {"error": e1, "tol": 1e-10, "passed": e1 <= 1e-10}
    st = cfg.doc["stencil"]
    ms = simulate(model, mesh, probes, [lam], om[None, :], float(st["delta"]), int(st["s"]),
                  options=cfg.solver())
    est = estimate_derivatives(ms, 2, p=int(st["p"]))
    for k in (1, 2):
        ref = cas.order(k)[0, 0]
        e = float(np.max(np.abs(est.order(k)[0, 0] - ref)))
        tol = 1e-4 * (1 + float(np.max(np.abs(ref))))
        checks[f"d{k}_fd_vs_cascade"] = {"error": e, "tol": tol, "passed": e <= tol}
    if model.is_mu_only:
        th = np.arctan2(mesh.vertices[b, 1], mesh.vertices[b, 0])
        ref = kirchhoff_flux_oracle(model, lam, om, tau, th)
        ek = float(np.max(np.abs(flux[b] - ref)))
        tol = 0.05 * mesh.h
        checks["kirchhoff_oracle"] = {"error": ek, "tol": tol, "passed": ek <= tol}
    hm = condition_H_margin(probes)
    checks["condition_H"] = {"M": hm.M, "C1": hm.C1, "passed": True}
    ok = all(c["passed"] for c in checks.values())
    _write_json(os.path.join(cfg.out, "report.json"),
                {"mesh_hash": mesh.hash, "model_hash": model.model_hash, "checks": checks,
                 "passed": ok}, cfg)
    for name, c in checks.items():
        log.info("check %s %s", name, "pass" if c["passed"] else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


_HANDLERS = {"mesh": cmd_mesh, "forward": cmd_forward, "simulate": cmd_simulate,
             "reconstruct": cmd_reconstruct, "stability": cmd_stability,
             "oracle-check": cmd_oracle_check}


def run(command, config, out="out", seed=None, workers=None, kind=None):
    """Run one command on a config mapping; returns the exit status."""
    try:
        cfg = RunConfig.from_document(command, config, out, seed, workers, kind)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    os.makedirs(out, exist_ok=True)
    log.info("quasijet %s %s config %s", __version__, command, cfg.hash)
    try:
        return _HANDLERS[command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ConditionHViolated as exc:
        log.error("%s", exc)
        return EXIT_CONDITION_H
    except (NewtonDiverged, MeshError) as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except (QuasijetError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


def main(argv=None):
    ap = argparse.ArgumentParser(prog="quasijet", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("config", help="JSON configuration document")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override noise.seed")
    ap.add_argument("--workers", type=int, default=None, help="override workers")
    ap.add_argument("--kind", default=None, help="override stability.kind")
    ap.add_argument("--version", action="version", version=f"quasijet {__version__}")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        log.error("config error: cannot read %s: %s", args.config, exc)
        return EXIT_CONFIG
    return run(args.command, doc, args.out, args.seed, args.workers, args.kind)


if __name__ == "__main__":
    sys.exit(main())
