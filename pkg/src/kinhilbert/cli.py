"""Batch driver: ``kinhilbert <subcommand> [--config FILE] [--out DIR] [--set section.key=value]``.

Precedence is defaults < config file < command-line flags. Every artefact carries a
provenance header (config hash and parameter echo). Exit codes: 0 success, 1 a preset
check failed, 2 invalid or missing configuration, 3 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import SUBCOMMANDS, ConfigError, ExperimentConfig, from_mapping, load_config

log = logging.getLogger("kinhilbert")
THREADS_ENV = "KINHILBERT_THREADS"


def provenance(cfg: ExperimentConfig) -> dict:
    from . import __version__
    params = asdict(cfg)
    params.pop("output")
    return {"config_hash": cfg.digest(), "version": __version__, "parameters": params}


def write_json(path: Path, payload: dict, cfg: ExperimentConfig) -> Path:
    from .presets import _plain
    body = {"provenance": provenance(cfg), **_plain(payload)}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=list) + "\n")
    return path


def write_csv(path: Path, header, rows, cfg: ExperimentConfig) -> Path:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.digest()}\n")
    buf.write(f"# parameters={cfg.canonical()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    path.write_text(buf.getvalue())
    return path


# ----------------------------------------------------------------------------- subcommands

def _operator(cfg: ExperimentConfig):
    from .presets import operator
    return operator(cfg.n, cfg.v_max, cfg.kappa, cfg.beta0, cfg.m, (cfg.rho, *cfg.u, cfg.T))


def cmd_assemble_op(cfg, out: Path) -> int:
    from . import collision as C
    op = _operator(cfg)
    C.save_operator(op, out / "operator.npz")
    C.save_operator_csv(op, out / "operator.csv")
    write_json(out / "operator.json", C.diagnostics_json(op, coercivity=False), cfg)
    return 0


def cmd_verify(cfg, out: Path) -> int:
    from . import collision as C
    from .presets import verify
    rep = verify(cfg.n, cfg.kappa, cfg.v_max)
    op = _operator(cfg)
    # L is self-adjoint in the unweighted l2 pairing: random probes
    rng = np.random.default_rng(cfg.seed)
    h, g = rng.standard_normal((2, op.grid.size))
    lhs = np.dot(C.apply_L(op, h), g)
    rep["self_adjoint_probe"] = float(abs(lhs - np.dot(h, C.apply_L(op, g))) / abs(lhs))
    write_json(out / "verify.json", rep, cfg)
    return 0 if rep["passed"] else 1


def cmd_coeffs(cfg, out: Path) -> int:
    from .presets import coeffs
    r = coeffs(cfg.n, cfg.kappa, cfg.T)
    keys = ["T", "kappa", "mu", "heat_conductivity", "identity_43_residual", "isotropy_A", "isotropy_B"]
    write_csv(out / "coeffs.csv", keys, [[r[k] for k in keys]], cfg)
    return 0


def cmd_knudsen(cfg, out: Path) -> int:
    from . import knudsen as Kn
    from .grid import WeightSystem
    from .presets import _knudsen_problem
    op = _operator(cfg)
    ws = WeightSystem(T_M=cfg.T_M, frak_a=cfg.frak_a, l=cfg.l, frak_k=cfg.frak_k)
    p = _knudsen_problem(op, cfg.ds, with_data=cfg.source == "burnett", deltas=cfg.deltas,
                         n_list=cfg.n_list, per_unit=cfg.per_unit, ws=ws)
    sol = Kn.solve_halfspace(p)
    eta = sol.mesh.nodes
    write_csv(out / "knudsen_profiles.csv", ["eta", "a", "b1", "b2", "b3", "c"],
              np.column_stack([eta, sol.a, sol.b, sol.c]), cfg)
    ctx = Kn.make_context(p)
    sf = Kn.structure_fluxes(ctx, sol.f - Kn.upsilon(eta)[:, None] * p.f_b[None, :])
    rep = {"phi": sol.phi, "history": sol.history, "decay": Kn.decay_report(sol),
           "b3_max": float(np.max(np.abs(sf["b3"]))), "flux_max": float(np.max(np.abs(sf["flux"])))}
    write_json(out / "knudsen.json", rep, cfg)
    return 0


def _euler_profiles(cfg):
    from .presets import _pulse, _smooth_profiles
    return _pulse() if cfg.profile == "pulse" else _smooth_profiles()


def cmd_euler(cfg, out: Path) -> int:
    from . import euler as E
    prof = _euler_profiles(cfg)
    f0 = E.init_euler(cfg.delta_E, *prof, n=cfg.euler_n, far=cfg.far)
    f1 = E.solve_to(f0, cfg.t_end, cfg.cfl)
    E.to_csv([f0, f1], out / "euler_profiles.csv")
    text = (out / "euler_profiles.csv").read_text()
    (out / "euler_profiles.csv").write_text(f"# config_hash={cfg.digest()}\n# parameters={cfg.canonical()}\n" + text)
    rep = {"t": f1.t, "totals_initial": f0.totals(), "totals_final": f1.totals()}
    if cfg.profile == "pulse":
        rep["acoustic_l2_error"] = E.l2_error(f1, E.acoustic_solution(f1.x, f1.t, cfg.delta_E, *prof))
    write_json(out / "euler.json", rep, cfg)
    return 0


def cmd_expand(cfg, out: Path) -> int:
    from . import expansion as X
    from .grid import WeightSystem
    from .presets import expansion_terms
    terms = expansion_terms(cfg.n, knudsen_d=cfg.knudsen_d)
    ws = WeightSystem(T_M=cfg.T_M, frak_a=cfg.frak_a, l=cfg.l, frak_k=cfg.frak_k)
    tab = X.residual_sweep(terms, cfg.eps, ws=ws, ablation_eps=cfg.ablation_eps)
    keys = ["eps", "l2", "sup_weighted", "min_F", "boundary_defect"]
    write_csv(out / "residuals.csv", keys, [[r[k] for k in keys] for r in tab["rows"]], cfg)
    write_json(out / "slopes.json", {k: v for k, v in tab.items() if k != "rows"}, cfg)
    return 0


def cmd_sweep(cfg, out: Path) -> int:
    from .presets import CRITERIA, run_preset
    names = cfg.presets or tuple(CRITERIA)
    status = 0
    summary = {}
    for name in names:
        rep = run_preset(name)
        write_json(out / f"{name}.json", rep, cfg)
        summary[name] = rep["passed"]
        print(f"{name}: {'PASS' if rep['passed'] else 'FAIL'}")
        status |= 0 if rep["passed"] else 1
    write_json(out / "summary.json", summary, cfg)
    return status


COMMANDS = {"assemble-op": cmd_assemble_op, "verify": cmd_verify, "coeffs": cmd_coeffs,
            "knudsen": cmd_knudsen, "euler": cmd_euler, "expand": cmd_expand, "sweep": cmd_sweep}


# ----------------------------------------------------------------------------- argument handling

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kinhilbert", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file; missing files are an error")
        sp.add_argument("--out", help="output directory (overrides run.output)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry; may be repeated")
        sp.add_argument("--kappa", type=float, help="collision kernel exponent")
        sp.add_argument("--n", type=int, help="velocity points per axis")
        sp.add_argument("--seed", type=int)
        if name == "sweep":
            sp.add_argument("presets", nargs="*", help="named presets (default: all criteria)")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    values = {"run.subcommand": args.subcommand}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "expected SECTION.KEY=VALUE")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for flag, key in (("kappa", "model.kappa"), ("n", "grid.n"), ("seed", "run.seed"), ("out", "run.output")):
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = str(val)
    if getattr(args, "presets", None):
        values["sweep.presets"] = " ".join(args.presets)
    return from_mapping(values, cfg).validate()


def _threads():
    n = os.environ.get(THREADS_ENV)
    if n:
        import numba
        numba.set_num_threads(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    _threads()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[cfg.subcommand](cfg, out)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        payload = {"error": type(exc).__name__, "message": str(exc),
                   "fields": {k: v for k, v in vars(exc).items() if isinstance(v, (int, float, str))}}
        write_json(out / "error.json", payload, cfg)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
