"""Command-line interface.

Examples::

    qturnstile xxz-fcs --config run.yaml --set chain.n_sites=12 --set noise.kind=depolarizing --set noise.gamma=0.15
    qturnstile random-fcs --n-sites 20 --backend dmt --max-bond 256 --cycles 25 --initial neel
    qturnstile ssep --n-sites 20 --t-max 25 --trajectories 100000 --out results/ssep
    qturnstile compare --circuit results/rc --ssep results/ssep --window 10 25
    qturnstile validate-config run.yaml
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..ssep import SsepConfig, ssep_master, ssep_sample
from .compare import IncompatibleInitialStates, SsepCurve, compare_to_ssep
from .config import OUTPUT_DIR_ENV, ConfigError, load_config
from .experiment import BackendError, atomic_write, csv_text, read_csv, run_experiment

# convenience flag -> config field path
_SHORTCUTS = {
    "n_sites": "chain.n_sites",
    "cycles": "cycles",
    "backend": "backend.kind",
    "max_bond": "backend.max_bond",
    "noise": "noise.kind",
    "gamma": "noise.gamma",
    "initial": "initial.kind",
    "mu": "initial.mu",
    "lambda_mode": "lambdas.mode",
    "seed": "seed",
    "workers": "workers",
    "out": "output.dir",
}


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE", help="override any config field, e.g. noise.gamma=0.15")
    p.add_argument("--n-sites", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--backend", choices=["exact", "tebd", "dmt"])
    p.add_argument("--max-bond", type=int)
    p.add_argument("--noise", choices=["none", "depolarizing", "amplitude_damping"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--initial", choices=["domain_wall", "polarized_domain_wall", "neel", "product"])
    p.add_argument("--mu", type=float)
    p.add_argument("--lambda-mode", choices=["cumulant", "distribution", "explicit"])
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help=f"output directory (overrides ${OUTPUT_DIR_ENV})")


def _overrides(args: argparse.Namespace, model: str | None) -> list[str]:
    out = []
    if model is not None:
        out.append(f"model.kind={model}")
    for attr, path in _SHORTCUTS.items():
        val = getattr(args, attr, None)
        if val is not None:
            out.append(f"{path}={json.dumps(val) if isinstance(val, str) else val}")
    # explicit --set wins over shortcuts
    return out + list(args.overrides)


def _cmd_fcs(args: argparse.Namespace, model: str) -> int:
    cfg = load_config(args.config, _overrides(args, model))
    result = run_experiment(cfg)
    out = Path(cfg.output.dir)
    print(f"wrote {out} (config_hash={result.provenance['config_hash'][:12]})")
    if result.cumulants is not None:
        cs = result.cumulants
        print(f"cycle {int(cs.cycles[-1])}: mean={cs.mean[-1]:.6g} variance={cs.variance[-1]:.6g} kappa3={cs.kappa3[-1]:.6g}")
    for msg in result.diagnostics:
        print(msg, file=sys.stderr)
    return 0


def _cmd_ssep(args: argparse.Namespace) -> int:
    times = tuple(np.arange(0.0, args.t_max + 1e-9, args.dt)) if args.dt else None
    cfg = SsepConfig(
        n_sites=args.n_sites,
        initial=args.initial,
        hop_rate=args.hop_rate,
        t_max=args.t_max,
        trajectories=args.trajectories,
        seed=args.seed,
        sample_times=times,
    )
    t0 = time.perf_counter()
    res = ssep_master(cfg) if args.method == "master" else ssep_sample(cfg)
    wall = time.perf_counter() - t0
    out = Path(args.out)
    head = f"# qturnstile {__version__} ssep method={res.method} seed={cfg.seed}\n"
    rows = list(zip(res.times, res.mean(), res.variance(), res.kappa3(), res.variance_stderr()))
    atomic_write(out / "ssep.csv", csv_text(head, ["time", "mean", "variance", "kappa3", "variance_stderr"], rows))
    meta = {
        "package": "qturnstile",
        "code_version": __version__,
        "kind": "ssep",
        "method": res.method,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()},
        "seeds": {"ssep": cfg.seed},
        "wall_times": {"total": wall},
    }
    atomic_write(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}: variance({res.times[-1]:g}) = {res.variance()[-1]:.6g}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    circ_dir, ssep_dir = Path(args.circuit), Path(args.ssep)
    cum = read_csv(circ_dir / "cumulants.csv")
    sp = read_csv(ssep_dir / "ssep.csv")
    curve = SsepCurve(sp["time"], sp["variance"], sp["variance_stderr"])
    c_meta = json.loads((circ_dir / "meta.json").read_text())
    s_meta = json.loads((ssep_dir / "meta.json").read_text())
    err = None
    if args.circuit_err:
        err = read_csv(Path(args.circuit_err) / "cumulants.csv")["variance"]
        err = np.abs(cum["variance"] - err)
    res = compare_to_ssep(
        cum["cycle"],
        cum["variance"],
        curve,
        rescale=args.rescale,
        time_per_cycle=args.time_per_cycle,
        window=tuple(args.window) if args.window else None,
        circuit_err=err,
        circuit_initial=c_meta["config"]["initial"]["kind"],
        ssep_initial=s_meta["config"]["initial"],
    )
    head = f"# qturnstile {__version__} compare rescale={res.rescale:.17g} discrepancy={res.discrepancy:.17g}\n"
    text = csv_text(head, ["cycle", "circuit_variance", "ssep_variance", "circuit_err", "ssep_err"], res.rows())
    if args.out:
        atomic_write(Path(args.out), text)
    print(f"rescale={res.rescale:.6g} discrepancy={res.discrepancy:.4g} z_max={res.z_max:.3g} within_2sigma={res.within_errors()}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    cfg = load_config(args.path, args.overrides)
    print(f"ok config_hash={cfg.config_hash()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qturnstile", description="Turnstile full counting statistics")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("xxz-fcs", help="Trotterized XXZ circuit")
    _add_experiment_args(p)
    p.set_defaults(func=lambda a: _cmd_fcs(a, "xxz"))

    p = sub.add_parser("random-fcs", help="U(1) random circuit")
    _add_experiment_args(p)
    p.set_defaults(func=lambda a: _cmd_fcs(a, "random_circuit"))

    p = sub.add_parser("ssep", help="symmetric exclusion process reference")
    p.add_argument("--n-sites", type=int, required=True)
    p.add_argument("--initial", default="neel", choices=["neel", "domain_wall"])
    p.add_argument("--t-max", type=float, default=10.0)
    p.add_argument("--dt", type=float, default=None, help="sample spacing (default 1)")
    p.add_argument("--hop-rate", type=float, default=1.0)
    p.add_argument("--trajectories", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=["mc", "master"], default="mc")
    p.add_argument("--out", default="results/ssep")
    p.set_defaults(func=_cmd_ssep)

    p = sub.add_parser("compare", help="circuit variance against SSEP")
    p.add_argument("--circuit", required=True, help="output directory of an *-fcs run")
    p.add_argument("--circuit-err", help="second *-fcs run (e.g. lower bond dimension) used as the circuit error bar")
    p.add_argument("--ssep", required=True, help="output directory of an ssep run")
    p.add_argument("--rescale", choices=["fitted", "fixed"], default="fitted")
    p.add_argument("--time-per-cycle", type=float, default=1.0)
    p.add_argument("--window", type=int, nargs=2, metavar=("FIRST", "LAST"))
    p.add_argument("--out", help="CSV file for the comparison table")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("validate-config", help="check a config file without running it")
    p.add_argument("path", nargs="?")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (BackendError, IncompatibleInitialStates, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
