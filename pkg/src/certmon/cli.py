"""``monitor`` command line: experiments, single-stream checks, synthetic certificates."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cone import calibrate_bloat
from .dynamics import read_system
from .harness import ExperimentError, read_config, run_experiment
from .monitor import MonitorConfig, monitor_init, monitor_next
from .network import NetworkFormatError, dump_network, read_network
from .synthetic import KINDS, make_synthetic_cbf
from .verifier import EXISTENTIAL, ROBUST, VerifierConfig


def _bloat(text: str):
    if text == "auto":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError("bloat must be nonnegative")
    return v


def _common() -> argparse.ArgumentParser:
    # accepted before or after the subcommand; SUPPRESS keeps the subparser from
    # overwriting a value given up front
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="64-bit seed (overrides the config)")
    common.add_argument("--mode", choices=(ROBUST, EXISTENTIAL), default=argparse.SUPPRESS,
                        help="control quantification")
    common.add_argument("--bloat", type=_bloat, default=argparse.SUPPRESS,
                        help="cone inflation per step, or 'auto' to calibrate")
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monitor", description="Runtime monitor for ReLU control barrier functions.",
                                parents=[_common()])
    p.set_defaults(seed=None, mode=None, bloat=None)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[_common()], help="run an experiment config and write the results table")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output CSV path (overrides the config)")
    r.add_argument("--no-figures", action="store_true", help="skip the PNG figures")

    c = sub.add_parser("check", parents=[_common()], help="monitor one state stream read from stdin")
    c.add_argument("--net", required=True)
    c.add_argument("--system", required=True)
    c.add_argument("--horizon", type=int, required=True, help="lookahead horizon in steps")
    c.add_argument("--check-unstable", action="store_true")

    m = sub.add_parser("make-cbf", parents=[_common()], help="write a synthetic certificate")
    m.add_argument("--kind", choices=KINDS, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--dim", type=int, default=2)
    m.add_argument("--margin", type=float, default=1.0)
    m.add_argument("--center", type=float, nargs="+")
    m.add_argument("--depth", type=int, help="pad to this many hidden layers")
    m.add_argument("--width", type=int, help="pad every hidden layer to this width")
    m.add_argument("--weights", type=float, nargs="+", help="affine kind: gradient w")
    m.add_argument("--offset", type=float, default=0.0, help="affine kind: constant r")
    return p


def _parse_state(line: str) -> np.ndarray:
    return np.array(line.replace(",", " ").split(), dtype=float)


def cmd_check(args, out=None, inp=None) -> int:
    out = out or sys.stdout
    inp = inp or sys.stdin
    spec = read_system(args.system)
    net = read_network(args.net)
    bloat = args.bloat if args.bloat is not None else "auto"
    if bloat == "auto":
        bloat = calibrate_bloat(spec, seed=args.seed or 0)
    vcfg = VerifierConfig(args.mode or ROBUST, check_unstable=args.check_unstable)
    st = monitor_init(spec, net, MonitorConfig(args.horizon, spec.dt, bloat, vcfg))
    k = 0
    for lineno, line in enumerate(inp, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            x = _parse_state(line)
        except ValueError:
            print(f"monitor: stdin line {lineno}: cannot parse state {line.strip()!r}", file=sys.stderr)
            return 2
        if x.shape != (spec.state_dim,):
            print(f"monitor: stdin line {lineno}: expected {spec.state_dim} values, got {x.size}", file=sys.stderr)
            return 2
        st, v = monitor_next(st, x)
        print(f"{k},{v.value},{v.cause or ''},{st.timing[-1].total * 1e3:.3f}", file=out, flush=True)
        k += 1
    return 0


def cmd_run(args) -> int:
    cfg = read_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    if args.bloat is not None:
        cfg.bloat = args.bloat
    if args.out:
        cfg.output = str(Path(args.out).resolve())
    if args.no_figures:
        cfg.figures = False
    if cfg.output is None:
        print("monitor: no output path; set 'output' in the config or pass --out", file=sys.stderr)
        return 2
    res = run_experiment(cfg)
    for r in res.rows:
        fw = "" if r.first_warning_step is None else f" first warning at step {r.first_warning_step}"
        print(f"{r.net} h={r.horizon} {r.outcome}: {r.n_traces} traces, {r.mean_ms:.2f} ms mean, "
              f"{r.max_ms:.2f} ms max{fw}")
    print(f"wrote {cfg.output}")
    return 0


def cmd_make_cbf(args) -> int:
    net = make_synthetic_cbf(args.kind, dim=args.dim, center=args.center, margin=args.margin,
                             depth=args.depth, width=args.width, w=args.weights, r=args.offset)
    Path(args.out).write_text(dump_network(net) + "\n")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "check":
            return cmd_check(args)
        return cmd_make_cbf(args)
    except (ExperimentError, NetworkFormatError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"monitor: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
