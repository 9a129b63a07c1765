"""Command-line entry point: ``safeflow <command> [options]``."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .network import save_checkpoint, train_velocity
from .sampler import sample, write_trajectory_csv
from .verify import SUITES, format_table, run_suite

log = logging.getLogger("safeflow")


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if args.steps is not None:
        d["sampler"]["steps"] = args.steps
    if args.integrator is not None:
        d["sampler"]["integrator"] = args.integrator
    if getattr(args, "output_dir", None):
        d["output_dir"] = args.output_dir
    return ex.ExperimentConfig.from_dict(d)


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    p.add_argument("--steps", type=int, help="sampler steps")
    p.add_argument("--integrator", choices=("euler", "midpoint"))
    p.add_argument("--output-dir", help=f"output root (the {ex.OUTPUT_ENV} variable takes precedence)")


def cmd_sample(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    spec = None
    if args.window:
        spec = cfg.guidance_spec(tuple(args.window), args.lam)
    model = ex.build_model(cfg, cfg.output_root() / "checkpoints")
    neg = ex.generate_negatives(cfg, seed)
    res = sample(model, cfg.sampler_config(seed, spec), neg, args.n, 2, record=bool(args.trajectory))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out, res.points, delimiter=",", header="x0,x1", comments="", fmt="%.17g")
    if args.trajectory:
        write_trajectory_csv(res, args.trajectory)
    rep = None
    if args.n >= 2:
        # W2 needs a target of the same size as the sample
        d = cfg.to_dict()
        d["eval"]["n_eval"] = args.n
        rep = ex.evaluate(cfg, res.points, ex.generate_target(ex.ExperimentConfig.from_dict(d), seed), seed)
    print(json.dumps({"points": str(out), "config_hash": cfg.config_hash(),
                      "eval": None if rep is None else rep.as_dict()}, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    tc = ex.train_config(cfg)
    if args.train_steps is not None:
        tc.steps = args.train_steps
    tc.log_every = max(tc.steps // 10, 1)
    result = train_velocity(ex.RingData(cfg), tc)
    out = Path(args.out) if args.out else cfg.output_root() / "checkpoints" / "mlp.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out)
    print(json.dumps({"checkpoint": str(out), "heldout_initial": result.heldout_initial,
                      "heldout_final": result.heldout_final, "steps": tc.steps}, indent=2))
    return 0


def _finish(rec) -> int:
    print(ex.format_record(rec))
    if not rec.passed:
        for f in rec.failures():
            print(f"assertion failed: {f}", file=sys.stderr)
        return 1
    return 0


def cmd_fig2(args) -> int:
    return _finish(ex.run_fig2(_config(args), dump_points=args.dump_points))


def _window(text: str):
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be 't_start,t_end', got {text!r}")
    return a, b


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rec = ex.run_window_ablation(cfg, args.windows, args.mode, base_lambda=args.lam)
    return _finish(rec)


def cmd_verify(args) -> int:
    rows = run_suite(args.suite, args.seed or 0)
    print(format_table(rows))
    if args.json:
        with open(args.json, "w") as f:
            json.dump([r.as_dict() for r in rows], f, indent=2, default=float)
    return 0 if all(r.passed for r in rows) else 1


def cmd_report(args) -> int:
    print(ex.report(args.dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safeflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="draw points from the (optionally guided) sampler")
    _common(s)
    s.add_argument("--n", type=int, default=2048)
    s.add_argument("--window", type=float, nargs=2, metavar=("T_START", "T_END"),
                   help="guidance window; omit for unguided sampling")
    s.add_argument("--lambda", dest="lam", type=float, help="guidance strength override")
    s.add_argument("--out", default="samples.csv")
    s.add_argument("--trajectory", help="also write every step to this CSV")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("train", help="train the MLP velocity on the ring")
    _common(s)
    s.add_argument("--train-steps", type=int)
    s.add_argument("--out", help="checkpoint path")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("fig2", help="unguided vs full vs early-stop guidance")
    _common(s)
    s.add_argument("--dump-points", action="store_true")
    s.set_defaults(fn=cmd_fig2)

    s = sub.add_parser("ablate-windows", help="sweep guidance windows")
    _common(s)
    s.add_argument("--mode", choices=tuple(ex.DEFAULT_WINDOWS), default="equal_budget")
    s.add_argument("--windows", type=_window, nargs="+", help="e.g. 1.0,0.8 1.0,0.6")
    s.add_argument("--lambda", dest="lam", type=float, help="base strength (first window)")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("verify", help="run a verification suite")
    s.add_argument("suite", choices=SUITES + ("all",))
    s.add_argument("--seed", type=int)
    s.add_argument("--json", help="write the table as JSON")
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("report", help="summarize run records in a directory")
    s.add_argument("dir")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ex.ConfigError, ex.HashMismatch, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
