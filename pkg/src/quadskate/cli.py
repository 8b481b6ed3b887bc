"""Command-line entry point: train, codesign, sweep-direction, scenario, report.

Exit status: 0 on success, 1 for usage or configuration errors, 2 for
runtime failures (including a training run that hit the failure sentinel).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .bo import LogCorruptError, read_log
from .design import DesignBoundsError, design_from_degrees
from .experiment import codesign, train_design
from .ppo import CheckpointError, load_checkpoint, save_checkpoint
from .report import MissingInputError, build_report
from .scenarios import (
    HockeyStopSettings, PolicyController, directional_cot_sweep, format_sweep, paired_hockey_stop, self_align,
)

log = logging.getLogger("quadskate")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_output(args.out)
    return cfg


def _design(degrees):
    if degrees is None:
        return None
    try:
        return design_from_degrees(degrees)
    except (DesignBoundsError, ValueError) as exc:
        raise UsageError(f"--design: {exc}") from exc


def _prepare_out(cfg: C.ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    design = _design(args.design)
    if design is None:
        design = design_from_degrees([0.0])
        log.info("no --design given; training the all-zero design")
    out = _prepare_out(cfg)
    res = train_design(cfg, design.as_array(), cfg.seed)
    save_checkpoint(out / "checkpoint.json", res.params,
                    {"design": design.as_array().tolist(), "seed": cfg.seed, "frame": cfg.task.frame})
    (out / "training_log.jsonl").write_text(res.log.to_jsonl())
    summary = {"J": res.J, "failed": res.failed, "reason": res.reason, "steps": res.steps,
               "design_deg": design.degrees()}
    (out / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"J={res.J:.6g} failed={res.failed} steps={res.steps} -> {out / 'checkpoint.json'}")
    if res.failed:
        print(f"training failed: {res.reason}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_codesign(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg)
    log_path = out / "evals.jsonl"
    if log_path.exists() and log_path.stat().st_size and not args.resume:
        raise UsageError(f"{log_path} already has records; pass --resume to continue it")
    if args.resume:
        read_log(log_path)  # surface a corrupt line before any work
    result = codesign(cfg, log_path=log_path, checkpoint_dir=out / "checkpoints", timing_path=out / "timing.jsonl")
    best = result.best
    summary = {"iteration": best.iteration, "J": best.J, "reduced": best.reduced, "expanded": best.expanded,
               "design_deg": [float(np.degrees(x)) for x in best.reduced], "checkpoint": best.checkpoint}
    (out / "best.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"best J={best.J:.6g} at iteration {best.iteration}, design deg {summary['design_deg']}")
    return EXIT_OK


def _controller(path):
    try:
        params, meta = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc
    return PolicyController(params), meta


def _checkpoint_design(args, meta):
    design = _design(args.design)
    if design is not None:
        return design.as_array()
    if "design" in meta:
        return np.asarray(meta["design"], dtype=float)
    raise UsageError("--design is required (the checkpoint does not record one)")


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    ctrl, meta = _controller(args.checkpoint)
    design = _checkpoint_design(args, meta)
    rows = directional_cot_sweep(ctrl, design, speed=args.speed, n_angles=args.n_angles, params=cfg.sim)
    out = _prepare_out(cfg)
    (out / "sweep.txt").write_text(format_sweep(rows))
    print(format_sweep(rows), end="")
    return EXIT_OK


def cmd_scenario(args) -> int:
    cfg = _load_config(args)
    ctrl, meta = _controller(args.checkpoint)
    design = _checkpoint_design(args, meta)
    out = _prepare_out(cfg)
    sdir = out / "scenarios"
    if args.name == "hockey-stop":
        if not args.world_checkpoint:
            raise UsageError("hockey-stop needs --checkpoint (BaseFrame) and --world-checkpoint (WorldFrame)")
        world, wmeta = _controller(args.world_checkpoint)
        settings = HockeyStopSettings(initial_speed=args.speed if args.speed is not None else 2.0,
                                      launch=args.launch)
        wdesign = np.asarray(wmeta.get("design", design), dtype=float)
        res = paired_hockey_stop(ctrl, world, wdesign, args.trials, cfg.seed, settings, cfg.sim, base_design=design)
        res["base"].save(sdir)
        res["world"].save(sdir)
        print(f"median stop time base={res['median_base']:.4g}s world={res['median_world']:.4g}s "
              f"ratio={res['ratio']:.4g}")
    else:
        speed = args.speed if args.speed is not None else 1.0
        res = self_align(ctrl, design, args.trials, cfg.seed, speed=speed, params=cfg.sim, weights=cfg.reward)
        res.save(sdir)
        print(f"median alignment angle {res.median:.4g} rad over {len(res.summaries)} trials")
    return EXIT_OK


def cmd_report(args) -> int:
    files = build_report(args.run_dir, args.out)
    print(files["summary.txt"], end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--design", type=float, nargs="+", metavar="DEG",
                        help="wheel angles in degrees: 1 (coupled), 2 (front/rear) or 4 (FR FL RR RL)")

    p = _Parser(prog="quadskate", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("train", parents=[common], help="train a policy for one design")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("codesign", parents=[common], help="Bayesian optimization over designs")
    sp.add_argument("--resume", action="store_true", help="continue an existing evaluation log")
    sp.set_defaults(func=cmd_codesign)

    sp = sub.add_parser("sweep-direction", parents=[common], help="directional CoT table")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--speed", type=float, default=1.5)
    sp.add_argument("--n-angles", type=int, default=24)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("scenario", parents=[common], help="hockey-stop or self-align evaluation")
    sp.add_argument("name", choices=["hockey-stop", "self-align"])
    sp.add_argument("--checkpoint", required=True, help="policy (BaseFrame policy for hockey-stop)")
    sp.add_argument("--world-checkpoint", help="WorldFrame policy for hockey-stop")
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--speed", type=float, help="initial speed (hockey-stop) or command speed (self-align)")
    sp.add_argument("--launch", action="store_true", help="hockey-stop trials start at the initial speed")
    sp.set_defaults(func=cmd_scenario)

    sp = sub.add_parser("report", help="summaries and plot-ready CSVs for a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="report directory (default RUN_DIR/report)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, C.ConfigError, CheckpointError, MissingInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LogCorruptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level guard maps any failure to a runtime exit
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
