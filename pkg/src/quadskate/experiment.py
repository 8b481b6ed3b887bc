"""Glue between a configuration and the inner/outer loops."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .bo import AcquisitionSchedule, CodesignResult, run_codesign
from .config import ExperimentConfig
from .ppo import TrainResult, save_checkpoint, train_policy


def train_design(cfg: ExperimentConfig, design, seed: int) -> TrainResult:
    return train_policy(np.asarray(design, dtype=float), cfg.task, cfg.reward, cfg.ppo, seed, params=cfg.sim)


def codesign_evaluator(cfg: ExperimentConfig, checkpoint_dir=None):
    """Evaluator for :func:`run_codesign`: train at the design, optionally keep the checkpoint."""
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    def evaluate(design, seed: int, iteration: int) -> dict:
        res = train_design(cfg, design.as_array(), seed)
        ref = None
        if ckdir is not None:
            name = f"iter_{iteration:04d}_{seed}.json"
            save_checkpoint(ckdir / name, res.params, {"iteration": iteration, "seed": seed,
                                                       "design": design.as_array().tolist(), "J": res.J})
            ref = f"{ckdir.name}/{name}"
        return {"J": res.J, "failed": res.failed, "checkpoint": ref,
                "info": {"steps": res.steps, "reason": res.reason}}

    return evaluate


def schedule_for(cfg: ExperimentConfig) -> AcquisitionSchedule:
    b = cfg.bo
    return AcquisitionSchedule.for_budget(b.budget, b.phase_fractions, b.beta_start, b.beta_end)


def codesign(cfg: ExperimentConfig, log_path=None, checkpoint_dir=None, timing_path=None) -> CodesignResult:
    return run_codesign(
        cfg.bo.mode, cfg.bo.budget, cfg.seed, codesign_evaluator(cfg, checkpoint_dir),
        log_path=log_path, schedule=schedule_for(cfg), n_starts=cfg.bo.n_starts,
        seeds_per_design=cfg.bo.seeds_per_design, timing_path=timing_path,
    )
