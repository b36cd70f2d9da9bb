"""Desk-scale training runs behind the ordering, ablation and gap criteria.

Every seed gets its own train/test data (20k synthetic, 200 real, 1000 real
and 1000 synthetic test frames).  Trained checkpoints are cached under
``FEATMAP_ACCEPT_CACHE`` (default ``<repo>/.acceptance_cache``); the cache key
includes a hash of the training code, so edits retrain automatically.
"""

from __future__ import annotations

import gc
import json
import logging
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from featmap.evaluation import evaluate_bundle, feature_gap_stats, mean_corner_error_px
from featmap.experiments import CheckpointCache, Runner
from featmap.model import ModelSpec
from featmap.scene import DatasetConfig, build_datasets
from featmap.training import TrainConfig

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("FEATMAP_ACCEPT_CACHE", ROOT / ".acceptance_cache"))
SEEDS = (0, 1, 2)
N_SYNTH, N_REAL, N_TEST = 20_000, 200, 1000
N_SWEEP = (25, 50, 100, 200)
# reduced epoch profile: see the decisions notes for the runtime budget
PROFILE = dict(pretrain_epochs=2, joint_epochs=6)

log = logging.getLogger("desk")


def gap_summary(gap) -> dict:
    """Pooled stats plus a paired significance test over per-pair mean gaps."""
    d = gap.before.mean(axis=1) - gap.after.mean(axis=1)
    se = float(d.std(ddof=1) / np.sqrt(len(d)))
    return {"mu_before": gap.mu_before, "mu_after": gap.mu_after, "sigma_before": gap.sigma_before,
            "sigma_after": gap.sigma_after, "reduction": gap.reduction, "t_stat": float(d.mean() / se)}


def run_seed(seed: int) -> dict:
    train = build_datasets(DatasetConfig(n_synth=N_SYNTH, n_real=N_REAL, seed=seed))
    test = build_datasets(DatasetConfig(n_synth=N_TEST, n_real=N_TEST, seed=seed, stream="test"))
    runner = Runner(train, ModelSpec(), CheckpointCache(CACHE))
    base = TrainConfig(seed=seed, **PROFILE)
    K = test.camera
    out: dict = {"seed": seed}

    def real_err(bundle):
        return mean_corner_error_px(bundle, test.real, K, use_mapping=True)

    t0 = time.perf_counter()
    b, recs = runner.train(replace(base, regime="synthetic_only"))
    out["synthetic_only"] = {"real": real_err(b), "synth": mean_corner_error_px(b, test.synth, K, False),
                             "train_seconds": sum(r.wall_seconds for r in recs)}
    for regime in ("mixed_no_mapping", "real_only"):
        b, _ = runner.train(replace(base, regime=regime))
        out[regime] = {"real": real_err(b)}
    b, _ = runner.train(replace(base, regime="ours"))
    rep = evaluate_bundle(b, test.real, K, test.object, regime="ours", n_real_used=N_REAL, seed=seed)
    out["ours"] = {"real": real_err(b), "proj2d": rep.proj2d_rate, "pose6d": rep.pose6d_rate,
                   "cm_deg": rep.cm_deg_rate, "pnp_failures": rep.pnp_failures,
                   "gap": gap_summary(feature_gap_stats(b, test.real, test.paired_synth))}
    b0, _ = runner.train(replace(base, regime="ours", gamma=0.0))
    out["ours_gamma0"] = {"real": real_err(b0), "gap": gap_summary(feature_gap_stats(b0, test.real, test.paired_synth))}
    out["sweep"] = {}
    for n in N_SWEEP:
        row = {}
        for regime in ("ours", "real_only"):
            if n == N_REAL:
                row[regime] = out[regime]["real"]
            else:
                bn, _ = runner.train(replace(base, regime=regime), n_real=n)
                row[regime] = real_err(bn)
        out["sweep"][n] = row
    out["seconds"] = time.perf_counter() - t0
    log.info("seed %d: %s", seed, json.dumps(out, default=float))
    del train, test, runner
    gc.collect()
    return out


def ours_bundle(seed: int = 0):
    """Trained regime-ours bundle plus the held-out test triplet for ``seed``."""
    train = build_datasets(DatasetConfig(n_synth=N_SYNTH, n_real=N_REAL, seed=seed))
    test = build_datasets(DatasetConfig(n_synth=N_TEST, n_real=N_TEST, seed=seed, stream="test"))
    b, _ = Runner(train, ModelSpec(), CheckpointCache(CACHE)).train(
        TrainConfig(seed=seed, regime="ours", **PROFILE))
    return b, test


def run_all() -> list[dict]:
    return [run_seed(s) for s in SEEDS]


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    for r in run_all():
        print(json.dumps(r, default=float), flush=True)
