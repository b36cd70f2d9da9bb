"""Command-line entry point: ``featmap gen-data | train | report``.

Exit codes: 0 success, 1 validation error (bad config, missing or mismatched
inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .diffcore import finite_diff_check
from .evaluation import (
    evaluate_bundle,
    export_heatmap_pair,
    feature_gap_stats,
    write_curve_csv,
    write_gap_csv,
    write_metric_csv,
)
from .experiments import CheckpointCache, Runner
from .geometry import PnPError, ProjectionError
from .model import CheckpointError, ModelBundle, init_model, predict_pose, read_checkpoint, write_checkpoint
from .scene import ConfigError, DatasetFormatError, DatasetTriplet, build_datasets, read_dataset, write_dataset
from .training import LossGraph, TrainingError, train_regime, write_epoch_log

log = logging.getLogger("featmap")

MODES = ("eval", "ablate_real", "ablate_gamma", "analyze_features", "gradcheck", "bench")


class ValidationError(Exception):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, cfg: RunConfig, command: str, inputs: dict[str, Path]) -> Path:
    """The resolved config followed by comment lines naming the inputs.

    Comments are ignored by the parser, so the manifest is itself a config.
    """
    lines = [f"# featmap {__version__} {command}", cfg.to_text().rstrip("\n")]
    for label, path in sorted(inputs.items()):
        lines.append(f"# input {label} {path.name} sha256={file_sha256(path)}")
    path = out / f"manifest_{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _resolve(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out / p


def _load_triplet(out: Path, cfg: RunConfig, key: str) -> tuple[DatasetTriplet, Path]:
    path = _resolve(out, cfg[key])
    if not path.is_file():
        raise ValidationError(f"dataset {path} not found; run gen-data first")
    try:
        t = read_dataset(path)
    except DatasetFormatError as exc:
        raise ValidationError(str(exc)) from None
    spec = cfg.model_spec()
    if (t.camera.width, t.camera.height) != (spec.width, spec.height):
        raise ValidationError(f"{path}: image size {t.camera.width}x{t.camera.height} does not match config "
                              f"{spec.width}x{spec.height}")
    if t.head_mode != spec.head_mode:
        raise ValidationError(f"{path}: head mode {t.head_mode} does not match config {spec.head_mode}")
    return t, path


def _load_bundle(path: Path, cfg: RunConfig) -> ModelBundle:
    if not path.is_file():
        raise ValidationError(f"checkpoint {path} not found; run train first")
    try:
        return read_checkpoint(path, cfg.model_spec())
    except CheckpointError as exc:
        raise ValidationError(str(exc)) from None


# -- verbs ------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for stream, key in (("train", "data.train"), ("test", "data.test")):
        t = build_datasets(cfg.dataset_config(stream))
        path = _resolve(out, cfg[key])
        write_dataset(path, t)
        paths[stream] = path
        print(f"{stream}: {len(t.synth)} synthetic, {len(t.real)} real, {len(t.paired_synth)} pairs -> {path}")
    write_manifest(out, cfg, "gen-data", paths)
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    triplet, data_path = _load_triplet(out, cfg, "data.train")
    tc = cfg.train_config()
    spec = cfg.model_spec()
    if tc.regime != "synthetic_only" and len(triplet.real) == 0:
        raise ValidationError(f"regime {tc.regime} needs real training samples; dataset has none")
    out.mkdir(parents=True, exist_ok=True)
    bundle = init_model(tc.seed, spec.feature_dim, spec.head_mode, spec.width, spec.height)
    bundle, records = train_regime(bundle, triplet, tc)
    ckpt = _resolve(out, cfg["model.checkpoint"])
    write_checkpoint(ckpt, bundle)
    write_epoch_log(ckpt.with_suffix(".epochs.csv"), records)
    write_manifest(out, cfg, "train", {"train": data_path})
    last = records[-1].losses if records else None
    print(f"trained regime {tc.regime} for {len(records)} epochs; final {last}; checkpoint {ckpt}")
    return 0


def _checkpoints(cfg: RunConfig, out: Path) -> list[Path]:
    names = cfg["eval.checkpoints"] or (cfg["model.checkpoint"],)
    return [_resolve(out, n) for n in names]


def _regime_of(ckpt: Path) -> str:
    """Regime recorded in the training manifest next to a checkpoint."""
    manifest = ckpt.parent / "manifest_train.txt"
    if manifest.is_file():
        try:
            return RunConfig.from_file(manifest)["train.regime"]
        except ConfigError:
            pass
    return "unknown"


def report_eval(cfg: RunConfig, out: Path) -> None:
    test, _ = _load_triplet(out, cfg, "data.test")
    reports = []
    for ckpt in _checkpoints(cfg, out):
        bundle = _load_bundle(ckpt, cfg)
        regime = _regime_of(ckpt)
        for domain, frames, use_g in (("real", test.real, True), ("synthetic", test.synth, False)):
            rep = evaluate_bundle(bundle, frames, test.camera, test.object, cfg.thresholds(),
                                  regime=f"{regime}/{domain}", n_real_used=cfg["data.n_real"], seed=cfg["seed"],
                                  use_mapping=use_g, z_ref=cfg.scene().z_ref, distances=cfg["eval.distances"])
            reports.append(rep)
            if rep.success_curve:
                write_curve_csv(out / f"curve_{ckpt.stem}_{domain}.csv", rep.success_curve)
    write_metric_csv(out / "metrics.csv", reports)


def _sweep_runner(cfg: RunConfig, out: Path, seed: int) -> tuple[Runner, DatasetTriplet]:
    c = cfg.replace(seed=seed)
    train = build_datasets(c.dataset_config("train"))
    test = build_datasets(c.dataset_config("test"))
    cache = CheckpointCache(_resolve(out, cfg["report.cache"]) if cfg["report.cache"] else None)
    return Runner(train, cfg.model_spec(), cache), test


def report_ablate_real(cfg: RunConfig, out: Path) -> None:
    sweep = cfg["report.n_real_sweep"]
    if not sweep:
        raise ValidationError("report.n_real_sweep is empty")
    if max(sweep) > cfg["data.n_real"]:
        raise ValidationError(f"sweep point {max(sweep)} exceeds data.n_real={cfg['data.n_real']}")
    reports = []
    for seed in cfg["report.seeds"]:
        runner, test = _sweep_runner(cfg, out, seed)
        for n in sweep:
            for regime in ("ours", "real_only"):
                bundle, _ = runner.train(cfg.train_config(seed=seed, regime=regime), n_real=n)
                reports.append(evaluate_bundle(bundle, test.real, test.camera, test.object, cfg.thresholds(),
                                               regime=regime, n_real_used=n, seed=seed,
                                               z_ref=cfg.scene().z_ref, distances=cfg["eval.distances"]))
    write_metric_csv(out / "ablate_real.csv", reports)


def report_ablate_gamma(cfg: RunConfig, out: Path) -> None:
    gammas = cfg["report.gamma_sweep"]
    if not gammas:
        raise ValidationError("report.gamma_sweep is empty")
    reports, gaps = [], []
    for seed in cfg["report.seeds"]:
        runner, test = _sweep_runner(cfg, out, seed)
        for gamma in gammas:
            bundle, _ = runner.train(cfg.train_config(seed=seed, regime="ours", gamma=gamma))
            rep = evaluate_bundle(bundle, test.real, test.camera, test.object, cfg.thresholds(),
                                  regime=f"ours/gamma={gamma!r}", n_real_used=cfg["data.n_real"], seed=seed,
                                  z_ref=cfg.scene().z_ref, distances=cfg["eval.distances"])
            reports.append(rep)
            gaps.append((f"gamma={gamma!r}/seed={seed}", feature_gap_stats(bundle, test.real, test.paired_synth)))
    write_metric_csv(out / "ablate_gamma.csv", reports)
    write_gap_csv(out / "ablate_gamma_gap.csv", gaps)


def report_analyze_features(cfg: RunConfig, out: Path) -> None:
    test, _ = _load_triplet(out, cfg, "data.test")
    rows = []
    for ckpt in _checkpoints(cfg, out):
        bundle = _load_bundle(ckpt, cfg)
        gap = feature_gap_stats(bundle, test.real, test.paired_synth)
        rows.append((ckpt.stem, gap))
        for i in range(min(cfg["report.pairs"], gap.n_pairs)):
            export_heatmap_pair(gap.before[i], gap.after[i], out, f"{ckpt.stem}_pair{i:03d}")
    write_gap_csv(out / "features.csv", rows)


def gradcheck_error(seed: int = 0) -> float:
    """Finite-difference check of the full objective on a micro-batch
    (2 synthetic images, 2 real/synthetic pairs, D=16, 8x8 images)."""
    bundle = init_model(seed, feature_dim=16, width=8, height=8)
    rng = np.random.default_rng(seed)
    for p in bundle.group("g"):
        p.value = 0.3 * rng.standard_normal(p.value.shape)
    batch = {"x_s": rng.random((2, 8, 8)), "y_s": rng.standard_normal((2, 16)),
             "x_r": rng.random((2, 8, 8)), "y_r": rng.standard_normal((2, 16)), "x_m": rng.random((2, 8, 8))}
    graph = LossGraph(bundle, "ours")
    return finite_diff_check(graph.root, graph.bindings(batch, 1.0, 0.2), eps=1e-5, max_coords=2500, seed=seed)


def report_gradcheck(cfg: RunConfig, out: Path) -> None:
    err = gradcheck_error(cfg["seed"])
    status = "ok" if err < 1e-3 else "FAILED"
    print(f"gradcheck max relative error {err:.3e} ({status}, tolerance 1e-3)")
    (out / "gradcheck.csv").write_text(f"metric,value\nmax_relative_error,{err!r}\n")
    if err >= 1e-3:
        raise TrainingError(f"gradient check failed: {err:.3e}")


def bench_predict_pose(bundle: ModelBundle, frames: np.ndarray, cfg: RunConfig, reps: int, warmup: int):
    K = cfg.camera()
    corners = cfg.scene().object.corners
    z_ref = cfg.scene().z_ref
    def one(image):
        try:
            predict_pose(bundle, image, K, corners, z_ref=z_ref)
            return 0
        except (PnPError, ProjectionError):
            return 1

    for i in range(warmup):
        one(frames[i % len(frames)])
    bundle.calls.clear()
    times, failures = [], 0
    for i in range(reps):
        t0 = time.perf_counter()
        failures += one(frames[i % len(frames)])
        times.append(time.perf_counter() - t0)
    per_frame = {k: v / reps for k, v in bundle.calls.items()}
    return 1e3 * np.asarray(times), per_frame, failures


def report_bench(cfg: RunConfig, out: Path) -> None:
    test, _ = _load_triplet(out, cfg, "data.test")
    frames = test.real.images if len(test.real) else test.synth.images
    if len(frames) == 0:
        raise ValidationError("test set has no frames to bench on")
    bundle = _load_bundle(_checkpoints(cfg, out)[0], cfg)
    ms, calls, failures = bench_predict_pose(bundle, frames, cfg, cfg["report.bench_reps"], cfg["report.bench_warmup"])
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows([("mean_ms", float(ms.mean())), ("min_ms", float(ms.min())), ("reps", len(ms)),
                   ("pnp_failures", failures)])
        w.writerows((f"calls_per_frame.{k}", v) for k, v in sorted(calls.items()))
    print(f"predict_pose: mean {ms.mean():.3f} ms, min {ms.min():.3f} ms over {len(ms)} frames; "
          f"calls per frame {dict(sorted(calls.items()))}")


REPORTS = {"eval": report_eval, "ablate_real": report_ablate_real, "ablate_gamma": report_ablate_gamma,
           "analyze_features": report_analyze_features, "gradcheck": report_gradcheck, "bench": report_bench}


def cmd_report(cfg: RunConfig, out: Path, mode: str) -> int:
    out.mkdir(parents=True, exist_ok=True)
    REPORTS[mode](cfg, out)
    return 0


# -- argument handling --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="featmap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"featmap {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="render train and test datasets")
    sub.add_parser("train", parents=[common], help="train one regime and write a checkpoint")
    rep = sub.add_parser("report", parents=[common], help="evaluate, sweep, analyze or bench")
    rep.add_argument("mode", choices=MODES)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(args.overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.verb == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.verb == "train":
            return cmd_train(cfg, args.out)
        return cmd_report(cfg, args.out, args.mode)
    except (ConfigError, ValidationError) as exc:
        print(f"featmap: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, DatasetFormatError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"featmap: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
