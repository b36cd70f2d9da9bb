"""Pose metrics, evaluation of trained bundles and feature-gap statistics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    CameraIntrinsics,
    PnPError,
    Pose,
    ProjectionError,
    denormalize_targets,
    project_points,
    rotation_error_deg,
    solve_pnp,
)
from .model import ModelBundle, forward_f, forward_g, predict_targets
from .scene import ObjectModel, SampleSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricThresholds:
    proj_px: float = 2.0
    add_frac: float = 0.10
    rot_deg: float = 5.0
    trans_units: float = 0.05

    def __post_init__(self):
        if min(self.proj_px, self.add_frac, self.rot_deg, self.trans_units) <= 0:
            raise ValueError("metric thresholds must be positive")


def metric_2d_projection(est: Pose, gt: Pose, points: np.ndarray, K: CameraIntrinsics,
                         tau_px: float = 2.0) -> tuple[float, bool]:
    d = np.linalg.norm(project_points(points, est, K) - project_points(points, gt, K), axis=1)
    err = float(d.mean())
    return err, err < tau_px


def metric_add(est: Pose, gt: Pose, points: np.ndarray, diameter: float,
               frac: float = 0.10) -> tuple[float, bool]:
    err = float(np.linalg.norm(est.transform(points) - gt.transform(points), axis=1).mean())
    return err, err < frac * diameter


def metric_5cm5deg(est: Pose, gt: Pose, th: MetricThresholds = MetricThresholds()) -> tuple[float, float, bool]:
    rot = rotation_error_deg(est.R, gt.R)
    trans = float(np.linalg.norm(est.t - gt.t))
    return rot, trans, rot < th.rot_deg and trans < th.trans_units


def success_curve(errors: Sequence[float], distances: Sequence[float]) -> list[float]:
    """Fraction of frames whose worst keypoint error is below each distance."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("success curve needs at least one frame")
    if np.any(e < 0):
        raise ValueError("keypoint errors must be non-negative")
    return [float(np.count_nonzero(e < d)) / e.size for d in distances]


DEFAULT_DISTANCES = tuple(float(d) for d in np.linspace(0.0, 0.5, 26))


@dataclass
class MetricReport:
    regime: str = ""
    n_real_used: int = 0
    seed: int = 0
    n_frames: int = 0
    proj2d_rate: float = math.nan
    pose6d_rate: float = math.nan
    cm_deg_rate: float = math.nan
    mean_corner_reproj_px: float = math.nan
    mean_3d_error_units: float = math.nan
    pnp_failures: int = 0
    success_curve: list = field(default_factory=list)
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)

    SCALARS = ("proj2d_rate", "pose6d_rate", "cm_deg_rate", "mean_corner_reproj_px",
               "mean_3d_error_units", "pnp_failures", "n_frames")

    def rows(self) -> list[tuple]:
        out = [(self.regime, self.n_real_used, self.seed, k, getattr(self, k)) for k in self.SCALARS]
        th = asdict(self.thresholds)
        out += [(self.regime, self.n_real_used, self.seed, f"threshold.{k}", v) for k, v in th.items()]
        return out


def evaluate_bundle(bundle: ModelBundle, test: SampleSet, K: CameraIntrinsics, obj: ObjectModel,
                    thresholds: MetricThresholds = MetricThresholds(), *, regime: str = "",
                    n_real_used: int = 0, seed: int = 0, use_mapping: bool = True,
                    z_ref: float | None = None, distances: Sequence[float] = DEFAULT_DISTANCES,
                    surface_per_face: int = 16) -> MetricReport:
    """Score a bundle on a test set; PnP failures count as misses on every rate."""
    n = len(test)
    report = MetricReport(regime, n_real_used, seed, n, thresholds=thresholds)
    if n == 0:
        return report
    preds = predict_targets(bundle, test.images, use_mapping)
    corners = obj.corners.points
    if bundle.spec.head_mode == "keypoint3d24":
        if z_ref is None:
            raise ValueError("keypoint3d evaluation needs z_ref")
        errs = np.empty(n)
        worst = np.empty(n)
        for i in range(n):
            gt = test.pose(i).transform(corners)
            d = np.linalg.norm(preds[i].reshape(8, 3) * z_ref - gt, axis=1)
            errs[i], worst[i] = d.mean(), d.max()
        report.mean_3d_error_units = float(errs.mean())
        report.success_curve = list(zip(distances, success_curve(worst, distances)))
        return report

    points = obj.surface_points(surface_per_face)
    hits = np.zeros(3, dtype=int)
    corner_err = np.empty(n)
    for i in range(n):
        gt = test.pose(i)
        uv = denormalize_targets(preds[i], K)
        corner_err[i] = np.linalg.norm(uv - denormalize_targets(test.targets[i], K), axis=1).mean()
        try:
            est = solve_pnp(corners, uv, K)
            _, ok2d = metric_2d_projection(est, gt, points, K, thresholds.proj_px)
            _, ok6d = metric_add(est, gt, points, obj.diameter, thresholds.add_frac)
            _, _, okcm = metric_5cm5deg(est, gt, thresholds)
        except (PnPError, ProjectionError) as exc:
            log.debug("frame %d: %s", i, exc)
            report.pnp_failures += 1
            continue
        hits += (ok2d, ok6d, okcm)
    report.proj2d_rate, report.pose6d_rate, report.cm_deg_rate = (float(h) / n for h in hits)
    report.mean_corner_reproj_px = float(corner_err.mean())
    return report


def mean_corner_error_px(bundle: ModelBundle, test: SampleSet, K: CameraIntrinsics,
                         use_mapping: bool = True) -> float:
    preds = predict_targets(bundle, test.images, use_mapping)
    d = [np.linalg.norm(denormalize_targets(p, K) - denormalize_targets(t, K), axis=1).mean()
         for p, t in zip(preds, test.targets)]
    return float(np.mean(d))


# -- feature gap ---------------------------------------------------------------------

@dataclass
class FeatureGapReport:
    mu_before: float
    sigma_before: float
    mu_after: float
    sigma_after: float
    n_pairs: int
    before: np.ndarray = field(repr=False)
    after: np.ndarray = field(repr=False)

    @property
    def reduction(self) -> float:
        return self.mu_before - self.mu_after


def feature_gap_stats(bundle: ModelBundle, real: SampleSet, paired: SampleSet,
                      n_pairs: int | None = None) -> FeatureGapReport:
    """Coefficient-wise |f(x_s) - f(x_r)| before and |f(x_s) - g(f(x_r))| after mapping."""
    if len(real) == 0 or len(real) != len(paired):
        raise ValueError("need at least one aligned real/synthetic pair")
    n = len(real) if n_pairs is None else min(n_pairs, len(real))
    fr = forward_f(bundle, real.images[:n])
    fs = forward_f(bundle, paired.images[:n])
    before = np.abs(fs - fr)
    after = np.abs(fs - forward_g(bundle, fr))
    return FeatureGapReport(float(before.mean()), float(before.std()), float(after.mean()),
                            float(after.std()), n, before, after)


def _grid_shape(d: int) -> tuple[int, int]:
    rows = int(math.isqrt(d))
    while d % rows:
        rows -= 1
    return rows, d // rows


def export_heatmap(values: np.ndarray, path, vmin: float | None = None, vmax: float | None = None) -> tuple[int, int]:
    """Write a D-vector as an 8-bit binary PGM on the most-square grid.

    The normalization range defaults to the array's own min/max and is
    recorded in a ``<path>.txt`` sidecar.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    rows, cols = _grid_shape(v.size)
    lo = float(v.min()) if vmin is None else float(vmin)
    hi = float(v.max()) if vmax is None else float(vmax)
    scale = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    pix = np.clip(np.round(scale * 255.0), 0, 255).astype(np.uint8).reshape(rows, cols)
    path = Path(path)
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes())
    Path(str(path) + ".txt").write_text(f"min={lo!r} max={hi!r}\n")
    return rows, cols


def export_heatmap_pair(before: np.ndarray, after: np.ndarray, out_dir, stem: str) -> tuple[Path, Path]:
    """Before/after heatmaps normalized on the before array's range."""
    out_dir = Path(out_dir)
    lo, hi = float(np.min(before)), float(np.max(before))
    pb, pa = out_dir / f"{stem}_before.pgm", out_dir / f"{stem}_after.pgm"
    export_heatmap(before, pb, lo, hi)
    export_heatmap(after, pa, lo, hi)
    return pb, pa


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=rows * cols).reshape(rows, cols)


# -- CSV -------------------------------------------------------------------------------

def write_metric_csv(path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime", "n_real", "seed", "metric", "value"])
        for r in reports:
            w.writerows(r.rows())


def write_curve_csv(path, curve: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["distance", "fraction"])
        w.writerows(curve)


def write_gap_csv(path, rows: Sequence[tuple[str, FeatureGapReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "n_pairs", "mu_before", "sigma_before", "mu_after", "sigma_after"])
        for label, g in rows:
            w.writerow([label, g.n_pairs, g.mu_before, g.sigma_before, g.mu_after, g.sigma_after])
