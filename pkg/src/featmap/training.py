"""Pose and feature-mapping losses, pretraining, joint training and baselines."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields, replace
from typing import Callable

import numpy as np

from . import diffcore as dc
from .model import ModelBundle, Net
from .scene import ConfigError, DatasetTriplet, SampleSet, substream

log = logging.getLogger(__name__)

REGIMES = ("ours", "synthetic_only", "real_only", "mixed_no_mapping")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1.0
    gamma: float = 0.2
    lr: float = 1e-3
    pretrain_epochs: int = 5
    joint_epochs: int = 30
    n_s_per_batch: int = 32
    n_r_per_batch: int = 8
    seed: int = 0
    head_mode: str = "corners16"
    regime: str = "ours"

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_s_per_batch < 1 or self.n_r_per_batch < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")


@dataclass(frozen=True)
class LossBreakdown:
    L_hS: float
    L_hR: float
    L_g: float
    total: float

    def as_row(self) -> list[float]:
        return [getattr(self, f.name) for f in fields(self)]


# -- loss graphs ------------------------------------------------------------------

def _sq_dist(a: dc.Node, b: dc.Node) -> dc.Node:
    """Batch mean of squared Euclidean row distances."""
    return dc.mean(dc.sum_(dc.square(dc.sub(a, b)), axis=1))


class LossGraph:
    """The composed objective for one training regime.

    Leaves: ``x_s``/``y_s`` (synthetic batch), ``x_r``/``y_r`` (real batch),
    ``x_m`` (synthetic images paired with ``x_r``), ``beta``, ``gamma``.
    """

    def __init__(self, bundle: ModelBundle, regime: str = "ours"):
        net = Net(bundle.spec)
        self.bundle = bundle
        self.regime = regime
        self.uses_g = regime == "ours"
        zero = dc.leaf("zero")
        parts = {"L_hS": zero, "L_hR": zero, "L_g": zero}
        if regime in ("ours", "synthetic_only", "mixed_no_mapping"):
            parts["L_hS"] = _sq_dist(net.h(net.f(dc.leaf("x_s"))), dc.leaf("y_s"))
        if regime in ("ours", "real_only", "mixed_no_mapping"):
            feats_r = net.f(dc.leaf("x_r"))
            mapped = net.g(feats_r) if self.uses_g else feats_r
            parts["L_hR"] = _sq_dist(net.h(mapped), dc.leaf("y_r"))
            if self.uses_g:
                parts["L_g"] = _sq_dist(mapped, net.f(dc.leaf("x_m")))
        total = dc.add(dc.add(parts["L_hS"], dc.mul(dc.leaf("beta"), parts["L_hR"])),
                       dc.mul(dc.leaf("gamma"), parts["L_g"]))
        self.parts = parts
        self.root = total
        self.param_names = sorted(net.leaves)

    def bindings(self, batch: dict, beta: float, gamma: float) -> dict:
        b = self.bundle.values()
        b.update(batch)
        b["beta"] = np.asarray(beta, dtype=np.float64)
        b["gamma"] = np.asarray(gamma, dtype=np.float64)
        b["zero"] = np.asarray(0.0)
        return b

    def evaluate(self, batch: dict, beta: float, gamma: float, grad: bool = True):
        binds = self.bindings(batch, beta, gamma)
        total = float(dc.forward_eval(self.root, binds))
        self.bundle.calls["f"] += sum(k in batch for k in ("x_s", "x_r", "x_m"))
        self.bundle.calls["h"] += sum(k in batch for k in ("x_s", "x_r"))
        if self.uses_g:
            self.bundle.calls["g"] += 1
        vals = {k: 0.0 if v.value is None or v.op == "leaf" else float(v.value) for k, v in self.parts.items()}
        br = LossBreakdown(vals["L_hS"], vals["L_hR"], vals["L_g"], total)
        grads = dc.backward_accumulate(self.root) if grad else None
        return br, grads


def make_batch(synth: SampleSet | None = None, s_idx=None, real: SampleSet | None = None, r_idx=None,
               paired: SampleSet | None = None) -> dict:
    batch = {}
    if synth is not None:
        batch["x_s"] = synth.images[s_idx].astype(np.float64)
        batch["y_s"] = synth.targets[s_idx]
    if real is not None:
        batch["x_r"] = real.images[r_idx].astype(np.float64)
        batch["y_r"] = real.targets[r_idx]
        if paired is not None:
            if not np.array_equal(real.poses[r_idx], paired.poses[r_idx]):
                raise ValueError("misaligned real/synthetic pairs")
            batch["x_m"] = paired.images[r_idx].astype(np.float64)
    return batch


def _eval_loss(bundle: ModelBundle, build: Callable[[Net], dc.Node], batch: dict) -> float:
    root = build(Net(bundle.spec))
    binds = bundle.values()
    binds.update(batch)
    return float(dc.forward_eval(root, binds))


def loss_synth(bundle: ModelBundle, synth: SampleSet) -> float:
    """Mean squared pose error of h(f(x)) on synthetic samples."""
    return _eval_loss(bundle, lambda net: _sq_dist(net.h(net.f(dc.leaf("x_s"))), dc.leaf("y_s")),
                      make_batch(synth, slice(None)))


def loss_real(bundle: ModelBundle, real: SampleSet) -> float:
    """Mean squared pose error of h(g(f(x))) on real samples."""
    return _eval_loss(bundle, lambda net: _sq_dist(net.h(net.g(net.f(dc.leaf("x_r")))), dc.leaf("y_r")),
                      make_batch(real=real, r_idx=slice(None)))


def loss_map(bundle: ModelBundle, real: SampleSet, paired: SampleSet) -> float:
    """Mean squared distance between mapped real features and paired synthetic features."""
    if len(real) != len(paired):
        raise ValueError("misaligned real/synthetic pairs")
    return _eval_loss(bundle, lambda net: _sq_dist(net.g(net.f(dc.leaf("x_r"))), net.f(dc.leaf("x_m"))),
                      make_batch(real=real, r_idx=slice(None), paired=paired))


def loss_total(bundle: ModelBundle, batch: dict, beta: float, gamma: float) -> LossBreakdown:
    br, _ = LossGraph(bundle, "ours").evaluate(batch, beta, gamma, grad=False)
    return br


def loss_gradients(bundle: ModelBundle, batch: dict, beta: float, gamma: float,
                   regime: str = "ours") -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Breakdown and gradient for every bundle parameter (zeros where unreachable)."""
    br, grads = LossGraph(bundle, regime).evaluate(batch, beta, gamma)
    full = {n: grads.get(n, np.zeros_like(p.value)) for n, p in bundle.params.items()}
    return br, full


# -- loops ----------------------------------------------------------------------------

StepHook = Callable[[int, LossBreakdown, dict], None]


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    losses: LossBreakdown
    wall_seconds: float


def _check_finite(br: LossBreakdown, where: str) -> None:
    if not np.isfinite(br.total):
        raise TrainingError(f"non-finite loss {br} at {where}")


def _epoch_perm(n: int, seed: int, phase: str, epoch: int) -> np.ndarray:
    return substream("batching", seed, phase, epoch).permutation(n)


def _mean_breakdown(rows: list[LossBreakdown], beta: float, gamma: float) -> LossBreakdown:
    a = np.array([r.as_row() for r in rows]).mean(axis=0)
    return LossBreakdown(*(float(v) for v in a))


def _train_params(bundle: ModelBundle, graph: LossGraph) -> list[dc.Parameter]:
    return [bundle.params[n] for n in graph.param_names]


def steps_per_epoch(n_synth: int, cfg: TrainConfig) -> int:
    return max(n_synth // cfg.n_s_per_batch, 1)


def pretrain_synthetic(bundle: ModelBundle, synth: SampleSet, cfg: TrainConfig,
                       epochs: int | None = None, first_epoch: int = 0,
                       hook: StepHook | None = None) -> list[EpochRecord]:
    """Synthetic-only training of f and h; g is not part of the graph."""
    if len(synth) == 0:
        raise ConfigError("pretraining needs a nonempty synthetic set")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    graph = LossGraph(bundle, "synthetic_only")
    params = _train_params(bundle, graph)
    B = min(cfg.n_s_per_batch, len(synth))
    spe = max(len(synth) // B, 1)
    records = []
    for epoch in range(first_epoch, first_epoch + epochs):
        t0 = time.perf_counter()
        perm = _epoch_perm(len(synth), cfg.seed, "synthetic", epoch)
        rows = []
        for step in range(spe):
            idx = perm[step * B:(step + 1) * B]
            br, grads = graph.evaluate(make_batch(synth, idx), 0.0, 0.0)
            _check_finite(br, f"epoch {epoch} step {step} synthetic indices {idx.tolist()}")
            dc.adam_step(params, grads, cfg.lr)
            rows.append(br)
            if hook:
                hook(step, br, grads)
        records.append(EpochRecord(epoch, "pretrain", _mean_breakdown(rows, 0.0, 0.0),
                                   time.perf_counter() - t0))
        log.info("pretrain epoch %d: %s", epoch, records[-1].losses)
    return records


def train_joint(bundle: ModelBundle, triplet: DatasetTriplet, cfg: TrainConfig, regime: str = "ours",
                epochs: int | None = None, hook: StepHook | None = None) -> list[EpochRecord]:
    """Joint training over synthetic and real batches.

    Each step draws ``n_s_per_batch`` synthetic samples without replacement
    within the epoch and ``n_r_per_batch`` real samples cyclically; the same
    real samples feed the real pose loss and, through their paired synthetic
    renders, the mapping loss.
    """
    synth, real, paired = triplet.synth, triplet.real, triplet.paired_synth
    if len(real) == 0:
        raise ConfigError(f"regime {regime} needs real training samples")
    if len(synth) == 0:
        raise ConfigError(f"regime {regime} needs synthetic training samples")
    epochs = cfg.joint_epochs if epochs is None else epochs
    graph = LossGraph(bundle, regime)
    params = _train_params(bundle, graph)
    B = min(cfg.n_s_per_batch, len(synth))
    spe = max(len(synth) // B, 1)
    real_order = substream("batching", cfg.seed, "real-order").permutation(len(real))
    cursor = 0
    records = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        perm = _epoch_perm(len(synth), cfg.seed, "joint", epoch)
        rows = []
        for step in range(spe):
            s_idx = perm[step * B:(step + 1) * B]
            r_idx = real_order[(cursor + np.arange(cfg.n_r_per_batch)) % len(real)]
            cursor = (cursor + cfg.n_r_per_batch) % len(real)
            batch = make_batch(synth, s_idx, real, r_idx, paired if graph.uses_g else None)
            br, grads = graph.evaluate(batch, cfg.beta, cfg.gamma)
            _check_finite(br, f"epoch {epoch} step {step} synthetic {s_idx.tolist()} real {r_idx.tolist()}")
            dc.adam_step(params, grads, cfg.lr)
            rows.append(br)
            if hook:
                hook(step, br, grads)
        records.append(EpochRecord(epoch, "joint", _mean_breakdown(rows, cfg.beta, cfg.gamma),
                                   time.perf_counter() - t0))
        log.info("joint epoch %d (%s): %s", epoch, regime, records[-1].losses)
    return records


def train_real_only(bundle: ModelBundle, real: SampleSet, cfg: TrainConfig, total_steps: int,
                    hook: StepHook | None = None) -> list[EpochRecord]:
    if len(real) == 0:
        raise ConfigError("regime real_only needs real training samples")
    graph = LossGraph(bundle, "real_only")
    params = _train_params(bundle, graph)
    B = min(cfg.n_r_per_batch, len(real))
    per_epoch = max(len(real) // B, 1)
    records, rows = [], []
    t0 = time.perf_counter()
    epoch, step_in_epoch = 0, 0
    perm = _epoch_perm(len(real), cfg.seed, "real", 0)
    for step in range(total_steps):
        idx = perm[step_in_epoch * B:(step_in_epoch + 1) * B]
        br, grads = graph.evaluate(make_batch(real=real, r_idx=idx), cfg.beta, 0.0)
        _check_finite(br, f"step {step} real indices {idx.tolist()}")
        dc.adam_step(params, grads, cfg.lr)
        rows.append(br)
        if hook:
            hook(step, br, grads)
        step_in_epoch += 1
        if step_in_epoch == per_epoch:
            records.append(EpochRecord(epoch, "real", _mean_breakdown(rows, cfg.beta, 0.0),
                                       time.perf_counter() - t0))
            rows, t0 = [], time.perf_counter()
            epoch += 1
            step_in_epoch = 0
            perm = _epoch_perm(len(real), cfg.seed, "real", epoch)
    if rows:
        records.append(EpochRecord(epoch, "real", _mean_breakdown(rows, cfg.beta, 0.0),
                                   time.perf_counter() - t0))
    return records


def total_step_budget(n_synth: int, cfg: TrainConfig) -> int:
    return (cfg.pretrain_epochs + cfg.joint_epochs) * steps_per_epoch(n_synth, cfg)


def train_regime(bundle: ModelBundle, triplet: DatasetTriplet, cfg: TrainConfig,
                 pretrained: tuple[ModelBundle, list[EpochRecord]] | None = None,
                 hook: StepHook | None = None) -> tuple[ModelBundle, list[EpochRecord]]:
    """Run ``cfg.regime`` under the common step budget.

    ``pretrained`` may carry the (bundle, records) result of
    :func:`pretrain_synthetic` on the same data and config, which lets several
    regimes share one pretraining run. The pretrained bundle is copied.
    """
    regime = cfg.regime
    if regime == "real_only":
        records = train_real_only(bundle, triplet.real, cfg, total_step_budget(len(triplet.synth), cfg), hook)
        return bundle, records
    if regime in ("ours", "mixed_no_mapping") and len(triplet.real) == 0:
        raise ConfigError(f"regime {regime} needs real training samples")
    if pretrained is not None:
        bundle = pretrained[0].copy()
        records = list(pretrained[1])
    else:
        records = pretrain_synthetic(bundle, triplet.synth, cfg, hook=hook)
    if regime == "synthetic_only":
        records += pretrain_synthetic(bundle, triplet.synth, cfg, epochs=cfg.joint_epochs,
                                      first_epoch=cfg.pretrain_epochs, hook=hook)
    else:
        records += train_joint(bundle, triplet, cfg, regime, hook=hook)
    return bundle, records


def train_baseline(regime: str, triplet: DatasetTriplet, cfg: TrainConfig, bundle: ModelBundle,
                   pretrained: tuple[ModelBundle, list[EpochRecord]] | None = None
                   ) -> tuple[ModelBundle, list[EpochRecord]]:
    if regime not in ("synthetic_only", "real_only", "mixed_no_mapping"):
        raise ValueError(f"{regime!r} is not a baseline regime")
    return train_regime(bundle, triplet, replace(cfg, regime=regime), pretrained)


def write_epoch_log(path, records: list[EpochRecord]) -> None:
    lines = ["epoch,L_hS,L_hR,L_g,total,wall_seconds"]
    for i, r in enumerate(records):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in r.losses.as_row()] + [f"{r.wall_seconds:.3f}"]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
