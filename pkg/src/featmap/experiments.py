"""Regime runs with shared pretraining and an optional on-disk checkpoint cache.

Sweeps train many bundles on the same synthetic set, and every regime except
``real_only`` starts from the same pretraining run.  :class:`Runner` trains
each distinct configuration once.  Cache keys cover the data content, the
training configuration, the architecture and the source of every module that
influences training, so a stale entry can never be picked up.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore, geometry, model, scene, training
from .model import ModelBundle, ModelSpec, init_model, read_checkpoint, write_checkpoint
from .scene import DatasetTriplet, SampleSet
from .training import EpochRecord, LossBreakdown, TrainConfig, pretrain_synthetic, train_regime

log = logging.getLogger(__name__)

_TRAINING_MODULES = (diffcore, geometry, scene, model, training)


def code_fingerprint() -> str:
    h = hashlib.sha256()
    for mod in _TRAINING_MODULES:
        h.update(Path(mod.__file__).read_bytes())
    return h.hexdigest()


def sampleset_hash(s: SampleSet) -> str:
    h = hashlib.sha256()
    for arr in (s.images, s.poses, s.targets, s.domains, s.seeds):
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def triplet_hash(t: DatasetTriplet) -> str:
    h = hashlib.sha256()
    h.update(repr((t.camera, tuple(t.object.half_extents), t.head_mode)).encode())
    for s in (t.synth, t.real, t.paired_synth):
        h.update(sampleset_hash(s).encode())
    return h.hexdigest()


def with_real_subset(t: DatasetTriplet, n: int) -> DatasetTriplet:
    """The first ``n`` real samples and their pairs."""
    if n > len(t.real):
        raise scene.ConfigError(f"requested {n} real samples, dataset has {len(t.real)}")
    idx = np.arange(n)
    return DatasetTriplet(t.synth, t.real.subset(idx), t.paired_synth.subset(idx), t.camera, t.object, t.head_mode)


def _records_to_json(records: list[EpochRecord]) -> str:
    return json.dumps([{"epoch": r.epoch, "phase": r.phase, "losses": asdict(r.losses),
                        "wall_seconds": r.wall_seconds} for r in records])


def _records_from_json(text: str) -> list[EpochRecord]:
    return [EpochRecord(d["epoch"], d["phase"], LossBreakdown(**d["losses"]), d["wall_seconds"])
            for d in json.loads(text)]


class CheckpointCache:
    """Checkpoint plus epoch records per key; a ``None`` root keeps nothing."""

    def __init__(self, root=None):
        self.root = Path(root) if root else None
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(*parts) -> str:
        return hashlib.sha256(repr(parts).encode()).hexdigest()[:32]

    def load(self, key: str, spec: ModelSpec):
        if not self.root:
            return None
        ck, rec = self.root / f"{key}.ckpt", self.root / f"{key}.json"
        if not (ck.exists() and rec.exists()):
            return None
        return read_checkpoint(ck, spec), _records_from_json(rec.read_text())

    def store(self, key: str, bundle: ModelBundle, records: list[EpochRecord]) -> None:
        if not self.root:
            return
        tmp = self.root / f"{key}.ckpt.tmp"
        write_checkpoint(tmp, bundle)
        (self.root / f"{key}.json").write_text(_records_to_json(records))
        tmp.replace(self.root / f"{key}.ckpt")


@dataclass
class Runner:
    triplet: DatasetTriplet
    spec: ModelSpec
    cache: CheckpointCache = field(default_factory=CheckpointCache)
    _fp: str = field(default="", repr=False)
    _hashes: dict = field(default_factory=dict, repr=False)
    _pre: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._fp = code_fingerprint()

    def _hash(self, s: SampleSet) -> str:
        k = id(s)
        if k not in self._hashes:
            self._hashes[k] = (s, sampleset_hash(s))
        return self._hashes[k][1]

    def _fresh(self, cfg: TrainConfig) -> ModelBundle:
        s = self.spec
        return init_model(cfg.seed, s.feature_dim, s.head_mode, s.width, s.height)

    def pretrained(self, cfg: TrainConfig) -> tuple[ModelBundle, list[EpochRecord]]:
        key = CheckpointCache.key("pretrain", self._fp, self.spec.descriptor(), self._hash(self.triplet.synth),
                                  cfg.seed, cfg.lr, cfg.pretrain_epochs, cfg.n_s_per_batch)
        if key not in self._pre:
            hit = self.cache.load(key, self.spec)
            if hit is None:
                b = self._fresh(cfg)
                recs = pretrain_synthetic(b, self.triplet.synth, cfg)
                self.cache.store(key, b, recs)
                hit = (b, recs)
            self._pre[key] = hit
        return self._pre[key]

    def train(self, cfg: TrainConfig, n_real: int | None = None) -> tuple[ModelBundle, list[EpochRecord]]:
        t = self.triplet if n_real is None else with_real_subset(self.triplet, n_real)
        key = CheckpointCache.key("train", self._fp, self.spec.descriptor(), self._hash(t.synth),
                                  sampleset_hash(t.real), sampleset_hash(t.paired_synth), repr(cfg))
        hit = self.cache.load(key, self.spec)
        if hit is not None:
            log.info("cache hit for %s", cfg)
            return hit
        pre = self.pretrained(cfg) if cfg.regime != "real_only" else None
        b, recs = train_regime(self._fresh(cfg), t, cfg, pretrained=pre)
        self.cache.store(key, b, recs)
        return b, recs


def regime_config(base: TrainConfig, regime: str, **kw) -> TrainConfig:
    return replace(base, regime=regime, **kw)
