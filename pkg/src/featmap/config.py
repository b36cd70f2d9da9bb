"""Flat ``key=value`` run configuration shared by every CLI verb.

One key per line, ``#`` starts a comment, dotted keys namespace the
settings.  Unknown keys and unparsable values are errors.  ``to_text`` emits
every key in a fixed order so a resolved config round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .evaluation import DEFAULT_DISTANCES, MetricThresholds
from .geometry import CameraIntrinsics
from .model import ModelSpec
from .scene import ConfigError, DatasetConfig, DomainParams, ObjectModel, SceneConfig
from .training import TrainConfig


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


KEYS: dict[str, Key] = {
    "seed": Key(int, 0, "master seed"),
    "data.n_synth": Key(int, 20_000),
    "data.n_real": Key(int, 200),
    "data.n_test": Key(int, 1000, "real and synthetic test samples each"),
    "data.train": Key(str, "train.smds", "relative paths resolve against --out"),
    "data.test": Key(str, "test.smds"),
    "image.width": Key(int, 64),
    "image.height": Key(int, 64),
    "camera.fx": Key(float, 120.0),
    "camera.fy": Key(float, 120.0),
    "camera.cx": Key(float, 32.0),
    "camera.cy": Key(float, 32.0),
    "scene.z_min": Key(float, 2.0),
    "scene.z_max": Key(float, 3.5),
    "scene.inplane_deg": Key(float, 45.0),
    "corrupt.blur_min": Key(float, 0.5),
    "corrupt.blur_max": Key(float, 1.5),
    "corrupt.noise_sigma": Key(float, 0.03),
    "corrupt.gamma_min": Key(float, 0.8),
    "corrupt.gamma_max": Key(float, 1.25),
    "corrupt.vignette": Key(float, 0.3),
    "corrupt.dropout": Key(float, 0.02),
    "model.feature_dim": Key(int, 128),
    "model.head_mode": Key(str, "corners16"),
    "model.checkpoint": Key(str, "model.ckpt"),
    "train.regime": Key(str, "ours"),
    "train.beta": Key(float, 1.0),
    "train.gamma": Key(float, 0.2),
    "train.lr": Key(float, 1e-3),
    "train.pretrain_epochs": Key(int, 5),
    "train.joint_epochs": Key(int, 30),
    "train.n_s_per_batch": Key(int, 32),
    "train.n_r_per_batch": Key(int, 8),
    "eval.proj_px": Key(float, 2.0),
    "eval.add_frac": Key(float, 0.10),
    "eval.rot_deg": Key(float, 5.0),
    "eval.trans_units": Key(float, 0.05),
    "eval.distances": Key(_float_list, DEFAULT_DISTANCES),
    "eval.checkpoints": Key(lambda t: tuple(p for p in t.split(",") if p), (), "defaults to model.checkpoint"),
    "report.seeds": Key(_int_list, (0,)),
    "report.n_real_sweep": Key(_int_list, (25, 50, 100, 200)),
    "report.gamma_sweep": Key(_float_list, (0.0, 0.2)),
    "report.pairs": Key(int, 4, "pairs exported as heatmaps"),
    "report.bench_reps": Key(int, 200),
    "report.bench_warmup": Key(int, 20),
    "report.cache": Key(str, "", "checkpoint cache directory for sweeps; empty disables"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v.default for k, v in KEYS.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw!r}")
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v.strip(), f"{origin}:{lineno}"))
        return cls().updated(pairs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, str(path))

    def with_overrides(self, items: Iterable[str]) -> "RunConfig":
        pairs = []
        for item in items:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs.append((k.strip(), v.strip(), "--set"))
        return self.updated(pairs)

    def updated(self, pairs: Iterable[tuple]) -> "RunConfig":
        values = dict(self.values)
        for item in pairs:
            key, text = item[0], item[1]
            where = item[2] if len(item) > 2 else key
            if key not in KEYS:
                raise ConfigError(f"{where}: unknown key {key!r}")
            try:
                values[key] = KEYS[key].parse(text)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
        cfg = RunConfig(values)
        cfg.validate()
        return cfg

    def replace(self, **kv) -> "RunConfig":
        """Programmatic update; keys use ``__`` for dots (``train__gamma``)."""
        values = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = v
        cfg = RunConfig(values)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in KEYS)

    def validate(self) -> None:
        try:
            self.train_config()
            self.dataset_config()
            self.model_spec()
            self.thresholds()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        v = self.values
        for k in ("data.n_synth", "data.n_real", "data.n_test"):
            if v[k] < 0:
                raise ConfigError(f"{k} must be non-negative")
        if v["report.pairs"] < 1 or v["report.bench_reps"] < 1 or v["report.bench_warmup"] < 0:
            raise ConfigError("report.pairs and report.bench_reps must be positive")

    # -- typed views --------------------------------------------------------------

    def camera(self) -> CameraIntrinsics:
        v = self.values
        return CameraIntrinsics(v["camera.fx"], v["camera.fy"], v["camera.cx"], v["camera.cy"],
                                v["image.width"], v["image.height"])

    def scene(self) -> SceneConfig:
        v = self.values
        return SceneConfig(camera=self.camera(), object=ObjectModel(),
                           depth_range=(v["scene.z_min"], v["scene.z_max"]), inplane_deg=v["scene.inplane_deg"])

    def domain(self) -> DomainParams:
        v = self.values
        return DomainParams(blur_sigma=(v["corrupt.blur_min"], v["corrupt.blur_max"]),
                            noise_sigma=v["corrupt.noise_sigma"],
                            gamma=(v["corrupt.gamma_min"], v["corrupt.gamma_max"]),
                            vignette=v["corrupt.vignette"], dropout=v["corrupt.dropout"])

    def dataset_config(self, stream: str = "train", seed: int | None = None) -> DatasetConfig:
        v = self.values
        n_s, n_r = (v["data.n_synth"], v["data.n_real"]) if stream == "train" else (v["data.n_test"],) * 2
        if v["scene.z_min"] <= 0 or v["scene.z_min"] >= v["scene.z_max"]:
            raise ConfigError("scene depth range must satisfy 0 < z_min < z_max")
        return DatasetConfig(n_synth=n_s, n_real=n_r, seed=v["seed"] if seed is None else seed,
                             head_mode=v["model.head_mode"], scene=self.scene(), domain=self.domain(),
                             stream=stream)

    def train_config(self, seed: int | None = None, **kw) -> TrainConfig:
        v = self.values
        base = dict(beta=v["train.beta"], gamma=v["train.gamma"], lr=v["train.lr"],
                    pretrain_epochs=v["train.pretrain_epochs"], joint_epochs=v["train.joint_epochs"],
                    n_s_per_batch=v["train.n_s_per_batch"], n_r_per_batch=v["train.n_r_per_batch"],
                    seed=v["seed"] if seed is None else seed, head_mode=v["model.head_mode"],
                    regime=v["train.regime"])
        base.update(kw)
        return TrainConfig(**base)

    def model_spec(self) -> ModelSpec:
        v = self.values
        return ModelSpec(v["model.feature_dim"], v["model.head_mode"], v["image.width"], v["image.height"])

    def thresholds(self) -> MetricThresholds:
        v = self.values
        return MetricThresholds(v["eval.proj_px"], v["eval.add_frac"], v["eval.rot_deg"], v["eval.trans_units"])
