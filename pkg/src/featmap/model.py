"""Feature extractor f, real-to-synthetic feature mapper g and pose head h."""

from __future__ import annotations

import io
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .geometry import CameraIntrinsics, CornerSet, Pose, denormalize_targets, solve_pnp
from .scene import TARGET_DIMS, substream

CONV_CHANNELS = (8, 16, 32)
CHUNK = 256


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    feature_dim: int = 128
    head_mode: str = "corners16"
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature dimension must be at least 8")
        if self.head_mode not in TARGET_DIMS:
            raise ValueError(f"unknown head mode {self.head_mode!r}")

    @property
    def out_dim(self) -> int:
        return TARGET_DIMS[self.head_mode]

    @property
    def trunk_hw(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for _ in CONV_CHANNELS:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    @property
    def flat_dim(self) -> int:
        h, w = self.trunk_hw
        return h * w * CONV_CHANNELS[-1]

    def layers(self) -> list[tuple[str, tuple[int, ...]]]:
        """(parameter name, shape) in a fixed order."""
        D = self.feature_dim
        out = []
        cin = 1
        for k, cout in enumerate(CONV_CHANNELS, 1):
            out += [(f"f.conv{k}.w", (cout, 3, 3, cin)), (f"f.conv{k}.b", (cout,))]
            cin = cout
        out += [("f.fc1.w", (D, self.flat_dim)), ("f.fc1.b", (D,)),
                ("f.fc2.w", (D, D)), ("f.fc2.b", (D,))]
        for blk in (1, 2):
            for fc in (1, 2):
                out += [(f"g.block{blk}.fc{fc}.w", (D, D)), (f"g.block{blk}.fc{fc}.b", (D,))]
        out += [("h.fc.w", (self.out_dim, D)), ("h.fc.b", (self.out_dim,))]
        return out

    def descriptor(self) -> str:
        shapes = ";".join(f"{n}:{'x'.join(map(str, s))}" for n, s in self.layers())
        return (f"featmap-v1 image={self.width}x{self.height} D={self.feature_dim} "
                f"head={self.head_mode} layers={shapes}")

    @classmethod
    def from_descriptor(cls, text: str) -> "ModelSpec":
        try:
            fields = dict(tok.split("=", 1) for tok in text.split()[1:])
            w, h = map(int, fields["image"].split("x"))
            spec = cls(int(fields["D"]), fields["head"], w, h)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"unreadable architecture descriptor: {exc}") from None
        if spec.descriptor() != text:
            raise CheckpointError("architecture descriptor does not match its layer list")
        return spec

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layers())


@dataclass(eq=False)
class ModelBundle:
    spec: ModelSpec
    params: dict[str, dc.Parameter]
    calls: Counter = field(default_factory=Counter)
    _graphs: dict = field(default_factory=dict, repr=False)

    def group(self, prefix: str) -> list[dc.Parameter]:
        return [p for n, p in self.params.items() if n.startswith(prefix + ".")]

    def values(self) -> dict[str, np.ndarray]:
        return {n: p.value for n, p in self.params.items()}

    def copy(self) -> "ModelBundle":
        params = {n: dc.Parameter(n, p.value.copy(), p.m.copy(), p.v.copy(), p.step)
                  for n, p in self.params.items()}
        return ModelBundle(self.spec, params)

    def equals(self, other: "ModelBundle") -> bool:
        if self.spec != other.spec or list(self.params) != list(other.params):
            return False
        return all(np.array_equal(a.value, b.value) and np.array_equal(a.m, b.m)
                   and np.array_equal(a.v, b.v) and a.step == b.step
                   for a, b in zip(self.params.values(), other.params.values()))


def init_model(seed: int = 0, feature_dim: int = 128, head_mode: str = "corners16",
               width: int = 64, height: int = 64) -> ModelBundle:
    spec = ModelSpec(feature_dim, head_mode, width, height)
    rng = substream("init", seed)
    params = {}
    for name, shape in spec.layers():
        if name.endswith(".b") or (name.startswith("g.") and ".fc2." in name):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = dc.Parameter(name, value)
    return ModelBundle(spec, params)


# -- graph construction -------------------------------------------------------------

class Net:
    """Builds graphs over one shared set of parameter leaves."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.leaves: dict[str, dc.Node] = {}

    def p(self, name: str) -> dc.Node:
        if name not in self.leaves:
            self.leaves[name] = dc.param(name)
        return self.leaves[name]

    def fc(self, x, name):
        return dc.affine(x, self.p(name + ".w"), self.p(name + ".b"))

    def f(self, images: dc.Node) -> dc.Node:
        s = self.spec
        x = dc.reshape(images, (-1, s.height, s.width, 1))
        for k in range(1, len(CONV_CHANNELS) + 1):
            x = dc.relu(dc.conv2d(x, self.p(f"f.conv{k}.w"), self.p(f"f.conv{k}.b"), stride=2))
        x = dc.reshape(x, (-1, s.flat_dim))
        return self.fc(dc.relu(self.fc(x, "f.fc1")), "f.fc2")

    def g(self, feats: dc.Node) -> dc.Node:
        for blk in (1, 2):
            pre = f"g.block{blk}"
            feats = dc.add(feats, self.fc(dc.relu(self.fc(feats, pre + ".fc1")), pre + ".fc2"))
        return feats

    def h(self, feats: dc.Node) -> dc.Node:
        return self.fc(feats, "h.fc")


def _graph(bundle: ModelBundle, key: str):
    if key not in bundle._graphs:
        net = Net(bundle.spec)
        x = dc.leaf("x")
        root = {"f": net.f, "g": net.g, "h": net.h}[key](x)
        bundle._graphs[key] = root
    return bundle._graphs[key]


def _run(bundle: ModelBundle, key: str, x: np.ndarray, expected_tail: tuple) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != expected_tail:
        raise dc.ShapeError(f"forward_{key}", x.shape, (None, *expected_tail))
    root = _graph(bundle, key)
    bundle.calls[key] += 1
    binds = bundle.values()
    out = []
    for i in range(0, max(len(x), 1), CHUNK):
        binds["x"] = x[i:i + CHUNK]
        out.append(dc.forward_eval(root, binds).copy())
    return np.concatenate(out) if len(out) > 1 else out[0]


def forward_f(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    s = bundle.spec
    return _run(bundle, "f", images, (s.height, s.width))


def forward_g(bundle: ModelBundle, feats: np.ndarray) -> np.ndarray:
    return _run(bundle, "g", feats, (bundle.spec.feature_dim,))


def forward_h(bundle: ModelBundle, feats: np.ndarray) -> np.ndarray:
    return _run(bundle, "h", feats, (bundle.spec.feature_dim,))


def predict_targets(bundle: ModelBundle, images: np.ndarray, use_mapping: bool = True) -> np.ndarray:
    """h(g(f(x))) for real inputs, h(f(x)) with ``use_mapping=False``."""
    feats = forward_f(bundle, images)
    if use_mapping:
        feats = forward_g(bundle, feats)
    return forward_h(bundle, feats)


def targets_to_pose(y: np.ndarray, K: CameraIntrinsics, corners: CornerSet) -> Pose:
    return solve_pnp(corners.points, denormalize_targets(y, K), K)


def predict_pose(bundle: ModelBundle, image: np.ndarray, K: CameraIntrinsics, corners: CornerSet,
                 use_mapping: bool = True, z_ref: float | None = None):
    """Pose (corners16 head) or 24 camera-frame coordinates (keypoint3d head)."""
    y = predict_targets(bundle, np.asarray(image)[None], use_mapping)[0]
    if bundle.spec.head_mode == "corners16":
        return targets_to_pose(y, K, corners)
    if z_ref is None:
        raise ValueError("keypoint3d head needs z_ref")
    return y * z_ref


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"SMPC0001"


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def write_checkpoint(path, bundle: ModelBundle) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(bundle.params)))
    for name, p in bundle.params.items():
        buf.write(_pack_str(name))
        buf.write(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        for arr in (p.value, p.m, p.v):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        buf.write(struct.pack("<Q", p.step))
    buf.write(_pack_str(bundle.spec.descriptor()))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def read_checkpoint(path, expect: ModelSpec | None = None) -> ModelBundle:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape))
        arrays = [np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
                  for _ in range(3)]
        (step,) = r.unpack("<Q")
        params[name] = dc.Parameter(name, *arrays, step=step)
    spec = ModelSpec.from_descriptor(r.string())
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes")
    if expect is not None and expect != spec:
        raise CheckpointError(f"{path}: architecture mismatch: file has {spec}, expected {expect}")
    layers = spec.layers()
    if [n for n, _ in layers] != list(params) or any(params[n].value.shape != s for n, s in layers):
        raise CheckpointError(f"{path}: parameter shapes do not match the architecture descriptor")
    return ModelBundle(spec, params)
