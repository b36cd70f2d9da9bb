"""Synthetic testbed: box renders, a corruption pipeline standing in for the
real domain, and the paired datasets built from them."""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (
    CameraIntrinsics,
    CornerSet,
    Pose,
    ProjectionError,
    corner_targets,
    keypoint3d_targets,
)

SYNTHETIC = 0
REAL = 1

HEAD_MODES = ("corners16", "keypoint3d24")
TARGET_DIMS = {"corners16": 16, "keypoint3d24": 24}

# quads as indices into CornerSet.points (sign order x, y, z), outward normal axis
FACES = (
    ((0, 1, 3, 2), (-1, 0, 0)),
    ((4, 6, 7, 5), (1, 0, 0)),
    ((0, 4, 5, 1), (0, -1, 0)),
    ((2, 3, 7, 6), (0, 1, 0)),
    ((0, 2, 6, 4), (0, 0, -1)),
    ((1, 5, 7, 3), (0, 0, 1)),
)
LIGHT_DIR = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
AMBIENT = 0.3
NEAR_PLANE = 0.1


class DatasetFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def substream(*keys) -> np.random.Generator:
    """Independent generator for a tuple of ints/strings."""
    words = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(frozen=True, eq=False)
class ObjectModel:
    half_extents: tuple = (0.4, 0.25, 0.15)
    albedos: tuple = (0.85, 0.3, 0.65, 0.2, 0.5, 0.75)

    def __post_init__(self):
        if len(self.albedos) != 6 or not all(0.2 <= a <= 0.9 for a in self.albedos):
            raise ConfigError("need 6 face albedos in [0.2, 0.9]")

    @property
    def corners(self) -> CornerSet:
        return CornerSet(self.half_extents)

    @property
    def diameter(self) -> float:
        return self.corners.diameter

    def surface_points(self, per_face: int = 16, seed: int = 0) -> np.ndarray:
        """Corners plus points sampled uniformly on each face."""
        rng = substream("surface", seed)
        h = np.asarray(self.half_extents)
        pts = [self.corners.points]
        for axis in range(3):
            for sign in (-1.0, 1.0):
                p = rng.uniform(-1.0, 1.0, size=(per_face, 3)) * h
                p[:, axis] = sign * h[axis]
                pts.append(p)
        return np.concatenate(pts)


@dataclass(frozen=True)
class BackgroundFamily:
    lattice: tuple[int, int]
    octaves: int
    low: tuple[float, float]
    span: tuple[float, float]


BACKGROUNDS = {
    SYNTHETIC: BackgroundFamily(lattice=(3, 6), octaves=2, low=(0.0, 0.3), span=(0.3, 0.7)),
    REAL: BackgroundFamily(lattice=(8, 14), octaves=3, low=(0.1, 0.4), span=(0.4, 0.6)),
}


@dataclass(frozen=True)
class DomainParams:
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 0.03
    gamma: tuple[float, float] = (0.8, 1.25)
    vignette: float = 0.3
    dropout: float = 0.02
    background: int = REAL

    def __post_init__(self):
        for lo, hi in (self.blur_sigma, self.gamma):
            if lo > hi:
                raise ConfigError("empty parameter range")
        if self.blur_sigma[0] < 0 or self.gamma[0] <= 0 or self.noise_sigma < 0 or self.vignette < 0:
            raise ConfigError("corruption parameters must be non-negative")
        if not 0 <= self.dropout <= 1:
            raise ConfigError("dropout probability must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "DomainParams":
        return cls(blur_sigma=(0.0, 0.0), noise_sigma=0.0, gamma=(1.0, 1.0), vignette=0.0, dropout=0.0)


@dataclass(frozen=True)
class SceneConfig:
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    object: ObjectModel = field(default_factory=ObjectModel)
    depth_range: tuple[float, float] = (2.0, 3.5)
    inplane_deg: float = 45.0
    center_fraction: float = 0.5

    @property
    def z_ref(self) -> float:
        return 0.5 * (self.depth_range[0] + self.depth_range[1])


# -- poses ----------------------------------------------------------------------

def sample_pose(seed, scene: SceneConfig | None = None) -> Pose:
    """Viewpoint uniform on the upper hemisphere, bounded in-plane rotation,
    object centre projecting inside the central part of the image."""
    scene = scene or SceneConfig()
    K = scene.camera
    rng = substream("pose", *np.atleast_1d(seed).tolist())
    sin_elev = rng.uniform(0.0, 1.0)
    azim = rng.uniform(0.0, 2.0 * np.pi)
    inplane = np.deg2rad(rng.uniform(-scene.inplane_deg, scene.inplane_deg))
    cos_elev = np.sqrt(1.0 - sin_elev**2)
    view = np.array([cos_elev * np.cos(azim), cos_elev * np.sin(azim), sin_elev])
    forward = -view
    up = np.array([0.0, 0.0, 1.0]) if sin_elev < 0.999 else np.array([np.cos(azim), np.sin(azim), 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    c, s = np.cos(inplane), np.sin(inplane)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ R

    half = scene.center_fraction / 2.0
    z = rng.uniform(*scene.depth_range)
    u = K.cx + rng.uniform(-half, half) * K.width
    v = K.cy + rng.uniform(-half, half) * K.height
    t = np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
    return Pose(R, t)


# -- rendering --------------------------------------------------------------------

def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def render_background(seed: int, family: int, width: int, height: int) -> np.ndarray:
    fam = BACKGROUNDS[family]
    rng = substream("background", family, int(seed))
    img = np.zeros((height, width))
    amp, total = 1.0, 0.0
    cells = int(rng.integers(fam.lattice[0], fam.lattice[1] + 1))
    for _ in range(fam.octaves):
        grid = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
        ys = (np.arange(height) + 0.5) / height * cells
        xs = (np.arange(width) + 0.5) / width * cells
        y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
        ty, tx = _smooth(ys - y0)[:, None], _smooth(xs - x0)[None, :]
        g00, g01 = grid[np.ix_(y0, x0)], grid[np.ix_(y0, x0 + 1)]
        g10, g11 = grid[np.ix_(y0 + 1, x0)], grid[np.ix_(y0 + 1, x0 + 1)]
        layer = (g00 * (1 - tx) + g01 * tx) * (1 - ty) + (g10 * (1 - tx) + g11 * tx) * ty
        img += amp * layer
        total += amp
        amp *= 0.5
        cells *= 2
    img /= total
    low = rng.uniform(*fam.low)
    span = rng.uniform(*fam.span)
    return np.clip(low + span * img, 0.0, 1.0)


def face_intensities(pose: Pose, model: ObjectModel) -> np.ndarray:
    normals = np.array([n for _, n in FACES], dtype=np.float64) @ pose.R.T
    lambert = np.maximum(0.0, normals @ LIGHT_DIR)
    return np.asarray(model.albedos) * (AMBIENT + (1.0 - AMBIENT) * lambert)


def rasterize(pose: Pose, model: ObjectModel, K: CameraIntrinsics, background: np.ndarray) -> np.ndarray:
    """Z-buffered flat-shaded triangles over ``background``; pixel (i, j) is
    sampled at its centre (j + 0.5, i + 0.5)."""
    pts = model.corners.points
    Xc = pose.transform(pts)
    if np.any(Xc[:, 2] <= NEAR_PLANE):
        raise ProjectionError("box intersects the near plane")
    uv = np.stack([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy], axis=1)
    inv_z = 1.0 / Xc[:, 2]
    shade = face_intensities(pose, model)
    img = background.copy()
    zbuf = np.zeros_like(img)
    h, w = img.shape
    for f, (quad, _) in enumerate(FACES):
        for tri in ((quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])):
            p = uv[list(tri)]
            area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
            if abs(area) < 1e-12:
                continue
            j0 = max(int(np.floor(p[:, 0].min() - 0.5)), 0)
            j1 = min(int(np.ceil(p[:, 0].max() - 0.5)), w - 1)
            i0 = max(int(np.floor(p[:, 1].min() - 0.5)), 0)
            i1 = min(int(np.ceil(p[:, 1].max() - 0.5)), h - 1)
            if j0 > j1 or i0 > i1:
                continue
            px = np.arange(j0, j1 + 1) + 0.5
            py = (np.arange(i0, i1 + 1) + 0.5)[:, None]
            w0 = ((p[1, 0] - px) * (p[2, 1] - py) - (p[2, 0] - px) * (p[1, 1] - py)) / area
            w1 = ((p[2, 0] - px) * (p[0, 1] - py) - (p[0, 0] - px) * (p[2, 1] - py)) / area
            w2 = 1.0 - w0 - w1
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            iz = w0 * inv_z[tri[0]] + w1 * inv_z[tri[1]] + w2 * inv_z[tri[2]]
            region = zbuf[i0:i1 + 1, j0:j1 + 1]
            hit = inside & (iz > region)
            region[hit] = iz[hit]
            img[i0:i1 + 1, j0:j1 + 1][hit] = shade[f]
    return img


def render_clean(pose: Pose, model: ObjectModel, K: CameraIntrinsics, background_seed: int,
                 family: int = SYNTHETIC) -> np.ndarray:
    bg = render_background(background_seed, family, K.width, K.height)
    return np.clip(rasterize(pose, model, K, bg), 0.0, 1.0)


def apply_domain_transform(image: np.ndarray, params: DomainParams, seed) -> np.ndarray:
    """Blur, gamma, vignette, additive noise, dropout, clamp; in that order."""
    rng = substream("corrupt", *np.atleast_1d(seed).tolist())
    img = np.asarray(image, dtype=np.float64)
    sigma = rng.uniform(*params.blur_sigma)
    gamma = rng.uniform(*params.gamma)
    if sigma > 0:
        img = gaussian_filter(img, sigma, mode="nearest")
    img = np.clip(img, 0.0, 1.0) ** gamma
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy + 0.5 - h / 2.0) ** 2 + (xx + 0.5 - w / 2.0) ** 2) / ((h / 2.0) ** 2 + (w / 2.0) ** 2)
    img = img * (1.0 - params.vignette * r2)
    img = img + params.noise_sigma * rng.standard_normal(img.shape)
    img = np.where(rng.random(img.shape) < params.dropout, 0.0, img)
    return np.clip(img, 0.0, 1.0)


# -- datasets -------------------------------------------------------------------

@dataclass(eq=False)
class Sample:
    image: np.ndarray
    pose: Pose
    target: np.ndarray
    domain: int
    background_seed: int


class SampleSet:
    """Column store for a list of samples; indexing yields :class:`Sample` views."""

    def __init__(self, images: np.ndarray, poses: np.ndarray, targets: np.ndarray,
                 domains: np.ndarray, seeds: np.ndarray):
        self.images = np.asarray(images, dtype=np.float32)
        self.poses = np.asarray(poses, dtype=np.float64).reshape(-1, 12)
        self.targets = np.asarray(targets, dtype=np.float64)
        self.domains = np.asarray(domains, dtype=np.uint8)
        self.seeds = np.asarray(seeds, dtype=np.uint64)
        n = len(self.images)
        if not (len(self.poses) == len(self.targets) == len(self.domains) == len(self.seeds) == n):
            raise DatasetFormatError("sample columns have different lengths")

    @classmethod
    def empty(cls, width: int, height: int, target_dim: int) -> "SampleSet":
        return cls(np.zeros((0, height, width)), np.zeros((0, 12)), np.zeros((0, target_dim)),
                   np.zeros(0), np.zeros(0))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "SampleSet":
        return cls(np.stack([s.image for s in samples]), np.stack([s.pose.as_array() for s in samples]),
                   np.stack([s.target for s in samples]), np.array([s.domain for s in samples]),
                   np.array([s.background_seed for s in samples], dtype=np.uint64))

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], Pose.from_array(self.poses[i]), self.targets[i],
                      int(self.domains[i]), int(self.seeds[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.images[idx], self.poses[idx], self.targets[idx], self.domains[idx], self.seeds[idx])

    def pose(self, i: int) -> Pose:
        return Pose.from_array(self.poses[i])

    def equals(self, other: "SampleSet") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("images", "poses", "targets", "domains", "seeds"))


@dataclass(eq=False)
class DatasetTriplet:
    synth: SampleSet
    real: SampleSet
    paired_synth: SampleSet
    camera: CameraIntrinsics
    object: ObjectModel
    head_mode: str = "corners16"

    @property
    def target_dim(self) -> int:
        return TARGET_DIMS[self.head_mode]

    def check_pairing(self) -> None:
        if len(self.real) != len(self.paired_synth):
            raise DatasetFormatError("real and paired sets differ in length")
        if not np.array_equal(self.real.poses, self.paired_synth.poses):
            raise DatasetFormatError("paired samples do not share poses")
        if not np.array_equal(self.real.seeds, self.paired_synth.seeds):
            raise DatasetFormatError("paired samples do not share background seeds")
        if np.any(self.paired_synth.domains != SYNTHETIC):
            raise DatasetFormatError("paired samples must be synthetic")

    def equals(self, other: "DatasetTriplet") -> bool:
        return (self.camera == other.camera and self.head_mode == other.head_mode
                and np.array_equal(self.object.half_extents, other.object.half_extents)
                and self.synth.equals(other.synth) and self.real.equals(other.real)
                and self.paired_synth.equals(other.paired_synth))


@dataclass(frozen=True)
class DatasetConfig:
    n_synth: int = 20_000
    n_real: int = 200
    seed: int = 0
    head_mode: str = "corners16"
    scene: SceneConfig = field(default_factory=SceneConfig)
    domain: DomainParams = field(default_factory=DomainParams)
    stream: str = "train"

    def __post_init__(self):
        if self.n_synth < 0 or self.n_real < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"unknown head mode {self.head_mode!r}")


def make_target(pose: Pose, scene: SceneConfig, head_mode: str) -> np.ndarray:
    if head_mode == "corners16":
        return corner_targets(pose, scene.object.corners, scene.camera)
    return keypoint3d_targets(pose, scene.object.corners, scene.z_ref)


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63, dtype=np.int64))


def _build_split(cfg: DatasetConfig, split: str, n: int) -> tuple[list[Sample], list[Sample]]:
    """Samples of one split; for the real split also their clean pairs."""
    scene, K = cfg.scene, cfg.scene.camera
    main, pairs = [], []
    label = f"{cfg.stream}/{split}"
    for i in range(n):
        rng = substream("dataset", cfg.seed, label, i)
        pose = sample_pose([cfg.seed, zlib.crc32(label.encode()), i], scene)
        bg_seed = _draw_seed(rng)
        target = make_target(pose, scene, cfg.head_mode)
        if split == "synth":
            img = render_clean(pose, scene.object, K, bg_seed, SYNTHETIC)
            main.append(Sample(img.astype(np.float32), pose, target, SYNTHETIC, bg_seed))
        else:
            clean = render_clean(pose, scene.object, K, bg_seed, cfg.domain.background)
            real = apply_domain_transform(clean, cfg.domain, _draw_seed(rng))
            main.append(Sample(real.astype(np.float32), pose, target, REAL, bg_seed))
            pairs.append(Sample(clean.astype(np.float32), pose, target, SYNTHETIC, bg_seed))
    return main, pairs


def build_datasets(cfg: DatasetConfig) -> DatasetTriplet:
    K = cfg.scene.camera
    dim = TARGET_DIMS[cfg.head_mode]

    def to_set(samples):
        return SampleSet.from_samples(samples) if samples else SampleSet.empty(K.width, K.height, dim)

    synth, _ = _build_split(cfg, "synth", cfg.n_synth)
    real, paired = _build_split(cfg, "real", cfg.n_real)
    triplet = DatasetTriplet(to_set(synth), to_set(real), to_set(paired), K, cfg.scene.object, cfg.head_mode)
    triplet.check_pairing()
    return triplet


# -- file format ------------------------------------------------------------------

MAGIC = b"SMDS0001"
_HEADER = struct.Struct("<8s6I4d3d")


def _record_dtype(target_dim: int, n_pixels: int) -> np.dtype:
    return np.dtype([("tag", "u1"), ("seed", "<u8"), ("pose", "<f8", (12,)),
                     ("target", "<f8", (target_dim,)), ("pixels", "<f4", (n_pixels,))])


def write_dataset(path, triplet: DatasetTriplet) -> None:
    K = triplet.camera
    dim = triplet.target_dim
    head = _HEADER.pack(MAGIC, K.width, K.height, len(triplet.synth), len(triplet.real), dim,
                        HEAD_MODES.index(triplet.head_mode), K.fx, K.fy, K.cx, K.cy,
                        *map(float, triplet.object.half_extents))
    dtype = _record_dtype(dim, K.width * K.height)
    buf = io.BytesIO()
    buf.write(head)
    for s in (triplet.synth, triplet.real, triplet.paired_synth):
        rec = np.zeros(len(s), dtype=dtype)
        rec["tag"] = s.domains
        rec["seed"] = s.seeds
        rec["pose"] = s.poses
        rec["target"] = s.targets
        rec["pixels"] = s.images.reshape(len(s), K.width * K.height)
        buf.write(rec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_dataset(path) -> DatasetTriplet:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:8] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic")
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    _, w, h, n_s, n_r, dim, mode, fx, fy, cx, cy, hx, hy, hz = _HEADER.unpack_from(data)
    if mode >= len(HEAD_MODES) or TARGET_DIMS[HEAD_MODES[mode]] != dim:
        raise DatasetFormatError(f"{path}: head mode {mode} inconsistent with target dim {dim}")
    dtype = _record_dtype(dim, w * h)
    counts = (n_s, n_r, n_r)
    expected = _HEADER.size + dtype.itemsize * sum(counts)
    if len(data) < expected:
        raise DatasetFormatError(f"{path}: truncated ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise DatasetFormatError(f"{path}: {len(data) - expected} trailing bytes; shape mismatch")
    offset = _HEADER.size
    sets = []
    for n in counts:
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
        offset += dtype.itemsize * n
        sets.append(SampleSet(rec["pixels"].reshape(n, h, w), rec["pose"], rec["target"], rec["tag"], rec["seed"]))
    K = CameraIntrinsics(fx, fy, cx, cy, w, h)
    triplet = DatasetTriplet(*sets, K, ObjectModel(half_extents=(hx, hy, hz)), HEAD_MODES[mode])
    triplet.check_pairing()
    return triplet
