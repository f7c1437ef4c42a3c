"""Deterministic synthetic surgical-like clips with exact instance masks.

Scenes contain static polygon "anatomies" with similar noise textures and
bar-shaped "instruments" that translate linearly and are drawn on top.
Motion blur is produced by averaging composited renders at sub-frame times,
while masks are taken from the sharp render at the frame time.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import decode_array, encode_array

BACKGROUND, ANATOMY, INSTRUMENT = 0, 1, 2
CLASS_NAMES = {BACKGROUND: "background", ANATOMY: "anatomy", INSTRUMENT: "instrument"}

# instrument geometry, as fractions of min(H, W)
BAR_LENGTH = (0.5, 0.9)
BAR_ASPECT = (4.0, 5.0)
ANATOMY_RADIUS = (0.18, 0.32)
MAX_RETRIES = 100


class SceneError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    T: int = 5
    H: int = 64
    W: int = 128
    num_instruments: int = 1
    num_anatomies: int = 2
    velocity_range: tuple[float, float] = (1.0, 4.0)
    blur_strength: float = 0.5
    occlusion_bias: float = 0.5
    texture_similarity: float = 0.5

    def __post_init__(self):
        self.velocity_range = tuple(float(v) for v in self.velocity_range)
        if self.T < 1 or self.T % 2 == 0:
            raise ValueError(f"T={self.T} must be odd (clips need a centre frame)")
        if self.H <= 0 or self.W <= 0 or self.H % 32 or self.W % 32:
            raise ValueError(f"H={self.H}, W={self.W} must be positive multiples of 32")
        if self.num_instruments < 0 or self.num_anatomies < 0:
            raise ValueError("object counts must be >= 0")
        lo, hi = self.velocity_range
        if len(self.velocity_range) != 2 or lo < 0 or hi < lo:
            raise ValueError(f"velocity_range must satisfy 0 <= lo <= hi, got {self.velocity_range}")
        if self.blur_strength < 0:
            raise ValueError("blur_strength must be >= 0")
        for name in ("occlusion_bias", "texture_similarity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a u64")

    def replace(self, **changes) -> "SceneSpec":
        return SceneSpec(**{**asdict(self), **changes})


@dataclass
class GroundTruthInstance:
    class_id: int
    mask: np.ndarray  # bool [T, H, W]
    score: float = 1.0  # used when the file holds predictions


@dataclass
class ClipSample:
    clip: np.ndarray  # [3, T, H, W] in [0, 1]
    instances: list[GroundTruthInstance]
    meta: dict = field(default_factory=dict)

    @property
    def spec(self) -> SceneSpec:
        return SceneSpec(**self.meta["spec"])

    def semantic_labels(self) -> np.ndarray:
        return semantic_labels(self.instances, self.clip.shape[1:])


def semantic_labels(instances, shape) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.int64)
    for inst in instances:
        labels[inst.mask] = inst.class_id
    return labels


# ---------------------------------------------------------------- geometry


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def polygon_mask(vertices: np.ndarray, H: int, W: int) -> np.ndarray:
    """Even-odd fill of a polygon (x, y vertices) sampled at pixel centres."""
    ys, xs = np.mgrid[0:H, 0:W] + 0.5
    inside = np.zeros((H, W), dtype=bool)
    x0, y0 = vertices[:, 0], vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > ys) != (by > ys)
        x_at = ax + (ys - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xs < x_at)
    return inside


def bar_local_coords(center, angle, H, W):
    """Pixel-centre coordinates in the bar frame (u along the axis, v across)."""
    ys, xs = np.mgrid[0:H, 0:W] + 0.5
    dx, dy = xs - center[0], ys - center[1]
    c, s = math.cos(angle), math.sin(angle)
    return dx * c + dy * s, -dx * s + dy * c


@dataclass
class _Anatomy:
    vertices: np.ndarray
    color: np.ndarray
    noise: np.ndarray


@dataclass
class _Instrument:
    center: np.ndarray  # at the centre frame
    velocity: np.ndarray  # pixels / frame
    angle: float
    length: float
    width: float
    color: np.ndarray
    period: float

    def at(self, t: float):
        return self.center + self.velocity * t

    def mask(self, t: float, H: int, W: int) -> np.ndarray:
        u, v = bar_local_coords(self.at(t), self.angle, H, W)
        return (np.abs(u) <= self.length / 2) & (np.abs(v) <= self.width / 2)

    def texture(self, t: float, H: int, W: int) -> np.ndarray:
        u, _ = bar_local_coords(self.at(t), self.angle, H, W)
        shade = 0.08 * np.cos(2 * np.pi * u / self.period)
        return np.clip(self.color[:, None, None] + shade[None], 0.0, 1.0)


def _make_anatomy(rng, spec: SceneSpec, shared_noise, base_color) -> _Anatomy:
    m = min(spec.H, spec.W)
    n = int(rng.integers(8, 15))
    r = rng.uniform(*ANATOMY_RADIUS) * m
    cx = rng.uniform(0.15, 0.85) * spec.W
    cy = rng.uniform(0.15, 0.85) * spec.H
    angles = np.sort((np.arange(n) + rng.uniform(-0.3, 0.3, n)) * 2 * np.pi / n + rng.uniform(0, 2 * np.pi))
    # low-frequency radial jitter
    phases = rng.uniform(0, 2 * np.pi, 3)
    amps = rng.uniform(0, 0.12, 3)
    jitter = sum(a * np.sin((k + 1) * angles + p) for k, (a, p) in enumerate(zip(amps, phases)))
    radii = r * (1.0 + jitter)
    verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    sim = spec.texture_similarity
    color = np.clip(base_color + (1 - sim) * rng.uniform(-0.35, 0.35, 3), 0.05, 0.95)
    own = _smooth_noise(rng, (spec.H, spec.W), 2.0)
    noise = sim * shared_noise + (1 - sim) * own
    return _Anatomy(verts, color, noise)


def _make_instrument(rng, spec: SceneSpec, anatomies) -> _Instrument:
    m = min(spec.H, spec.W)
    length = rng.uniform(*BAR_LENGTH) * m
    width = length / rng.uniform(*BAR_ASPECT)
    angle = rng.uniform(0, np.pi)
    speed = rng.uniform(*spec.velocity_range)
    heading = rng.uniform(0, 2 * np.pi)
    velocity = speed * np.array([math.cos(heading), math.sin(heading)])
    if anatomies and rng.random() < spec.occlusion_bias:
        target = anatomies[int(rng.integers(len(anatomies)))]
        center = target.vertices.mean(axis=0) + rng.uniform(-0.1, 0.1, 2) * m
    else:
        center = np.array([rng.uniform(0.25, 0.75) * spec.W, rng.uniform(0.25, 0.75) * spec.H])
    color = np.full(3, rng.uniform(0.6, 0.85)) + rng.uniform(-0.04, 0.04, 3)
    return _Instrument(center, velocity, angle, length, width, color, rng.uniform(6.0, 12.0))


def _visible_anywhere(masks) -> bool:
    return any(mk.any() for mk in masks)


def _build_scene(spec: SceneSpec):
    rng = np.random.default_rng(spec.seed)
    H, W, T = spec.H, spec.W, spec.T
    frame_times = np.arange(T) - (T - 1) / 2
    background = np.clip(np.array([0.45, 0.16, 0.14])[:, None, None] + 0.05 * _smooth_noise(rng, (3, H, W), 4.0), 0.0, 1.0)
    shared_noise = _smooth_noise(rng, (H, W), 2.0)
    base_color = np.array([0.78, 0.42, 0.38]) + rng.uniform(-0.05, 0.05, 3)
    anatomies = []
    for _ in range(spec.num_anatomies):
        for _attempt in range(MAX_RETRIES):
            a = _make_anatomy(rng, spec, shared_noise, base_color)
            if polygon_mask(a.vertices, H, W).any():
                anatomies.append(a)
                break
        else:
            raise SceneError("anatomy never entered the frame after retry cap")
    instruments = []
    for _ in range(spec.num_instruments):
        for _attempt in range(MAX_RETRIES):
            ins = _make_instrument(rng, spec, anatomies)
            if _visible_anywhere(ins.mask(t, H, W) for t in frame_times):
                instruments.append(ins)
                break
        else:
            raise SceneError("instrument never entered the frame after retry cap")
    return background, anatomies, instruments, frame_times


def _render(spec, background, anatomies, instruments, t):
    """Composite at time ``t``: RGB image and per-pixel instance id (-1 = bg)."""
    H, W = spec.H, spec.W
    rgb = background.copy()
    ids = np.full((H, W), -1, dtype=np.int64)
    for i, a in enumerate(anatomies):
        m = polygon_mask(a.vertices, H, W)
        tex = np.clip(a.color[:, None, None] * (1.0 + 0.12 * a.noise[None]), 0.0, 1.0)
        rgb[:, m] = tex[:, m]
        ids[m] = i
    for j, ins in enumerate(instruments):
        m = ins.mask(t, H, W)
        rgb[:, m] = ins.texture(t, H, W)[:, m]
        ids[m] = len(anatomies) + j
    return rgb, ids


def render_layers(spec: SceneSpec):
    """Sharp per-frame renders and instance-id maps (no blur), for inspection."""
    background, anatomies, instruments, times = _build_scene(spec)
    frames = [_render(spec, background, anatomies, instruments, t) for t in times]
    return np.stack([f[0] for f in frames], axis=1), np.stack([f[1] for f in frames])


def generate(spec: SceneSpec) -> ClipSample:
    background, anatomies, instruments, times = _build_scene(spec)
    H, W, T = spec.H, spec.W, spec.T
    max_speed = max((float(np.hypot(*ins.velocity)) for ins in instruments), default=0.0)
    blur_len = spec.blur_strength * max_speed
    n_sub = max(1, int(math.ceil(blur_len)) + 1) if blur_len > 0 else 1
    offsets = np.linspace(-spec.blur_strength / 2, spec.blur_strength / 2, n_sub) if n_sub > 1 else np.zeros(1)

    clip = np.zeros((3, T, H, W))
    ids = np.zeros((T, H, W), dtype=np.int64)
    for f, t in enumerate(times):
        acc = np.zeros((3, H, W))
        for dt in offsets:
            acc += _render(spec, background, anatomies, instruments, t + dt)[0]
        clip[:, f] = acc / len(offsets)
        ids[f] = _render(spec, background, anatomies, instruments, t)[1]

    n_anat = len(anatomies)
    instances, visibility = [], []
    full_masks = [np.broadcast_to(polygon_mask(a.vertices, H, W), (T, H, W)) for a in anatomies]
    full_masks += [np.stack([ins.mask(t, H, W) for t in times]) for ins in instruments]
    for k, full in enumerate(full_masks):
        mask = ids == k
        if not mask.any():
            continue  # fully hidden behind objects drawn later
        cls = ANATOMY if k < n_anat else INSTRUMENT
        instances.append(GroundTruthInstance(cls, mask))
        area = full.sum(axis=(1, 2))
        vis = np.where(area > 0, mask.sum(axis=(1, 2)) / np.maximum(area, 1), 0.0)
        visibility.append([float(v) for v in vis])
    meta = {"spec": asdict(spec), "visibility": visibility}
    return ClipSample(clip, instances, meta)


def make_split(seed: int, n_train: int, n_val: int, template: SceneSpec | None = None, val_offset: int | None = None):
    """Train and validation samples from disjoint seed ranges.

    Training seeds are ``seed .. seed+n_train-1``; validation seeds start at
    ``seed + val_offset`` (default: right after the training range).
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    template = template or SceneSpec()
    val_offset = n_train if val_offset is None else val_offset
    train_seeds = range(seed, seed + n_train)
    val_seeds = range(seed + val_offset, seed + val_offset + n_val)
    if set(train_seeds) & set(val_seeds):
        raise ValueError(f"seed ranges overlap: train {train_seeds}, val {val_seeds}")
    train = [generate(template.replace(seed=s)) for s in train_seeds]
    val = [generate(template.replace(seed=s)) for s in val_seeds]
    return train, val


# ---------------------------------------------------------------- clip files

CLIP_MAGIC = b"TAFC1"


def rle_encode(mask: np.ndarray) -> list[tuple[int, int]]:
    flat = np.concatenate([[False], mask.reshape(-1), [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(flat))
    return [(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])]


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for start, length in runs:
        flat[start : start + length] = True
    return flat.reshape(shape)


def encode_clip(sample: ClipSample) -> bytes:
    meta = json.dumps(sample.meta, sort_keys=True).encode()
    parts = [CLIP_MAGIC, struct.pack("<I", len(meta)), meta, encode_array(sample.clip)]
    parts.append(struct.pack("<I", len(sample.instances)))
    for inst in sample.instances:
        runs = rle_encode(inst.mask)
        parts.append(struct.pack("<Id I", inst.class_id, inst.score, len(runs)))
        parts.append(np.asarray(runs, dtype="<u4").reshape(-1).tobytes())
    return b"".join(parts)


def decode_clip(buf: bytes) -> ClipSample:
    if buf[:5] != CLIP_MAGIC:
        raise ValueError("not a TAFC1 clip file")
    (n,) = struct.unpack_from("<I", buf, 5)
    meta = json.loads(buf[9 : 9 + n].decode())
    clip, offset = decode_array(buf, 9 + n)
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    head = struct.Struct("<Id I")
    instances = []
    for _ in range(count):
        cls, score, n_runs = head.unpack_from(buf, offset)
        offset += head.size
        runs = np.frombuffer(buf, dtype="<u4", count=2 * n_runs, offset=offset).reshape(-1, 2)
        offset += 8 * n_runs
        instances.append(GroundTruthInstance(int(cls), rle_decode(runs.tolist(), clip.shape[1:]), float(score)))
    return ClipSample(clip, instances, meta)


def save_clip(path, sample: ClipSample) -> None:
    Path(path).write_bytes(encode_clip(sample))


def load_clip(path) -> ClipSample:
    return decode_clip(Path(path).read_bytes())


def write_split(out_dir, train, val) -> dict:
    """Write ``train_XXXX.tafc`` / ``val_XXXX.tafc`` and ``index.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"train": [], "val": []}
    for split, samples in (("train", train), ("val", val)):
        for i, sample in enumerate(samples):
            name = f"{split}_{i:04d}.tafc"
            save_clip(out / name, sample)
            index[split].append(name)
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def read_split(data_dir, split: str) -> list[ClipSample]:
    data_dir = Path(data_dir)
    index = json.loads((data_dir / "index.json").read_text())
    return [load_clip(data_dir / name) for name in index[split]]
