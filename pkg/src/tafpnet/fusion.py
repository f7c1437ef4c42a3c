"""Multi-stage dual-pathway fusion and the query-based mask decoder.

Each stage runs a transformer pathway (temporal query propagation followed
by expansion back onto the cell grid) and a convolution pathway (AAFP on
every pyramid level, compressed to the embedding width). The two outputs
are summed into the next embedding, and the pyramid is refreshed by adding
the embedding projected back to each level.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .aafp import AAFP, kernel_pairs
from .autodiff import Tensor
from .backbone import Backbone, FeaturePyramid, extract_pyramid
from .layers import Attention, LayerNorm, Module, cells, pointwise
from .tqp import TemporalQueryPropagator, center_index

ABLATIONS = ("basenet", "afpnet", "tafpnet")


@dataclass
class ModelConfig:
    d: int = 32
    num_heads: int = 4
    k_q: int = 8
    num_stages: int = 2
    num_kernel_pairs: int = 3
    decoder_rounds: int = 3
    ablation: str = "tafpnet"
    channels: tuple[int, ...] = (32, 64, 96, 128)
    num_classes: int = 2
    frames: int = 5
    working_level: int = 2
    share_stage_weights: bool = False
    refresh_pyramid: bool = True
    expansion: str = "cross_attention"
    resample: str = "nearest"
    dtype: str = "float64"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation mode must be one of {ABLATIONS}, got {self.ablation!r}")
        center_index(self.frames)
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} not divisible by num_heads={self.num_heads}")
        if self.resample not in ("nearest", "bilinear"):
            raise ValueError(f"unknown resample mode {self.resample!r}")
        if self.num_stages < 0 or self.k_q < 1 or self.decoder_rounds < 0:
            raise ValueError("num_stages, decoder_rounds must be >= 0 and k_q >= 1")
        if not 0 <= self.working_level < len(self.channels):
            raise ValueError(f"working_level {self.working_level} outside the pyramid")

    @property
    def stages(self) -> int:
        """Stage count actually built; BaseNet has none."""
        return 0 if self.ablation == "basenet" else self.num_stages

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class StageState:
    embedding: Tensor  # [d, T, H', W'] at the working level
    pyramid: FeaturePyramid
    stage_index: int = 0


@dataclass
class InstancePrediction:
    class_logits: Tensor  # [K_q, num_classes + 1], last column is no-object
    mask_logits: Tensor  # [K_q, T, H/4, W/4]


# ---------------------------------------------------------------- resampling


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resample(x: Tensor, size, mode: str = "nearest") -> Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == "nearest":
        return ad.resize_nearest(x, size)
    rows = Tensor(_bilinear_matrix(x.shape[-2], size[0]).astype(x.dtype))
    cols = Tensor(_bilinear_matrix(x.shape[-1], size[1]).T.astype(x.dtype))
    return ad.matmul(ad.matmul(rows, x), cols)


# ---------------------------------------------------------------- parameters


class SharedProjections(Module):
    """Pointwise level<->embedding projections shared by every stage."""

    def __init__(self, channels, d: int, with_decompress: bool, **kw):
        super().__init__(**kw)
        self.compress = [self.param(f"compress{l}", (d, c)) for l, c in enumerate(channels)]
        # zero-initialized, so the pyramid refresh starts as an identity and
        # grows only as far as training finds it useful
        self.decompress = (
            [self.param(f"decompress{l}", (c, d), init="zeros") for l, c in enumerate(channels)]
            if with_decompress
            else []
        )


class StageParams(Module):
    def __init__(self, cfg: ModelConfig, **kw):
        super().__init__(**kw)
        self.tqp = (
            self.child(TemporalQueryPropagator, "tqp", cfg.d, cfg.num_heads, cfg.k_q, cfg.expansion)
            if cfg.ablation == "tafpnet"
            else None
        )
        self.aafp = self.child(AAFP, "aafp", cfg.channels, cfg.frames, kernel_pairs(cfg.num_kernel_pairs))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, **kw):
        super().__init__(**kw)
        d = cfg.d
        self.queries = self.param("queries", (cfg.k_q, d), scale=float(np.sqrt(d)))
        self.rounds = [
            {
                "self_attn": self.child(Attention, f"round{r}.self", d, cfg.num_heads),
                "norm1": self.child(LayerNorm, f"round{r}.norm1", d),
                "cross_attn": self.child(Attention, f"round{r}.cross", d, cfg.num_heads),
                "norm2": self.child(LayerNorm, f"round{r}.norm2", d),
                "ffn_w1": self.param(f"round{r}.ffn_w1", (2 * d, d), scale=2**0.5),
                "ffn_b1": self.param(f"round{r}.ffn_b1", (2 * d,), init="zeros"),
                "ffn_w2": self.param(f"round{r}.ffn_w2", (d, 2 * d)),
                "ffn_b2": self.param(f"round{r}.ffn_b2", (d,), init="zeros"),
                "norm3": self.child(LayerNorm, f"round{r}.norm3", d),
            }
            for r in range(cfg.decoder_rounds)
        ]
        self.class_w = self.param("class_w", (cfg.num_classes + 1, d))
        self.class_b = self.param("class_b", (cfg.num_classes + 1,), init="zeros")
        self.mask_w1 = self.param("mask_w1", (d, d), scale=2**0.5)
        self.mask_b1 = self.param("mask_b1", (d,), init="zeros")
        self.mask_w2 = self.param("mask_w2", (d, d))
        self.mask_b2 = self.param("mask_b2", (d,), init="zeros")
        self.pixel_w = self.param("pixel_w", (d, cfg.channels[0]))
        self.pixel_b = self.param("pixel_b", (d,), init="zeros")


# ---------------------------------------------------------------- operations


def compress_pyramid(pyramid: FeaturePyramid, shared: SharedProjections, working_level: int, mode="nearest") -> Tensor:
    size = pyramid[working_level].shape[-2:]
    total = None
    for level, w in zip(pyramid, shared.compress):
        part = resample(pointwise(level, w), size, mode)
        total = part if total is None else total + part
    return total


def decompress_embedding(embedding: Tensor, shared: SharedProjections, pyramid: FeaturePyramid, mode="nearest"):
    return [resample(pointwise(embedding, w), lvl.shape[-2:], mode) for w, lvl in zip(shared.decompress, pyramid)]


def run_stage(
    state: StageState,
    params: StageParams,
    shared: SharedProjections,
    cfg: ModelConfig,
    trace: dict | None = None,
) -> StageState:
    stage_trace: dict | None = {} if trace is not None else None
    maps: list | None = [] if trace is not None else None
    conv_out = compress_pyramid(
        FeaturePyramid(params.aafp(state.pyramid.levels, maps)), shared, cfg.working_level, cfg.resample
    )
    if params.tqp is not None:
        embedding = params.tqp(state.embedding, stage_trace) + conv_out
    else:
        embedding = conv_out
    if cfg.refresh_pyramid:
        refresh = decompress_embedding(embedding, shared, state.pyramid, cfg.resample)
        pyramid = FeaturePyramid([lvl + r for lvl, r in zip(state.pyramid, refresh)])
    else:
        pyramid = state.pyramid
    if trace is not None:
        stage_trace["aafp_maps"] = maps
        trace.setdefault("stages", []).append(stage_trace)
    return StageState(embedding, pyramid, state.stage_index + 1)


def decode_masks(final: StageState, dec: Decoder) -> InstancePrediction:
    memory = cells(final.embedding)
    q = dec.queries
    for rd in dec.rounds:
        q = rd["norm1"](q + rd["self_attn"](q, q))
        q = rd["norm2"](q + rd["cross_attn"](q, memory))
        hidden = ad.relu(ad.linear(q, rd["ffn_w1"], rd["ffn_b1"]))
        q = rd["norm3"](q + ad.linear(hidden, rd["ffn_w2"], rd["ffn_b2"]))
    class_logits = ad.linear(q, dec.class_w, dec.class_b)
    mask_embed = ad.linear(ad.relu(ad.linear(q, dec.mask_w1, dec.mask_b1)), dec.mask_w2, dec.mask_b2)
    pixels = pointwise(final.pyramid[0], dec.pixel_w, dec.pixel_b)
    d, t, h, w = pixels.shape
    # 1/sqrt(d) keeps initial logits O(1), as for attention logits
    mask_logits = ((mask_embed @ pixels.reshape(d, t * h * w)) * (1.0 / np.sqrt(d))).reshape(q.shape[0], t, h, w)
    return InstancePrediction(class_logits, mask_logits)


class TAFPNet(Module):
    """Backbone, ``M`` fusion stages and decoder, switchable between ablations."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        super().__init__(prefix="", seed=seed, dtype=np.dtype(cfg.dtype))
        self.cfg = cfg
        self.backbone = self.child(Backbone, "backbone", cfg.channels)
        self.shared = self.child(SharedProjections, "shared", cfg.channels, cfg.d, cfg.stages > 0 and cfg.refresh_pyramid)
        if cfg.share_stage_weights and cfg.stages:
            one = self.child(StageParams, "stages.shared", cfg)
            self.stages = [one] * cfg.stages
        else:
            self.stages = [self.child(StageParams, f"stages.{m}", cfg) for m in range(cfg.stages)]
        self.decoder = self.child(Decoder, "decoder", cfg)

    def initial_state(self, pyramid: FeaturePyramid) -> StageState:
        emb = compress_pyramid(pyramid, self.shared, self.cfg.working_level, self.cfg.resample)
        return StageState(emb, pyramid, 0)

    def run_stage(self, state: StageState, trace: dict | None = None) -> StageState:
        if state.stage_index >= len(self.stages):
            raise ValueError(f"stage index {state.stage_index} >= M={len(self.stages)}")
        return run_stage(state, self.stages[state.stage_index], self.shared, self.cfg, trace)

    def __call__(self, clip, trace: dict | None = None) -> InstancePrediction:
        clip = clip if isinstance(clip, Tensor) else Tensor(clip)
        clip = Tensor(clip.data.astype(self._dtype, copy=False))
        if clip.shape[1] != self.cfg.frames:
            raise ad.DimensionError(f"clip has T={clip.shape[1]}, model built for T={self.cfg.frames}")
        pyramid = extract_pyramid(clip, self.backbone)
        state = self.initial_state(pyramid)
        if trace is not None:
            trace["pyramid"] = pyramid
        for _ in self.stages:
            state = self.run_stage(state, trace)
        pred = decode_masks(state, self.decoder)
        if trace is not None:
            trace["prediction"] = pred
        return pred


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"TAFW1"


def save_checkpoint(path, model: Module) -> None:
    params = model.named_parameters()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw + ad.encode_array(p.data))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a TAFW1 checkpoint")
    (count,) = struct.unpack_from("<I", buf, 5)
    offset = 9
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, offset)
        name = buf[offset + 4 : offset + 4 + n].decode()
        table[name], offset = ad.decode_array(buf, offset + 4 + n)
    return table


def load_checkpoint(path, model: Module) -> None:
    table = read_checkpoint(path)
    params = model.named_parameters()
    missing = sorted(set(params) - set(table))
    extra = sorted(set(table) - set(params))
    if missing or extra:
        raise ValueError(f"checkpoint does not match model: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        if table[name].shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {table[name].shape} != model shape {p.shape}")
        p.data[...] = table[name]
