"""Small trainable 3D-conv stem producing a 4-level spatio-temporal pyramid."""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Module

STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) != len(STRIDES):
            raise ValueError(f"pyramid needs {len(STRIDES)} levels, got {len(self.levels)}")

    @property
    def shapes(self):
        return [lvl.shape for lvl in self.levels]

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def check_clip(clip: Tensor) -> None:
    if clip.ndim != 4 or clip.shape[0] != 3:
        raise ad.DimensionError(f"clip must be [3,T,H,W], got {clip.shape}")
    _, _, h, w = clip.shape
    if h % 32 or w % 32:
        raise ad.DimensionError(f"clip H and W must be divisible by 32, got H={h}, W={w}")


class Backbone(Module):
    """Stacked conv3d(3x3x3, spatial stride 2) + ReLU blocks.

    Two blocks reach stride 4 (level 0); each further level adds one block.
    """

    def __init__(self, channels=(32, 64, 96, 128), **kw):
        super().__init__(**kw)
        self.channels = tuple(int(c) for c in channels)
        if len(self.channels) != len(STRIDES):
            raise ValueError(f"need {len(STRIDES)} channel widths, got {self.channels}")
        c0 = self.channels[0]
        self.stem = [
            (self.param("stem0.w", (c0, 3, 3, 3, 3), scale=2**0.5), self.param("stem0.b", (c0,), init="zeros")),
            (self.param("stem1.w", (c0, c0, 3, 3, 3), scale=2**0.5), self.param("stem1.b", (c0,), init="zeros")),
        ]
        self.blocks = [
            (
                self.param(f"level{l}.w", (self.channels[l], self.channels[l - 1], 3, 3, 3), scale=2**0.5),
                self.param(f"level{l}.b", (self.channels[l],), init="zeros"),
            )
            for l in range(1, len(self.channels))
        ]

    def __call__(self, clip: Tensor) -> FeaturePyramid:
        return extract_pyramid(clip, self)


def _block(x: Tensor, w, b) -> Tensor:
    return ad.relu(ad.conv3d(x, w, b, stride=(1, 2, 2)))


def extract_pyramid(clip: Tensor, params: Backbone) -> FeaturePyramid:
    check_clip(clip)
    x = clip
    for w, b in params.stem:
        x = _block(x, w, b)
    levels = [x]
    for w, b in params.blocks:
        x = _block(x, w, b)
        levels.append(x)
    return FeaturePyramid(levels)
