"""Aggregated asymmetric feature pyramid.

Each pyramid level is processed by two perception blocks with disjoint
kernel banks. Both blocks first aggregate the clip with a 5x5xT conv; the
anatomy block then applies square k x k x t kernels, the instrument block
applies a k x 1 x t plus 1 x k x t strip pair per kernel size. Each block
gates its summed branch response with the aggregated map, and the two gated
maps are added.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Module

PAPER_PAIRS = ((3, 1), (5, 3), (7, 5))


def kernel_pairs(n: int = 3) -> tuple[tuple[int, int], ...]:
    """``(k_m, t_m)`` pairs; beyond the three listed sizes both grow by 2."""
    if n < 1:
        raise ValueError("need at least one kernel pair")
    pairs = list(PAPER_PAIRS[:n])
    while len(pairs) < n:
        k, t = pairs[-1]
        pairs.append((k + 2, t + 2))
    return tuple(pairs)


class KernelBank(Module):
    """Kernels of one perception block (``kind`` is anatomy or instrument)."""

    def __init__(self, channels: int, frames: int, kind: str, pairs=PAPER_PAIRS, **kw):
        super().__init__(**kw)
        if kind not in ("anatomy", "instrument"):
            raise ValueError(f"unknown perception block {kind!r}")
        c = channels
        self.kind = kind
        self.frames = frames
        self.pairs = tuple(pairs)
        self.stem = self.param("stem", (c, c, frames, 5, 5))
        if kind == "anatomy":
            self.kernels = [self.param(f"sym{k}x{k}x{t}", (c, c, t, k, k)) for k, t in self.pairs]
        else:
            self.kernels = [
                (
                    self.param(f"strip{k}x1x{t}", (c, c, t, k, 1)),
                    self.param(f"strip1x{k}x{t}", (c, c, t, 1, k)),
                )
                for k, t in self.pairs
            ]
        self.agg = self.param("agg", (c, c, frames, 1, 1), scale=0.5)


@dataclass
class AggregatedMap:
    e_temp: Tensor
    f_temp: Tensor


def temporal_aggregate(level: Tensor, bank: KernelBank) -> Tensor:
    if level.ndim != 4:
        raise ad.DimensionError(f"pyramid level must be [C,T,H,W], got {level.shape}")
    if level.shape[1] != bank.frames:
        raise ad.DimensionError(f"clip has T={level.shape[1]} frames, kernel bank built for T={bank.frames}")
    return ad.conv3d(level, bank.stem)


def anatomy_branch(f_temp: Tensor, bank: KernelBank) -> list[Tensor]:
    return [ad.conv3d(f_temp, w) for w in bank.kernels]


def instrument_branch(f_temp: Tensor, bank: KernelBank) -> list[Tensor]:
    return [ad.conv3d(f_temp, vert) + ad.conv3d(f_temp, horiz) for vert, horiz in bank.kernels]


def aggregate(branch_outputs: list[Tensor], f_temp: Tensor, bank: KernelBank) -> Tensor:
    total = f_temp
    for out in branch_outputs:
        if out.shape != f_temp.shape:
            raise ad.DimensionError(f"branch output {out.shape} does not match F_temp {f_temp.shape}")
        total = total + out
    # Hadamard gate: both operands are [C,T,H,W]
    return ad.conv3d(total, bank.agg) * f_temp


def perceive(level: Tensor, bank: KernelBank) -> AggregatedMap:
    f_temp = temporal_aggregate(level, bank)
    branch = anatomy_branch if bank.kind == "anatomy" else instrument_branch
    return AggregatedMap(aggregate(branch(f_temp, bank), f_temp, bank), f_temp)


def aafp_forward(level: Tensor, anatomy: KernelBank, instrument: KernelBank, maps_out: list | None = None) -> Tensor:
    a = perceive(level, anatomy)
    i = perceive(level, instrument)
    if maps_out is not None:
        maps_out.extend([a, i])
    return a.e_temp + i.e_temp


class AAFP(Module):
    """Per-level anatomy and instrument banks for a whole pyramid."""

    def __init__(self, channels, frames: int, pairs=PAPER_PAIRS, **kw):
        super().__init__(**kw)
        self.levels = [
            (
                self.child(KernelBank, f"level{l}.anatomy", c, frames, "anatomy", pairs),
                self.child(KernelBank, f"level{l}.instrument", c, frames, "instrument", pairs),
            )
            for l, c in enumerate(channels)
        ]

    def __call__(self, pyramid_levels, maps_out: list | None = None) -> list[Tensor]:
        return [aafp_forward(x, a, i, maps_out) for x, (a, i) in zip(pyramid_levels, self.levels)]
