"""Parameter containers and initialisers shared by the model modules."""
from __future__ import annotations

import math
import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Collects :class:`Parameter` attributes (and nested modules) by name.

    Parameters are created through :meth:`param`, which seeds each tensor from
    ``(seed, name)`` so two models sharing a parameter name start from the
    same values regardless of what else they contain.
    """

    def __init__(self, prefix: str = "", seed: int = 0, dtype=np.float64):
        self._prefix = prefix
        self._seed = seed
        self._dtype = np.dtype(dtype)

    def child(self, cls, name: str, *args, **kwargs):
        return cls(*args, prefix=f"{self._prefix}{name}.", seed=self._seed, dtype=self._dtype, **kwargs)

    def param(self, name: str, shape, init: str = "normal", scale: float = 1.0) -> Parameter:
        full = self._prefix + name
        rng = np.random.default_rng([self._seed, zlib.crc32(full.encode())])
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            data = rng.standard_normal(shape) * (scale / math.sqrt(max(fan_in, 1)))
        else:
            raise ValueError(f"unknown init {init!r}")
        return Parameter(data.astype(self._dtype), name=full)

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}

        def walk(obj):
            if isinstance(obj, Parameter):
                out.setdefault(obj.name, obj)
            elif isinstance(obj, Module):
                for key, value in vars(obj).items():
                    if not key.startswith("_"):
                        walk(value)
            elif isinstance(obj, (list, tuple)):
                for item in obj:
                    walk(item)
            elif isinstance(obj, dict):
                for item in obj.values():
                    walk(item)

        walk(self)
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)


class Attention(Module):
    """Multi-head attention with input projections and an output projection."""

    def __init__(self, d: int, num_heads: int, **kw):
        super().__init__(**kw)
        if d % num_heads:
            raise ValueError(f"width {d} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.w_q = self.param("w_q", (d, d))
        self.w_k = self.param("w_k", (d, d))
        self.w_v = self.param("w_v", (d, d))
        self.w_o = self.param("w_o", (d, d))
        self.b_o = self.param("b_o", (d,), init="zeros")

    def __call__(self, query: Tensor, memory: Tensor) -> Tensor:
        q = ad.linear(query, self.w_q)
        k = ad.linear(memory, self.w_k)
        v = ad.linear(memory, self.w_v)
        return ad.linear(multihead(q, k, v, self.num_heads), self.w_o, self.b_o)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, num_heads, d // num_heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def multihead(q: Tensor, k: Tensor, v: Tensor, num_heads: int, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention of ``q[n,d]`` over ``k[m,d]``, ``v[m,d]``."""
    d = q.shape[-1]
    if d % num_heads:
        raise ValueError(f"width {d} not divisible by {num_heads} heads")
    dk = d // num_heads
    qh, kh, vh = (split_heads(t, num_heads) for t in (q, k, v))
    logits = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dk))
    attn = ad.softmax(logits, axis=-1)
    if weights_out is not None:
        weights_out.append(attn)
    return merge_heads(attn @ vh)


class LayerNorm(Module):
    def __init__(self, d: int, **kw):
        super().__init__(**kw)
        self.gain = self.param("gain", (d,), init="ones")
        self.bias = self.param("bias", (d,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


def pointwise(x: Tensor, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """1x1x1 convolution of ``x[C,T,H,W]`` with ``weight[C_out,C_in]``."""
    c, t, h, w = x.shape
    out = weight @ x.reshape(c, t * h * w)
    if bias is not None:
        out = out + bias.reshape(-1, 1)
    return out.reshape(weight.shape[0], t, h, w)


def cells(x: Tensor) -> Tensor:
    """``[d,T,H,W]`` feature map as a ``[T*H*W, d]`` row matrix."""
    d = x.shape[0]
    return x.reshape(d, -1).transpose(1, 0)


def uncells(rows: Tensor, like_shape) -> Tensor:
    return rows.transpose(1, 0).reshape(tuple(like_shape))
