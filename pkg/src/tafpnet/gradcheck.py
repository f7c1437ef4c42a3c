"""Registry of finite-difference gradient checks, one per operator.

Each case builds fresh random inputs and returns ``(fn, wrt)`` where ``fn``
maps the current inputs to a scalar. Non-scalar ops are reduced against a
fixed random probe so every output element contributes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

TOLERANCE = 1e-4


def _probe_sum(out: Tensor, probe: np.ndarray) -> Tensor:
    return (out * Tensor(probe)).sum()


def _unary(op, shape=(3, 4), positive=False):
    def build(rng):
        x = Parameter(rng.random(shape) + 0.5 if positive else rng.standard_normal(shape))
        probe = rng.standard_normal(op(x).shape)
        return (lambda: _probe_sum(op(x), probe)), [x]

    return build


def _binary(op, sa=(3, 4), sb=(3, 4), positive_b=False):
    def build(rng):
        a = Parameter(rng.standard_normal(sa))
        b = Parameter(rng.random(sb) + 0.5 if positive_b else rng.standard_normal(sb))
        probe = rng.standard_normal(op(a, b).shape)
        return (lambda: _probe_sum(op(a, b), probe)), [a, b]

    return build


def _linear(rng):
    x = Parameter(rng.standard_normal((2, 3, 4)))
    w = Parameter(rng.standard_normal((5, 4)))
    b = Parameter(rng.standard_normal(5))
    probe = rng.standard_normal((2, 3, 5))
    return (lambda: _probe_sum(ad.linear(x, w, b), probe)), [x, w, b]


def _layer_norm(rng):
    x = Parameter(rng.standard_normal((3, 6)))
    g = Parameter(rng.standard_normal(6))
    b = Parameter(rng.standard_normal(6))
    probe = rng.standard_normal((3, 6))
    return (lambda: _probe_sum(ad.layer_norm(x, g, b), probe)), [x, g, b]


def _conv(stride, kernel=(3, 3, 3)):
    def build(rng):
        x = Parameter(rng.standard_normal((2, 3, 6, 6)))
        w = Parameter(rng.standard_normal((3, 2) + kernel) * 0.5)
        b = Parameter(rng.standard_normal(3))
        probe = rng.standard_normal(ad.conv3d(x, w, b, stride=stride).shape)
        return (lambda: _probe_sum(ad.conv3d(x, w, b, stride=stride), probe)), [x, w, b]

    return build


def _bce(rng):
    x = Parameter(rng.standard_normal((4, 5)) * 2)
    y = (rng.random((4, 5)) > 0.5).astype(float)
    return (lambda: ad.bce_with_logits(x, y).mean()), [x]


def _topk(rng):
    scores = Parameter(rng.standard_normal(7))
    values = Parameter(rng.standard_normal((7, 3)))
    probe = rng.standard_normal((3, 3))
    return (lambda: _probe_sum(ad.topk_select(scores, values, 3)[1], probe)), [values]


def _concat_stack(rng):
    a = Parameter(rng.standard_normal((2, 3)))
    b = Parameter(rng.standard_normal((2, 3)))
    probe = rng.standard_normal((2, 4, 3))

    def fn():
        cat = ad.concat([a, b], axis=0)  # [4, 3]
        st = ad.stack([cat, cat * b.sum()], axis=0)  # [2, 4, 3]
        return _probe_sum(st, probe)

    return fn, [a, b]


def _take(rng):
    x = Parameter(rng.standard_normal((5, 3)))
    idx = np.array([0, 2, 2, 4])  # repeated index accumulates
    probe = rng.standard_normal((4, 3))
    return (lambda: _probe_sum(ad.take(x, idx), probe)), [x]


def _resize(rng):
    x = Parameter(rng.standard_normal((2, 1, 4, 6)))
    probe = rng.standard_normal((2, 1, 8, 3))
    return (lambda: _probe_sum(ad.resize_nearest(x, (8, 3)), probe)), [x]


def _shape_ops(rng):
    x = Parameter(rng.standard_normal((2, 3, 4)))
    probe = rng.standard_normal((4, 6))
    return (lambda: _probe_sum(ad.reshape(ad.transpose(x, (2, 0, 1)), (4, 6)), probe)), [x]


def _reductions(rng):
    x = Parameter(rng.standard_normal((3, 4)))
    probe = rng.standard_normal(4)
    return (lambda: _probe_sum(ad.tsum(x, axis=0) + ad.mean(x, axis=0), probe) * ad.mean(x)), [x]


def _attention(rng):
    from .layers import multihead

    q = Parameter(rng.standard_normal((3, 4)))
    k = Parameter(rng.standard_normal((5, 4)))
    v = Parameter(rng.standard_normal((5, 4)))
    probe = rng.standard_normal((3, 4))
    return (lambda: _probe_sum(multihead(q, k, v, 2), probe)), [q, k, v]


def _model(rng):
    from .fusion import ModelConfig, TAFPNet
    from .scenes import SceneSpec, generate
    from .training import hungarian_match, total_loss

    cfg = ModelConfig(d=8, num_heads=2, k_q=3, num_stages=2, channels=(4, 4, 6, 6), frames=3, decoder_rounds=1)
    model = TAFPNet(cfg, seed=int(rng.integers(1 << 16)))
    for w in model.shared.decompress:  # zero at init; exercise the pyramid refresh too
        w.data[...] = rng.standard_normal(w.shape) * 0.3
    sample = generate(SceneSpec(seed=int(rng.integers(1 << 16)), T=3, H=32, W=64))
    match = hungarian_match(model(sample.clip), sample.instances)
    return (lambda: total_loss(model(sample.clip), sample.instances, match).total), model.parameters()


OP_CASES = {
    "add": _binary(ad.add, (3, 4), (4,)),
    "sub": _binary(ad.sub, (3, 4), (3, 1)),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "neg": _unary(ad.neg),
    "power": _unary(lambda x: ad.power(x, 1.5), positive=True),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "relu": _unary(ad.relu),
    "sigmoid": _unary(ad.sigmoid),
    "bce_with_logits": _bce,
    "sum_mean": _reductions,
    "reshape_transpose": _shape_ops,
    "take": _take,
    "concat_stack": _concat_stack,
    "matmul": _binary(ad.matmul, (2, 3, 4), (4, 5)),
    "linear": _linear,
    "softmax": _unary(lambda x: ad.softmax(x, axis=-1)),
    "log_softmax": _unary(lambda x: ad.log_softmax(x, axis=0)),
    "layer_norm": _layer_norm,
    "multihead_attention": _attention,
    "conv3d": _conv(1),
    "conv3d_strided": _conv((1, 2, 2)),
    "conv3d_strip": _conv(1, (3, 5, 1)),
    "resize_nearest": _resize,
    "topk_select": _topk,
    "model_end_to_end": _model,
}


@dataclass
class CheckRow:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def run_checks(names=None, *, points: int = 5, eps: float = 1e-3, seed: int = 0) -> list[CheckRow]:
    rows = []
    for name in names or OP_CASES:
        rng = np.random.default_rng([seed, sum(name.encode())])
        start = time.perf_counter()
        fn, wrt = OP_CASES[name](rng)
        err = ad.check_gradient(fn, list(wrt), eps=eps, points=points, rng=rng)
        rows.append(CheckRow(name, err, time.perf_counter() - start))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'op'.ljust(width)}  max_rel_err  result"]
    for r in rows:
        lines.append(f"{r.name.ljust(width)}  {r.error:11.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
