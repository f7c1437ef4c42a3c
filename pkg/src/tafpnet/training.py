"""Set-prediction training: matching, losses, optimizer and the train loop."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .fusion import InstancePrediction, TAFPNet, save_checkpoint

log = logging.getLogger(__name__)

MASK_STRIDE = 4


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    dice: float = 5.0
    bce: float = 5.0
    no_object: float = 0.1


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (query, gt)

    def query_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    dice: float
    bce: float


# ---------------------------------------------------------------- targets


def downsample_mask(mask: np.ndarray, stride: int = MASK_STRIDE) -> np.ndarray:
    """Majority vote over ``stride x stride`` blocks; half-covered blocks count as foreground."""
    mask = np.asarray(mask, dtype=bool)
    *lead, H, W = mask.shape
    if H % stride or W % stride:
        raise ad.DimensionError(f"mask {H}x{W} not divisible by stride {stride}")
    blocks = mask.reshape(*lead, H // stride, stride, W // stride, stride)
    return blocks.sum(axis=(-3, -1)) * 2 >= stride * stride


def instance_targets(gts, stride: int = MASK_STRIDE) -> tuple[np.ndarray, np.ndarray]:
    """``(class indices [G], masks [G, T, H/s, W/s])``; class index is ``class_id - 1``."""
    if not gts:
        return np.zeros(0, dtype=np.int64), np.zeros((0,), dtype=np.float64)
    classes = np.array([g.class_id - 1 for g in gts], dtype=np.int64)
    masks = np.stack([downsample_mask(g.mask, stride) for g in gts]).astype(np.float64)
    return classes, masks


# ---------------------------------------------------------------- matching


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_dice_np(prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Smoothed soft Dice between every prob row and every target row."""
    inter = prob @ target.T
    return (2 * inter + 1) / (prob.sum(1)[:, None] + target.sum(1)[None, :] + 1)


def match_cost(pred: InstancePrediction, classes: np.ndarray, masks: np.ndarray, weights=CostWeights()) -> np.ndarray:
    """``[K_q, G]`` cost matrix used by the bipartite matcher."""
    k = pred.class_logits.shape[0]
    g = len(classes)
    if g == 0:
        return np.zeros((k, 0))
    prob_cls = _softmax_np(pred.class_logits.data)[:, classes]
    logits = pred.mask_logits.data.reshape(k, -1).astype(np.float64)
    target = masks.reshape(g, -1)
    dice = soft_dice_np(_sigmoid_np(logits), target)
    # mean BCE for every (query, gt) pair: softplus(x) - x*y averaged over pixels
    softplus = np.logaddexp(0.0, logits)
    bce = (softplus.sum(1)[:, None] - logits @ target.T) / logits.shape[1]
    return weights.cls * (1 - prob_cls) + weights.dice * (1 - dice) + weights.bce * bce


def hungarian_match(pred: InstancePrediction, gts, weights=CostWeights(), *, targets=None) -> MatchResult:
    """Minimum-cost one-to-one assignment of queries to ground-truth instances."""
    classes, masks = targets if targets is not None else instance_targets(gts)
    if len(classes) == 0:
        return MatchResult([])
    cost = match_cost(pred, classes, masks, weights)
    rows, cols = linear_sum_assignment(cost)
    return MatchResult(sorted((int(r), int(c)) for r, c in zip(rows, cols)))


# ---------------------------------------------------------------- loss


def soft_dice_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    prob = ad.sigmoid(logits)
    inter = (prob * Tensor(target.astype(logits.dtype))).sum()
    return 1.0 - (2.0 * inter + 1.0) / (prob.sum() + (float(target.sum()) + 1.0))


def total_loss(pred: InstancePrediction, gts, match: MatchResult, weights=CostWeights(), *, targets=None) -> LossBreakdown:
    """Per-query weighted cross-entropy plus Dice and BCE on matched masks.

    Classification: mean over queries of ``w_q * CE_q`` where unmatched
    queries target the no-object class with ``w_q = weights.no_object``.
    Masks: sum over matched pairs of ``dice * soft-Dice loss + bce * mean BCE``.
    """
    classes, masks = targets if targets is not None else instance_targets(gts)
    k, n_out = pred.class_logits.shape
    q2g = match.query_to_gt()
    target_cls = np.full(k, n_out - 1)
    w = np.full(k, weights.no_object)
    for q, g in q2g.items():
        target_cls[q] = classes[g]
        w[q] = 1.0
    logp = ad.log_softmax(pred.class_logits, axis=-1)
    onehot = np.zeros((k, n_out))
    onehot[np.arange(k), target_cls] = -w / k
    cls_loss = (logp * Tensor(onehot.astype(logp.dtype))).sum()

    total = cls_loss
    dice_sum, bce_sum = 0.0, 0.0
    for q, g in sorted(q2g.items()):
        m = ad.take(pred.mask_logits, q)
        d = soft_dice_loss(m, masks[g])
        b = ad.bce_with_logits(m, masks[g]).mean()
        total = total + weights.dice * d + weights.bce * b
        dice_sum += float(d.data)
        bce_sum += float(b.data)
    return LossBreakdown(total, float(cls_loss.data), dice_sum, bce_sum)


# ---------------------------------------------------------------- optimizer


class RMSProp:
    """Adaptive per-parameter step with no momentum term.

    Equivalent to Adam with ``beta1 = 0``: the step is the raw gradient over
    the bias-corrected root of its running second moment.

    With ``fan_in_ref > 0`` a weight tensor whose fan-in (elements per output
    row) exceeds the reference takes a proportionally smaller step. A
    normalized step moves every weight by about ``lr``, so without this the
    output of a wide kernel moves ``fan_in`` times further than a narrow one.
    """

    def __init__(self, params, lr: float = 1e-4, beta2: float = 0.999, eps: float = 1e-8, fan_in_ref: int = 0):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.scales = [step_scale(p.shape, fan_in_ref) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        self.step_count += 1
        corr = 1.0 - self.beta2**self.step_count
        for p, v, scale in zip(self.params, self.v, self.scales):
            g = p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * scale * g / (np.sqrt(v / corr) + self.eps)).astype(p.dtype)


def step_scale(shape, fan_in_ref: int) -> float:
    """``min(1, fan_in_ref / fan_in)`` for weights; 1 for vectors or when disabled."""
    if fan_in_ref <= 0 or len(shape) < 2:
        return 1.0
    fan_in = int(np.prod(shape[1:]))
    return min(1.0, fan_in_ref / fan_in)


# ---------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch: int = 2
    lr: float = 1e-4
    seed: int = 0
    log_interval: int = 10
    beta2: float = 0.999
    fan_in_ref: int = 256
    poly_power: float = 0.9  # lr * (1 - (it - 1) / iterations) ** poly_power; 0 keeps lr constant
    weights: CostWeights = field(default_factory=CostWeights)

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1 or self.log_interval < 1:
            raise ValueError("iterations must be >= 0, batch and log_interval >= 1")
        if self.poly_power < 0:
            raise ValueError("poly_power must be >= 0")
        if self.fan_in_ref < 0:
            raise ValueError("fan_in_ref must be >= 0 (0 disables step scaling)")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class TrainResult:
    losses: list[float]
    checkpoint: Path | None


def scheduled_lr(config: TrainConfig, it: int) -> float:
    """Polynomial decay from ``config.lr`` at iteration 1 towards 0 at the end."""
    if config.poly_power == 0 or config.iterations == 0:
        return config.lr
    return config.lr * (1.0 - (it - 1) / config.iterations) ** config.poly_power


def sample_order(n: int, iterations: int, batch: int, seed: int) -> list[list[int]]:
    """Dataset indices per iteration: reshuffled epochs, consumed in order."""
    rng = np.random.default_rng([seed, 1])
    flat: list[int] = []
    while len(flat) < iterations * batch:
        flat.extend(int(i) for i in rng.permutation(n))
    return [flat[i * batch : (i + 1) * batch] for i in range(iterations)]


def _dump_failure(out_dir: Path | None, iteration: int, batch_ids, dataset, reason: str) -> Path | None:
    if out_dir is None:
        return None
    dump = out_dir / f"nan_dump_iter{iteration:05d}"
    dump.mkdir(parents=True, exist_ok=True)
    for i in batch_ids:
        ad.save_snapshot(dump / f"clip_{i:04d}.taft", dataset[i].clip)
    (dump / "diagnostic.json").write_text(
        json.dumps({"iteration": iteration, "batch": list(batch_ids), "reason": reason}, indent=2, sort_keys=True)
    )
    return dump


def train_step(model: TAFPNet, samples, targets, weights: CostWeights):
    """Forward + backward over a batch; returns the mean loss components."""
    parts = np.zeros(4)
    n = len(samples)
    for sample, tgt in zip(samples, targets):
        pred = model(sample.clip)
        match = hungarian_match(pred, None, weights, targets=tgt)
        br = total_loss(pred, None, match, weights, targets=tgt)
        (br.total * (1.0 / n)).backward()
        parts += np.array([float(br.total.data), br.cls, br.dice, br.bce]) / n
    return parts


def train_loop(model: TAFPNet, dataset, config: TrainConfig, out_dir=None) -> TrainResult:
    """Train ``model`` in place on ``dataset`` (a sequence of clip samples).

    Writes ``loss.csv`` and ``checkpoint.tafw`` into ``out_dir`` when given.
    Raises :class:`NumericFailure` after dumping the offending batch if the
    loss or any gradient stops being finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    targets = [instance_targets(s.instances) for s in dataset]
    opt = RMSProp(model.parameters(), lr=config.lr, beta2=config.beta2, fan_in_ref=config.fan_in_ref)
    losses: list[float] = []
    csv_path = out / "loss.csv" if out is not None else None
    if csv_path is not None and not csv_path.exists():
        csv_path.write_text("iteration,loss,class,dice,bce\n")
    for it, ids in enumerate(sample_order(len(dataset), config.iterations, config.batch, config.seed), start=1):
        opt.zero_grad()
        try:
            parts = train_step(model, [dataset[i] for i in ids], [targets[i] for i in ids], config.weights)
        except ad.NonFiniteError as exc:
            dump = _dump_failure(out, it, ids, dataset, str(exc))
            raise NumericFailure(f"iteration {it}: {exc} (dump: {dump})") from exc
        bad = [p.name for p in opt.params if not np.isfinite(p.grad).all()]
        if not np.isfinite(parts).all() or bad:
            reason = f"non-finite gradient in {bad[:3]}" if bad else "non-finite loss"
            dump = _dump_failure(out, it, ids, dataset, reason)
            raise NumericFailure(f"iteration {it}: {reason} (dump: {dump})")
        opt.lr = scheduled_lr(config, it)
        opt.step()
        losses.append(float(parts[0]))
        if csv_path is not None and (it % config.log_interval == 0 or it == 1 or it == config.iterations):
            with csv_path.open("a", newline="") as fh:
                csv.writer(fh).writerow([it] + [repr(float(v)) for v in parts])
        if it % config.log_interval == 0:
            log.info("iter %d loss %.5f", it, parts[0])
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.tafw"
        save_checkpoint(ckpt, model)
    return TrainResult(losses, ckpt)
