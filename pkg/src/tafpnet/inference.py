"""Turn raw query predictions into semantic label maps and scored instances."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .fusion import InstancePrediction, TAFPNet
from .scenes import GroundTruthInstance
from .training import MASK_STRIDE, _sigmoid_np, _softmax_np


def upsample_logits(mask_logits: np.ndarray, stride: int = MASK_STRIDE) -> np.ndarray:
    """Nearest-neighbour upsampling of ``[..., h, w]`` logits by ``stride``."""
    return np.repeat(np.repeat(mask_logits, stride, axis=-2), stride, axis=-1)


def semantic_from_prediction(pred: InstancePrediction, stride: int = MASK_STRIDE) -> np.ndarray:
    """Per-pixel label: argmax over classes of sum_q p_q(c) * sigmoid(m_q).

    Pixels whose best class score is below 0.5 are background (label 0).
    """
    prob = _softmax_np(np.asarray(pred.class_logits.data, dtype=np.float64))[:, :-1]
    masks = _sigmoid_np(upsample_logits(np.asarray(pred.mask_logits.data, dtype=np.float64), stride))
    score = np.einsum("qc,qthw->cthw", prob, masks)
    labels = score.argmax(axis=0) + 1
    labels[score.max(axis=0) < 0.5] = 0
    return labels


def instances_from_prediction(pred: InstancePrediction, stride: int = MASK_STRIDE) -> list[GroundTruthInstance]:
    """One scored instance per query with a non-empty binarised mask.

    Score is the class probability times the mean in-mask mask probability.
    """
    prob = _softmax_np(np.asarray(pred.class_logits.data, dtype=np.float64))
    masks = _sigmoid_np(upsample_logits(np.asarray(pred.mask_logits.data, dtype=np.float64), stride))
    out = []
    for q in range(prob.shape[0]):
        c = int(prob[q, :-1].argmax())
        binary = masks[q] > 0.5
        if not binary.any():
            continue
        score = float(prob[q, c] * masks[q][binary].mean())
        out.append(GroundTruthInstance(c + 1, binary, score))
    return out


def predict(model: TAFPNet, clip) -> tuple[np.ndarray, list[GroundTruthInstance]]:
    with ad.no_grad():
        pred = model(clip)
    return semantic_from_prediction(pred), instances_from_prediction(pred)
