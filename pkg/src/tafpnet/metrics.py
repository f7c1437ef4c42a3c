"""Semantic (mIoU / mDice) and instance (mAP@[0.5:0.95]) evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# k/100 gives the correctly rounded doubles 0.5, 0.55, ..., 0.95
IOU_THRESHOLDS = tuple(k / 100 for k in range(50, 100, 5))


@dataclass
class MetricsReport:
    per_class_iou: dict = field(default_factory=dict)
    per_class_dice: dict = field(default_factory=dict)
    miou: float = 0.0
    mdice: float = 0.0
    per_class_ap: dict = field(default_factory=dict)
    map_50_95: float = 0.0
    per_class_box_ap: dict = field(default_factory=dict)
    box_map_50_95: float = 0.0
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------- semantic


def _frame_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    idx = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    conf = np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.int64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    return tp, fp, fn


def semantic_scores(pred_labels, gt_labels, num_classes: int):
    """Per-frame IoU/Dice, averaged over present classes, then over frames.

    A class absent from both prediction and ground truth in a frame is left
    out of that frame's mean. Returns ``(miou, mdice, per_class_iou,
    per_class_dice)``; the per-class maps average each class over the frames
    where it was counted.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    for arr in (pred, gt):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
    frame_iou, frame_dice = [], []
    sums = {c: [0.0, 0.0, 0] for c in range(num_classes)}
    for p, g in zip(pred, gt):
        tp, fp, fn = _frame_counts(p, g, num_classes)
        ious, dices = [], []
        for c in range(num_classes):
            denom = tp[c] + fp[c] + fn[c]
            if denom == 0:
                continue
            iou = tp[c] / denom
            dice = 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c])
            ious.append(iou)
            dices.append(dice)
            sums[c][0] += iou
            sums[c][1] += dice
            sums[c][2] += 1
        if ious:
            frame_iou.append(np.mean(ious))
            frame_dice.append(np.mean(dices))
    per_iou = {c: s[0] / s[2] for c, s in sums.items() if s[2]}
    per_dice = {c: s[1] / s[2] for c, s in sums.items() if s[2]}
    miou = float(np.mean(frame_iou)) if frame_iou else 0.0
    mdice = float(np.mean(frame_dice)) if frame_dice else 0.0
    return miou, mdice, per_iou, per_dice


# ---------------------------------------------------------------- instances


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def mask_to_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight ``[x0, y0, x1, y1)`` box of a 2-D mask (pixel-edge coordinates)."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("cannot derive a box from an empty mask")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(scores, is_tp, num_gt: int) -> float:
    """Area under the all-points interpolated precision/recall curve."""
    if num_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    hits = np.asarray(is_tp, dtype=float)[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = np.concatenate([[0.0], tp / num_gt])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    # precision envelope, right to left
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * precision[1:]))


def greedy_match(pred_scores, ious: np.ndarray, threshold: float) -> list[bool]:
    """Score-descending greedy matching; each ground truth is used once.

    ``ious`` is ``[n_pred, n_gt]``. Returns TP flags in the original
    prediction order.
    """
    n_pred = len(pred_scores)
    flags = [False] * n_pred
    used = set()
    for i in np.argsort(-np.asarray(pred_scores, dtype=float), kind="stable"):
        best, best_j = -1.0, None
        for j in range(ious.shape[1] if ious.size else 0):
            if j in used:
                continue
            if ious[i, j] >= threshold and ious[i, j] > best:
                best, best_j = ious[i, j], j
        if best_j is not None:
            used.add(best_j)
            flags[i] = True
    return flags


def _as_triple(p):
    if isinstance(p, tuple):
        c, s, m = p
        return int(c), float(s), np.asarray(m, bool)
    return p.class_id, float(p.score), p.mask


def _per_frame_units(preds, gts, to_region):
    """Split clip-level tubes into per-frame (class, score, region) units."""
    preds = [_as_triple(p) for p in preds]
    gts = [(g[0], np.asarray(g[-1], bool)) if isinstance(g, tuple) else (g.class_id, g.mask) for g in gts]
    masks = [m for _, _, m in preds] + [m for _, m in gts]
    if not masks:
        return []
    units = []
    for t in range(masks[0].shape[0]):
        fp = [(c, s, m[t]) for c, s, m in preds if m[t].any()]
        fg = [(c, m[t]) for c, m in gts if m[t].any()]
        units.append(([(c, s, to_region(m)) for c, s, m in fp], [(c, to_region(m)) for c, m in fg]))
    return units


def _ap_table(units, iou_fn, classes=None):
    all_classes = set()
    for preds, gts in units:
        all_classes |= {c for c, _, _ in preds} | {c for c, _ in gts}
    classes = sorted(all_classes if classes is None else classes)
    per_class_ap = {}
    counts = {f"{tau:.2f}": {"tp": 0, "fp": 0, "fn": 0} for tau in IOU_THRESHOLDS}
    for c in classes:
        num_gt = sum(1 for _, gts in units for gc, _ in gts if gc == c)
        aps = []
        for tau in IOU_THRESHOLDS:
            scores, flags = [], []
            for preds, gts in units:
                ps = [(s, r) for pc, s, r in preds if pc == c]
                gs = [r for gc, r in gts if gc == c]
                ious = np.array([[iou_fn(r, g) for g in gs] for _, r in ps]).reshape(len(ps), len(gs))
                f = greedy_match([s for s, _ in ps], ious, tau)
                scores += [s for s, _ in ps]
                flags += f
            ap = average_precision(scores, flags, num_gt)
            aps.append(ap)
            row = counts[f"{tau:.2f}"]
            ntp = int(sum(flags))
            row["tp"] += ntp
            row["fp"] += len(flags) - ntp
            row["fn"] += num_gt - ntp
        if num_gt:
            per_class_ap[c] = float(np.mean(aps))
    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return mean_ap, per_class_ap, counts


def instance_map(preds, gts):
    """Mask mAP@[0.5:0.95] with per-frame matching.

    ``preds``: list of ``(class_id, score, mask[T,H,W])``; ``gts``: list of
    :class:`~tafpnet.scenes.GroundTruthInstance`. Returns ``(map, per_class_ap,
    counts)``.
    """
    return _ap_table(_per_frame_units(preds, gts, lambda m: m), mask_iou)


def detection_map(preds, gts):
    """Box mAP@[0.5:0.95]; boxes are the tight boxes of the per-frame masks."""
    return _ap_table(_per_frame_units(preds, gts, mask_to_box), box_iou)


def box_map(pred_boxes, gt_boxes):
    """Box mAP for explicit single-image boxes.

    ``pred_boxes``: list of ``(class_id, score, box)``; ``gt_boxes``: list of
    ``(class_id, box)``.
    """
    return _ap_table([(list(pred_boxes), list(gt_boxes))], box_iou)


# ---------------------------------------------------------------- aggregation


def evaluate_clips(pairs, num_classes: int = 3) -> MetricsReport:
    """Aggregate metrics over ``(predicted, ground_truth)`` clip pairs.

    Each element is ``(sem_pred[T,H,W], inst_preds, sem_gt[T,H,W], gts)``.
    Semantic scores are averaged over clips; AP pools detections across all
    frames of all clips.
    """
    mious, mdices = [], []
    iou_acc: dict[int, list] = {}
    dice_acc: dict[int, list] = {}
    mask_units, box_units = [], []
    for sem_pred, inst_preds, sem_gt, gts in pairs:
        miou, mdice, piou, pdice = semantic_scores(sem_pred, sem_gt, num_classes)
        mious.append(miou)
        mdices.append(mdice)
        for c, v in piou.items():
            iou_acc.setdefault(c, []).append(v)
        for c, v in pdice.items():
            dice_acc.setdefault(c, []).append(v)
        mask_units += _per_frame_units(inst_preds, gts, lambda m: m)
        box_units += _per_frame_units(inst_preds, gts, mask_to_box)
    map_, per_ap, counts = _ap_table(mask_units, mask_iou)
    bmap, per_bap, _ = _ap_table(box_units, box_iou)
    return MetricsReport(
        per_class_iou={c: float(np.mean(v)) for c, v in sorted(iou_acc.items())},
        per_class_dice={c: float(np.mean(v)) for c, v in sorted(dice_acc.items())},
        miou=float(np.mean(mious)) if mious else 0.0,
        mdice=float(np.mean(mdices)) if mdices else 0.0,
        per_class_ap=per_ap,
        map_50_95=map_,
        per_class_box_ap=per_bap,
        box_map_50_95=bmap,
        counts=counts,
    )


def format_table(rows: dict[str, MetricsReport], class_names: dict[int, str]) -> str:
    """Plain-text table: one row per method, per-class IoU then overall scores."""
    ids = sorted({c for r in rows.values() for c in r.per_class_iou} | {c for r in rows.values() for c in r.per_class_ap})
    head = ["Method"] + [f"IoU {class_names.get(c, c)}" for c in ids] + ["mIoU", "mDice", "mAP", "box mAP"]
    lines = [head]
    for name, r in rows.items():
        cells_ = [name] + [
            f"{100 * r.per_class_iou[c]:.1f}" if c in r.per_class_iou else "--" for c in ids
        ]
        cells_ += [f"{100 * r.miou:.1f}", f"{100 * r.mdice:.1f}", f"{100 * r.map_50_95:.1f}", f"{100 * r.box_map_50_95:.1f}"]
        lines.append(cells_)
    widths = [max(len(str(row[i])) for row in lines) for i in range(len(head))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(row, widths)) for row in lines)
