"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The overfit and ablation tests train real models and dominate the runtime
(about 4 minutes and 1 hour respectively on one core).
"""
import math
import time

import numpy as np

from tafpnet import autodiff as ad
from tafpnet.aafp import PAPER_PAIRS, KernelBank, instrument_branch
from tafpnet.ablation import AblationSetup, run_ablation
from tafpnet.autodiff import Parameter, Tensor
from tafpnet.backbone import STRIDES, extract_pyramid
from tafpnet.cli import main
from tafpnet.fusion import InstancePrediction, ModelConfig, TAFPNet
from tafpnet.gradcheck import TOLERANCE, run_checks
from tafpnet.layers import multihead
from tafpnet.metrics import instance_map, semantic_scores
from tafpnet.scenes import GroundTruthInstance, SceneSpec, generate
from tafpnet.tqp import ProjectionWeights, center_index, propagate_position
from tafpnet.training import TrainConfig, hungarian_match, instance_targets, match_cost, train_loop

import oracles

# frozen from the pilot runs recorded in the decision log
OVERFIT_LR = 2e-3
OVERFIT_CHANNELS = (16, 32, 48, 64)
# the pilot did not reach the ordering (margin -0.026), so the margin is the
# one the ordering itself implies rather than a value fitted to a failing run
ABLATION_MARGIN = 0.0
ABLATION_BUDGET_S = 3 * 3600


# ---------------------------------------------------------------- gradients


def test_gradient_suite(criterion):
    start = time.perf_counter()
    rows = run_checks(points=5)
    elapsed = time.perf_counter() - start
    worst = max(rows, key=lambda r: r.error)
    failed = [r.name for r in rows if not r.passed]
    ok = not failed and elapsed < 300 and "model_end_to_end" in {r.name for r in rows}
    criterion(
        "gradient suite",
        ok,
        f"{len(rows)} checks, worst {worst.name} {worst.error:.1e} <= {TOLERANCE:g}, {elapsed:.1f}s, failed {failed}",
    )


# ---------------------------------------------------------------- oracles


def _cross_kernel(vert, horiz):
    c_out, c_in, t, k, _ = vert.shape
    dense = np.zeros((c_out, c_in, t, k, k))
    dense[:, :, :, :, k // 2] += vert[..., 0]
    dense[:, :, :, k // 2, :] += horiz[:, :, :, 0, :]
    return dense


def test_oracle_suite(criterion):
    rng = np.random.default_rng(0)
    errors = {}

    x = rng.standard_normal((3, 3, 6, 7))
    w = rng.standard_normal((2, 3, 3, 3, 3))
    b = rng.standard_normal(2)
    errors["conv3d"] = np.max(np.abs(ad.conv3d(Tensor(x), Tensor(w), Tensor(b)).data - oracles.conv3d_loops(x, w, b)))
    strided = ad.conv3d(Tensor(x), Tensor(w), stride=(1, 2, 2)).data
    errors["conv3d_strided"] = np.max(np.abs(strided - oracles.conv3d_loops(x, w, stride=(1, 2, 2))))

    a, m = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    errors["matmul"] = np.max(np.abs((Tensor(a) @ Tensor(m)).data - oracles.matmul_loops(a, m)))
    lw, lb = rng.standard_normal((3, 5)), rng.standard_normal(3)
    lin = ad.linear(Tensor(a), Tensor(lw), Tensor(lb)).data
    errors["linear"] = np.max(np.abs(lin - (oracles.matmul_loops(a, lw.T) + lb)))

    q, k, v = rng.standard_normal((3, 6)), rng.standard_normal((7, 6)), rng.standard_normal((7, 6))
    out = multihead(Tensor(q), Tensor(k), Tensor(v), 2).data
    ref = np.concatenate([oracles.attention_loops(q[:, h:h + 3], k[:, h:h + 3], v[:, h:h + 3], 1 / math.sqrt(3)) for h in (0, 3)], axis=1)
    errors["cross_attention"] = np.max(np.abs(out - ref))

    bank = KernelBank(2, 5, "instrument", PAPER_PAIRS, prefix="i.", seed=1)
    f = rng.standard_normal((2, 5, 9, 9))
    for i, (out, (vert, horiz)) in enumerate(zip(instrument_branch(Tensor(f), bank), bank.kernels)):
        dense = oracles.conv3d_loops(f, _cross_kernel(vert.data, horiz.data))
        errors[f"strip_pair{PAPER_PAIRS[i]}"] = np.max(np.abs(out.data - dense))

    hungarian_ok = True
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        g = int(r.integers(1, 4))
        gts = [GroundTruthInstance(int(r.integers(1, 3)), r.random((1, 16, 16)) > 0.5) for _ in range(g)]
        pred = InstancePrediction(Tensor(r.standard_normal((4, 3))), Tensor(r.standard_normal((4, 1, 4, 4)) * 3))
        cost = match_cost(pred, *instance_targets(gts))
        best, _ = oracles.exhaustive_assignment(cost)
        total = sum(cost[i, j] for i, j in hungarian_match(pred, gts).pairs)
        hungarian_ok &= abs(total - best) <= 1e-12

    gt_mask = np.zeros((1, 1, 10), bool)
    gt_mask[0, 0, :6] = True
    pred_mask = np.ones((1, 1, 10), bool)  # IoU 6/10
    map_value = instance_map([(1, 0.9, pred_mask)], [GroundTruthInstance(1, gt_mask)])[0]

    worst = max(errors, key=errors.get)
    ok = max(errors.values()) <= 1e-12 and hungarian_ok and map_value == 3 / 10
    criterion(
        "oracle suite",
        ok,
        f"worst {worst} {errors[worst]:.1e}, hungarian==exhaustive {hungarian_ok}, IoU 0.6 mAP {map_value}",
    )


# ---------------------------------------------------------------- structure


def test_structural_invariants(criterion):
    checks = {}
    rng = np.random.default_rng(1)

    d = 4
    w = ProjectionWeights(d, prefix="tqp.", seed=0)
    for p, bias in ((w.fwd_w, w.fwd_b), (w.bwd_w, w.bwd_b)):
        p.data[...] = np.eye(d)
        bias.data[...] = 0.0
    f = Tensor(rng.standard_normal((d, 5, 2, 3)))
    pos = propagate_position(f, w, [0, 7, 11]).data
    checks["identity_linear_invariance"] = all(np.array_equal(pos[t], pos[2]) for t in range(5))

    w.fwd_w.data[...] = 2.0 * np.eye(d)
    w.bwd_w.data[...] = 3.0 * np.eye(d)
    pos = propagate_position(f, w, [3, 9]).data
    scale = [np.max(np.abs(pos[t])) / np.max(np.abs(pos[2])) for t in range(5)]
    chains = [round(math.log(s, 3 if t < 2 else 2)) if t != 2 else 0 for t, s in enumerate(scale)]
    checks["center_3_chains_21012"] = center_index(5) + 1 == 3 and chains == [2, 1, 0, 1, 2]

    logits = Tensor(rng.standard_normal((50, 17)) * 30)
    checks["softmax_rows"] = np.max(np.abs(ad.softmax(logits, axis=-1).data.sum(-1) - 1)) <= 1e-12

    model = TAFPNet(ModelConfig(d=8, num_heads=2, k_q=3, channels=(4, 4, 6, 6), frames=5), seed=0)
    pyr = extract_pyramid(Tensor(rng.random((3, 5, 64, 128))), model.backbone)
    checks["strides_4_8_16_32"] = tuple(STRIDES) == (4, 8, 16, 32) and all(
        lvl.shape[1:] == (5, 64 // s, 128 // s) for lvl, s in zip(pyr, STRIDES)
    )

    identity = True
    for seed in range(10):
        r = np.random.default_rng(seed)
        _, _, ious, dices = semantic_scores(r.integers(0, 3, (8, 8)), r.integers(0, 3, (8, 8)), 3)
        # exact in rationals; both sides are floats rounded from integer counts
        identity &= all(abs(dices[c] - 2 * ious[c] / (1 + ious[c])) <= 1e-15 for c in ious)
    checks["dice_iou_identity"] = identity

    names = {m: set(TAFPNet(ModelConfig(d=8, num_heads=2, k_q=3, channels=(4, 4, 6, 6), frames=3, ablation=m)).named_parameters()) for m in ("basenet", "afpnet", "tafpnet")}
    checks["ablation_inclusion"] = names["basenet"] < names["afpnet"] < names["tafpnet"]

    failed = [k for k, v in checks.items() if not v]
    criterion("structural invariants", not failed, f"{len(checks)} checks, failed {failed}")


# ---------------------------------------------------------------- determinism

TINY = [
    "model.d=8",
    "model.num_heads=2",
    "model.k_q=3",
    "model.num_stages=1",
    "model.channels=4,4,6,6",
    "model.decoder_rounds=1",
    "data.T=3",
    "data.H=32",
    "data.W=64",
    "data.n_train=2",
    "data.n_val=2",
    "train.iterations=3",
    "train.batch=1",
]


def test_determinism(criterion, tmp_path):
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["--out", str(out)] + [x for s in TINY for x in ("--set", s)]
        codes = [main([cmd, *args]) for cmd in ("generate", "train", "eval")]
        assert codes == [0, 0, 0]
        trees.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    a, b = trees
    kinds = {
        "datasets": [k for k in a if k.endswith(".tafc") or k.endswith("index.json")],
        "checkpoints": [k for k in a if k.endswith(".tafw")],
        "reports": [k for k in a if k.startswith("eval/")],
    }
    same = {kind: bool(files) and all(a[f] == b.get(f) for f in files) for kind, files in kinds.items()}
    criterion("determinism", all(same.values()) and set(a) == set(b), ", ".join(f"{k} identical={v}" for k, v in same.items()))


# ---------------------------------------------------------------- training


def test_overfit_smoke(criterion):
    cfg = ModelConfig(d=32, num_stages=2, k_q=8, frames=5, channels=OVERFIT_CHANNELS, dtype="float32")
    model = TAFPNet(cfg, seed=0)
    sample = generate(SceneSpec(seed=0, T=5, H=64, W=128))
    start = time.perf_counter()
    losses = train_loop(model, [sample], TrainConfig(iterations=200, batch=1, lr=OVERFIT_LR, seed=0)).losses
    elapsed = time.perf_counter() - start
    ratio = losses[-1] / losses[0]
    criterion(
        "overfit smoke test",
        ratio <= 0.5 and elapsed < 600,
        f"loss {losses[0]:.3f} -> {losses[-1]:.3f}, ratio {ratio:.3f} <= 0.5, {elapsed:.0f}s < 600s",
    )


def test_directional_ablation(criterion, tmp_path):
    start = time.perf_counter()
    result = run_ablation(AblationSetup())
    elapsed = time.perf_counter() - start
    (tmp_path / "ablation.json").write_text(result.to_json())
    means = {k: result.mean(k) for k in ("basenet", "afpnet", "tafpnet")}
    ok = result.ordered() and result.margin() >= ABLATION_MARGIN and elapsed < ABLATION_BUDGET_S
    criterion(
        "directional ablation",
        ok,
        "mean mIoU " + ", ".join(f"{k} {v:.4f}" for k, v in means.items())
        + f", margin {result.margin():.4f} >= {ABLATION_MARGIN}, {elapsed / 60:.0f} min",
    )


# ---------------------------------------------------------------- strip response


def test_strip_response(criterion):
    img = np.zeros((1, 1, 33, 33))
    img[0, 0, 15:18, 6:27] = 1.0  # horizontal bar, 3 x 21
    bar = img[0, 0] > 0
    detail = []
    ok = True
    for k in (3, 5, 7):
        strip = np.ones((1, 1, 1, 1, k))
        square = np.ones((1, 1, 1, k, k)) * np.linalg.norm(strip) / k

        def response(w):
            out = ad.conv3d(Tensor(img), Parameter(w)).data[0, 0]
            return out[bar].mean() / np.linalg.norm(out)

        s, q = response(strip), response(square)
        ok &= s > q
        detail.append(f"k={k}: {s:.4f} > {q:.4f}")
    criterion("strip response", ok, "; ".join(detail))
