"""Command-line entry point: generate | train | eval | gradcheck | inspect.

Exit codes: 0 success, 2 usage or configuration error (including missing
files), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, RunConfig, load
from .fusion import TAFPNet, load_checkpoint
from .inference import instances_from_prediction, semantic_from_prediction
from .metrics import evaluate_clips, format_table
from .scenes import CLASS_NAMES, generate, load_clip, read_split, semantic_labels, write_split
from .training import NumericFailure, train_loop

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("tafpnet")


class UsageError(Exception):
    pass


def worker_count() -> int:
    """Thread cap from ``TAFP_THREADS`` (default: 1)."""
    raw = os.environ.get("TAFP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"TAFP_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError(f"TAFP_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn, items):
    """Ordered map, threaded up to the worker cap; results do not depend on it."""
    items = list(items)
    n = min(worker_count(), max(len(items), 1))
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")
    return path


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} already exists; pass --force to overwrite")


def _build_model(cfg: RunConfig) -> TAFPNet:
    return TAFPNet(cfg.model, seed=cfg.train.seed)


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, args) -> int:
    out = cfg.paths.data
    _refuse_overwrite(out / "index.json", args.force)
    base = cfg.data.scene.seed
    n_train, n_val = cfg.data.n_train, cfg.data.n_val
    specs = [cfg.data.scene.replace(seed=base + i) for i in range(n_train + n_val)]
    samples = _map(generate, specs)
    write_split(out, samples[:n_train], samples[n_train:])
    (out / "config.ini").write_text(cfg.to_ini())
    print(f"wrote {n_train} train + {n_val} val clips to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data_dir = _require(cfg.paths.data, "data directory")
    _require(data_dir / "index.json", "split index")
    out = cfg.paths.sub("train")
    _refuse_overwrite(out / "checkpoint.tafw", args.force)
    if args.force and (out / "loss.csv").exists():
        (out / "loss.csv").unlink()
    dataset = read_split(data_dir, "train")
    model = _build_model(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    try:
        result = train_loop(model, dataset, cfg.train, out)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    last = f"{result.losses[-1]:.6f}" if result.losses else "n/a"
    print(f"trained {cfg.train.iterations} iterations, final loss {last}, checkpoint {result.checkpoint}")
    return EXIT_OK


def _eval_pairs_from_predictions(data_dir: Path, pred_dir: Path):
    index = json.loads((data_dir / "index.json").read_text())
    pairs = []
    for name in index["val"]:
        gt = load_clip(data_dir / name)
        pred = load_clip(_require(pred_dir / name, "prediction file"))
        shape = gt.clip.shape[1:]
        pairs.append((semantic_labels(pred.instances, shape), pred.instances, gt.semantic_labels(), gt.instances))
    return pairs


def _eval_pairs_from_model(cfg: RunConfig, data_dir: Path, checkpoint: Path):
    model = _build_model(cfg)
    load_checkpoint(checkpoint, model)

    def one(sample):
        with ad.no_grad():
            pred = model(sample.clip)
        return semantic_from_prediction(pred), instances_from_prediction(pred), sample.semantic_labels(), sample.instances

    return _map(one, read_split(data_dir, "val"))


def cmd_eval(cfg: RunConfig, args) -> int:
    data_dir = _require(cfg.paths.data, "data directory")
    _require(data_dir / "index.json", "split index")
    if args.predictions:
        pairs = _eval_pairs_from_predictions(data_dir, _require(Path(args.predictions), "predictions directory"))
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else cfg.paths.sub("train") / "checkpoint.tafw"
        pairs = _eval_pairs_from_model(cfg, data_dir, _require(ckpt, "checkpoint"))
    report = evaluate_clips(pairs, num_classes=cfg.model.num_classes + 1)
    out = cfg.paths.sub("eval")
    _refuse_overwrite(out / "report.json", args.force)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json")
    table = format_table({cfg.model.ablation: report}, CLASS_NAMES)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import format_rows, run_checks

    rows = run_checks(args.ops or None, points=args.points, seed=cfg.train.seed)
    print(format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM; ``image`` is scaled from [0, 1]."""
    img = np.clip(np.round(np.asarray(image, dtype=float) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def query_tubes(attention: np.ndarray, cell_shape) -> np.ndarray:
    """Per query and frame, the (y, x) cell receiving the most attention.

    ``attention`` is ``[heads, K_q, T*H*W]``; result is ``[K_q, T, 2]``.
    """
    t, h, w = cell_shape
    weights = attention.mean(axis=0).reshape(-1, t, h * w)
    best = weights.argmax(axis=-1)
    return np.stack([best // w, best % w], axis=-1)


def cmd_inspect(cfg: RunConfig, args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.paths.sub("train") / "checkpoint.tafw"
    _require(ckpt, "checkpoint")
    if args.clip:
        sample = load_clip(_require(Path(args.clip), "clip file"))
    else:
        sample = read_split(_require(cfg.paths.data, "data directory"), "val")[0]
    out = cfg.paths.sub("inspect")
    _refuse_overwrite(out / "manifest.json", args.force)
    out.mkdir(parents=True, exist_ok=True)
    model = _build_model(cfg)
    load_checkpoint(ckpt, model)
    trace: dict = {}
    with ad.no_grad():
        pred = model(sample.clip, trace)
    written = []

    def snap(name, arr):
        ad.save_snapshot(out / name, arr)
        written.append(name)

    for l, lvl in enumerate(trace["pyramid"]):
        snap(f"pyramid_level{l}.taft", lvl)
    for m, stage in enumerate(trace.get("stages", [])):
        for i, amap in enumerate(stage["aafp_maps"]):
            kind = "anatomy" if i % 2 == 0 else "instrument"
            snap(f"stage{m}_level{i // 2}_{kind}_e_temp.taft", amap.e_temp)
        if "queries" in stage:
            q = stage["queries"]
            cell_shape = model.cfg.frames, *trace["pyramid"][model.cfg.working_level].shape[-2:]
            snap(f"stage{m}_query_indices.taft", np.asarray(q.indices, dtype=float))
            snap(f"stage{m}_query_positions.taft", q.position)
            snap(f"stage{m}_query_tubes.taft", query_tubes(stage["attention"].data, cell_shape).astype(float))
    snap("mask_logits.taft", pred.mask_logits)
    labels = semantic_from_prediction(pred)
    gt = sample.semantic_labels()
    for t in range(labels.shape[0]):
        for name, img in ((f"pred_labels_t{t}.pgm", labels[t] / 2), (f"gt_labels_t{t}.pgm", gt[t] / 2)):
            write_pgm(out / name, img)
            written.append(name)
        frame = sample.clip[:, t].mean(axis=0)
        write_pgm(out / f"frame_t{t}.pgm", frame)
        written.append(f"frame_t{t}.pgm")
    (out / "manifest.json").write_text(json.dumps(sorted(written), indent=2) + "\n")
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tafp", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [model] [data] [train] [paths] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key")
    common.add_argument("--out", help="shorthand for --set paths.out_dir=...")
    common.add_argument("--seed", type=int, help="shorthand for --set train.seed=... and data.seed=...")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic train/val split")
    sub.add_parser("train", parents=[common], help="train and write checkpoint + loss.csv")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or a predictions directory")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of clip files named like the val split")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--ops", nargs="*", help="subset of operator names")
    p = sub.add_parser("inspect", parents=[common], help="dump pyramid, E_temp maps, query tubes and masks")
    p.add_argument("--checkpoint")
    p.add_argument("--clip", help="clip file (default: first val clip)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.set)
    if args.out:
        overrides.append(f"paths.out_dir={args.out}")
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    try:
        worker_count()
        cfg = load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
