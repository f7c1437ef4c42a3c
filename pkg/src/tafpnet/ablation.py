"""Directional ablation benchmark: BaseNet, AFPNet and TAFPNet on occlusion-heavy clips.

All three variants share the same benchmark clips, hyperparameters and
seeds, so the only difference between runs is the set of modules switched
on. Parameters common to two variants start from the same values because
initialization is keyed by parameter name.

Training draws a fresh synthetic clip per iteration. With a small fixed
training set the larger stage models mostly measure overfitting.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .fusion import ABLATIONS, ModelConfig, TAFPNet
from .inference import instances_from_prediction, semantic_from_prediction
from .metrics import evaluate_clips
from .scenes import SceneSpec, make_split
from .training import TrainConfig, train_loop


@dataclass(frozen=True)
class AblationSetup:
    seeds: tuple[int, ...] = (0, 1, 2)
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(occlusion_bias=1.0, blur_strength=0.5))
    data_seed: int = 1000
    n_train: int = 600  # one fresh clip per iteration at batch 1: no clip is revisited
    n_eval: int = 20
    iterations: int = 600
    batch: int = 1
    lr: float = 2e-3
    channels: tuple[int, ...] = (16, 32, 48, 64)
    d: int = 32
    num_stages: int = 2
    k_q: int = 8
    dtype: str = "float32"

    def model_config(self, ablation: str) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            k_q=self.k_q,
            num_stages=self.num_stages,
            channels=self.channels,
            frames=self.scene.T,
            ablation=ablation,
            dtype=self.dtype,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch=self.batch, lr=self.lr, seed=seed, log_interval=50)


@dataclass
class AblationResult:
    miou: dict[str, list[float]]  # variant -> per-seed mIoU on the eval clips
    seconds: dict[str, list[float]]

    def mean(self, variant: str) -> float:
        return float(np.mean(self.miou[variant]))

    def ordered(self) -> bool:
        """TAFPNet >= AFPNet >= BaseNet on mean mIoU."""
        return self.mean("tafpnet") >= self.mean("afpnet") >= self.mean("basenet")

    def margin(self) -> float:
        return self.mean("tafpnet") - self.mean("basenet")

    def to_json(self) -> str:
        means = {k: self.mean(k) for k in self.miou}
        return json.dumps({"miou": self.miou, "mean_miou": means, "seconds": self.seconds}, indent=2, sort_keys=True)


def benchmark_clips(setup: AblationSetup):
    """``(train, eval)`` samples; the eval clips are the same for every seed."""
    return make_split(setup.data_seed, setup.n_train, setup.n_eval, template=setup.scene)


def evaluate_model(model: TAFPNet, clips) -> float:
    pairs = []
    for sample in clips:
        with ad.no_grad():
            pred = model(sample.clip)
        pairs.append((semantic_from_prediction(pred), instances_from_prediction(pred), sample.semantic_labels(), sample.instances))
    return evaluate_clips(pairs, num_classes=model.cfg.num_classes + 1).miou


def run_variant(setup: AblationSetup, ablation: str, seed: int, clips=None) -> float:
    train, val = clips if clips is not None else benchmark_clips(setup)
    model = TAFPNet(setup.model_config(ablation), seed=seed)
    train_loop(model, train, setup.train_config(seed))
    return evaluate_model(model, val)


def run_ablation(setup: AblationSetup = AblationSetup(), log=None) -> AblationResult:
    clips = benchmark_clips(setup)
    miou: dict[str, list[float]] = {a: [] for a in ABLATIONS}
    seconds: dict[str, list[float]] = {a: [] for a in ABLATIONS}
    for seed in setup.seeds:
        for ablation in ABLATIONS:
            start = time.perf_counter()
            score = run_variant(setup, ablation, seed, clips)
            miou[ablation].append(score)
            seconds[ablation].append(time.perf_counter() - start)
            if log is not None:
                log(f"seed {seed} {ablation}: mIoU {score:.4f} ({seconds[ablation][-1]:.0f}s)")
    return AblationResult(miou, seconds)


def write_result(path, result: AblationResult, setup: AblationSetup) -> None:
    setup_dict = asdict(setup)
    Path(path).write_text(json.dumps({"setup": setup_dict, **json.loads(result.to_json())}, indent=2, sort_keys=True) + "\n")
