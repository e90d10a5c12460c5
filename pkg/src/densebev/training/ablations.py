"""Paired desk-scale ablations: two model variants trained and scored on the same data per seed."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..model import DenseBEV, DenseBEVConfig
from .scenes import SceneConfig, generate_dataset
from .trainer import TrainConfig, evaluate_model, train

SMALL_GRID = dict(grid_n=16, grid_m=16, extent_x=8.0, extent_y=8.0)


@dataclass(frozen=True)
class Suite:
    name: str
    scene: SceneConfig
    model: DenseBEVConfig
    frames: int = 1
    num_train: int = 200
    num_test: int = 40
    steps: int = 2000
    iou: float = 0.5


def small_object_suite(**kw) -> Suite:
    """Mostly small objects whose footprint is at most two cells."""
    scene = SceneConfig(**SMALL_GRID, num_objects=(2, 5), class_probs=(0.2, 0.8))
    model = DenseBEVConfig(**SMALL_GRID, n_queries=24)
    return replace(Suite("small_objects", scene, model), **kw)


def multi_frame_suite(**kw) -> Suite:
    """Short sequences with a moving ego where objects drop out of single frames."""
    scene = SceneConfig(**SMALL_GRID, num_objects=(2, 5), occlusion=0.3, ego_speed=1.0, ego_yaw_rate=0.1)
    model = DenseBEVConfig(**SMALL_GRID, n_queries=24, use_memory=True, memory_frames=2, memory_budget=8)
    return replace(Suite("multi_frame", scene, model, frames=3), **kw)


def duplicate_suite(**kw) -> Suite:
    """Large objects only, so many neighbouring cells predict the same box."""
    scene = SceneConfig(**SMALL_GRID, num_objects=(2, 4), class_probs=(1.0, 0.0))
    model = DenseBEVConfig(**SMALL_GRID, n_queries=24)
    return replace(Suite("duplicates", scene, model), **kw)


def run_arm(suite: Suite, model_cfg: DenseBEVConfig, seed: int) -> dict:
    train_data = generate_dataset(seed, suite.num_train, suite.scene, suite.frames)
    test_data = generate_dataset(10_000 + seed, suite.num_test, suite.scene, suite.frames)
    model = DenseBEV(replace(model_cfg, seed=seed))
    history = train(model, train_data, TrainConfig(steps=suite.steps, seed=seed, log_every=0))
    metrics = evaluate_model(model, test_data, suite.iou)
    metrics["final_loss"] = float(np.mean(history[-50:]))
    return metrics


def paired_comparison(suite: Suite, overrides_a: dict, overrides_b: dict, seeds=range(5)) -> dict:
    """F1 of variant ``a`` and ``b`` per seed, trained on identical data."""
    f1_a, f1_b = [], []
    for s in seeds:
        f1_a.append(run_arm(suite, replace(suite.model, **overrides_a), s)["f1"])
        f1_b.append(run_arm(suite, replace(suite.model, **overrides_b), s)["f1"])
    f1_a, f1_b = np.array(f1_a), np.array(f1_b)
    return {"suite": suite.name, "a": f1_a.tolist(), "b": f1_b.tolist(),
            "mean_a": float(f1_a.mean()), "mean_b": float(f1_b.mean()),
            "mean_diff": float((f1_a - f1_b).mean())}
