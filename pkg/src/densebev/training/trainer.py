"""Training loop and model-level evaluation over synthetic sequences."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as T
from ..geometry import boxes_to_array
from ..model import DenseBEV, ForwardResult
from .losses import LossConfig, Targets, total_loss
from .metrics import evaluate_many
from .optim import clip_grad_norm, make_optimizer


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    steps: int = 2000
    optimizer: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    clip: float = 5.0
    seed: int = 0
    log_every: int = 50


def targets_of(scene, use_velocity: bool) -> Targets:
    return Targets.from_boxes(scene.gt_boxes, scene.gt_labels, use_velocity)


def run_sequence(model: DenseBEV, sequence, train: bool = True) -> ForwardResult:
    """Forward every frame; only the last one keeps its graph."""
    state = None
    for scene in sequence[:-1]:
        with T.no_grad():
            state = model.forward(scene.observation, scene.ego_pose, scene.timestamp, state, train).state
    last = sequence[-1]
    return model.forward(last.observation, last.ego_pose, last.timestamp, state, train)


def sequence_loss(model: DenseBEV, sequence, loss_cfg: LossConfig | None = None):
    result = run_sequence(model, sequence)
    targets = targets_of(sequence[-1], model.config.use_velocity)
    total, per_head, _ = total_loss(result, targets, model.config.lambdas, loss_cfg)
    return total, per_head, result


def train(model: DenseBEV, dataset, cfg: TrainConfig | None = None, loss_cfg: LossConfig | None = None,
          on_log=None, on_epoch=None) -> list:
    """Optimise ``model`` on ``dataset`` (a list of scene sequences) one sequence per step.

    Returns the per-step loss history. ``on_log(record)`` is called every
    ``log_every`` steps and ``on_epoch(record)`` after each pass over the data.
    Raises :class:`NonFiniteLoss` on a NaN or infinite loss.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.params, cfg.lr, cfg.momentum)
    history = []
    order = []
    epoch, epoch_losses = 0, []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(dataset)))
        seq = dataset[order.pop()]
        model.zero_grad()
        loss, per_head, _ = sequence_loss(model, seq, loss_cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(step, value)
        if loss.requires_grad:
            loss.backward()
            clip_grad_norm(model.params, cfg.clip)
            opt.step()
        history.append(value)
        epoch_losses.append(value)
        if on_log and cfg.log_every and (step + 1) % cfg.log_every == 0:
            on_log({"step": step + 1, "loss": float(np.mean(history[-cfg.log_every:])),
                    "heads": per_head, "elapsed": time.perf_counter() - t0})
        if not order:
            if on_epoch:
                on_epoch({"epoch": epoch, "steps": step + 1, "mean_loss": float(np.mean(epoch_losses))})
            epoch += 1
            epoch_losses = []
    return history


def predict_sequences(model: DenseBEV, dataset, score_threshold: float | None = None):
    """Per frame ``(pred_boxes, confidence, labels, gt_boxes, gt_labels)`` in streaming order."""
    thr = model.config.score_threshold if score_threshold is None else score_threshold
    frames = []
    for seq in dataset:
        state = None
        for scene in seq:
            with T.no_grad():
                res = model.forward(scene.observation, scene.ego_pose, scene.timestamp, state, train=False)
            state = res.state
            dets = res.detections(thr)
            frames.append((boxes_to_array([d.box for d in dets]),
                           np.array([d.confidence for d in dets]),
                           np.array([d.label for d in dets], dtype=np.int64),
                           boxes_to_array(scene.gt_boxes), scene.gt_labels))
    return frames


def evaluate_model(model: DenseBEV, dataset, iou_threshold: float = 0.5,
                   score_threshold: float | None = None, use_labels: bool = True) -> dict:
    return evaluate_many(predict_sequences(model, dataset, score_threshold), iou_threshold, use_labels)


def config_record(cfg) -> dict:
    return asdict(cfg)
