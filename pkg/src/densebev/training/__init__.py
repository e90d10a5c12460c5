from .losses import LossConfig, Targets, head_loss, total_loss
from .matching import MatchResult, hungarian_match, match_cost, match_detections
from .metrics import average_precision, evaluate, evaluate_many
from .optim import Adam, MomentumSGD, make_optimizer
from .scenes import PackingError, Scene, SceneConfig, generate_dataset, generate_scene, render_observation
from .trainer import NonFiniteLoss, TrainConfig, evaluate_model, run_sequence, sequence_loss, train

__all__ = [
    "Adam", "LossConfig", "MatchResult", "MomentumSGD", "NonFiniteLoss", "PackingError", "Scene",
    "SceneConfig", "Targets", "TrainConfig", "average_precision", "evaluate", "evaluate_many",
    "evaluate_model", "generate_dataset", "generate_scene", "head_loss", "hungarian_match",
    "make_optimizer", "match_cost", "match_detections", "render_observation", "run_sequence",
    "sequence_loss", "total_loss", "train",
]
