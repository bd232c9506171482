from ipcnav.predictor.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ipcnav.predictor.gradcheck import TINY, gradient_check
from ipcnav.predictor.losses import TrainBatch, focal_loss, horizon_weights, make_batch, mep_loss
from ipcnav.predictor.model import (
    decode_detections,
    encode_history,
    evaluate_loss,
    predict_batch,
    rollout,
    rollout_raw,
    train_step,
)
from ipcnav.predictor.network import init_params
from ipcnav.predictor.types import (
    InstancePrediction,
    NonFiniteLossError,
    PredictorConfig,
    PredictorParams,
    ScenePrediction,
    StatePrediction,
)

__all__ = [
    "CheckpointError",
    "InstancePrediction",
    "NonFiniteLossError",
    "PredictorConfig",
    "PredictorParams",
    "ScenePrediction",
    "StatePrediction",
    "TINY",
    "TrainBatch",
    "decode_detections",
    "encode_history",
    "evaluate_loss",
    "focal_loss",
    "gradient_check",
    "horizon_weights",
    "init_params",
    "load_checkpoint",
    "make_batch",
    "mep_loss",
    "predict_batch",
    "rollout",
    "rollout_raw",
    "save_checkpoint",
    "train_step",
]
