"""Recurrent encoders, tensor fusion models and their training."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .lstm import LstmParams, lstm_forward
from .model import (
    DivergenceError,
    FusedTensor,
    ModelParams,
    Variant,
    baseline_forward,
    fused_tensor,
    gradients,
    init_model,
    loss,
    loss_and_gradients,
    predict_logits,
    reg_scale_sq,
    t2fn_forward,
)
from .train import TrainConfig, TrainResult, evaluate, train
