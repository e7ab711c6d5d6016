"""Graph-convolutional amplitude predictor with manual backpropagation."""

from .layers import gcn_layer_backward, gcn_layer_forward
from .losses import (DEFAULT_LOSS_RES, IdentityExtractor, LossContext,
                     RandomConvExtractor, loss_perceptual,
                     loss_reconstruction, loss_total, loss_weighted_l2,
                     render_basis)
from .model import (CHECKPOINT_FORMAT, ModelConfig, PredictorModel,
                    backbone_forward, checkpoint_hash, init_model,
                    load_checkpoint, model_backward, model_forward,
                    save_checkpoint)
from .train import (AdamState, Sample, TrainConfig, adam_step, grad_check,
                    sample_loss_and_grads, synthetic_overfit_dataset, train,
                    training_psnr)

__all__ = [
    "AdamState", "CHECKPOINT_FORMAT", "DEFAULT_LOSS_RES", "IdentityExtractor",
    "LossContext", "ModelConfig", "PredictorModel", "RandomConvExtractor",
    "Sample", "TrainConfig", "adam_step", "backbone_forward",
    "checkpoint_hash", "gcn_layer_backward", "gcn_layer_forward",
    "grad_check", "init_model", "load_checkpoint", "loss_perceptual",
    "loss_reconstruction", "loss_total", "loss_weighted_l2",
    "model_backward", "model_forward", "render_basis",
    "sample_loss_and_grads", "save_checkpoint", "synthetic_overfit_dataset",
    "train", "training_psnr",
]
