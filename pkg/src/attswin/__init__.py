"""Att-SwinU-Net: Swin U-Net with attention-guided skip connections, on a numpy autodiff core."""
from .network import AttSwinUNet, ModelConfig, apply_ablation, build, forward_baseline
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "AttSwinUNet",
    "ModelConfig",
    "Parameter",
    "Tensor",
    "apply_ablation",
    "build",
    "forward_baseline",
    "no_grad",
]
