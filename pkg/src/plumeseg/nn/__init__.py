"""Small numpy tensor engine and the adapted U-Net."""

from plumeseg.nn.checkpoint import load_checkpoint, save_checkpoint
from plumeseg.nn.gradcheck import GradCheckReport, gradient_check
from plumeseg.nn.ops import (
    bce_loss,
    bce_loss_backward,
    concat_skip,
    conv2d,
    conv2d_backward,
    mae_loss,
    mae_loss_backward,
    maxpool2,
    maxpool2_backward,
    prelu,
    prelu_backward,
    sigmoid,
    sigmoid_backward,
    upconv2,
    upconv2_backward,
)
from plumeseg.nn.optim import ModelState, TrainHyper, adam_step, lr_at_epoch
from plumeseg.nn.unet import UNet, UNetConfig, build_unet, count_parameters, parameter_shapes
