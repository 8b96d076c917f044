"""Desk-scale instruction-conditioned latent-diffusion colorization.

A compact reimplementation of the InstructPix2Pix-style fine-tuning recipe for
colorization: frozen image autoencoder and text encoder, trainable conditional
denoiser trained on noise-prediction MSE, LAB-space pixel MSE as the
validation loss, plus the PSNR/SSIM/MAE evaluation harness and a
one-factor-at-a-time hyperparameter sweep.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
