"""Heatmap-based landmark localisation: encoding, decoding, adaptive sigmas and evaluation."""

__version__ = "0.1.0"

from .adaptive import (LossConfig, NesterovSGD, SchedulerState, adaloss_update, fit_sigma,
                       gradient_step, heatmap_l2_loss, loss_grad_sigma)
from .decode import (Activation, DecodeConfig, DegenerateHeatmapError, decode, decode_argmax,
                     decode_local_weighted_mean, decode_multi_instance, decode_weighted_mean)
from .encode import CovarianceSpec, Heatmap, HeatmapGenerator, encode, encode_grad, mask_to_landmarks
from .geometry import (AffineTransform, LandmarkSet, PatchSpec, apply_affine, compose, crop_roi, invert,
                       patch_to_global)
from .metrics import ReportConfig, detection_report, point_error, sdr

__all__ = [
    "Activation", "AffineTransform", "CovarianceSpec", "DecodeConfig", "DegenerateHeatmapError",
    "Heatmap", "HeatmapGenerator", "LandmarkSet", "LossConfig", "NesterovSGD", "PatchSpec",
    "ReportConfig", "SchedulerState", "adaloss_update", "apply_affine", "compose", "crop_roi",
    "decode", "decode_argmax", "decode_local_weighted_mean", "decode_multi_instance",
    "decode_weighted_mean", "detection_report", "encode", "encode_grad", "fit_sigma",
    "gradient_step", "heatmap_l2_loss", "invert", "loss_grad_sigma", "mask_to_landmarks",
    "patch_to_global", "point_error", "sdr",
]
