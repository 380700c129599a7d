"""Integrated Grad-CAM and related gradient-based attribution for small CNNs."""
from .attribution import (ActivationDelta, AttributionRequest, PathSpec, SaliencyMap, delta_maps,
                          explain, grad_cam, grad_cam_pp, integrated_grad_cam,
                          integrated_gradients, path_point)
from .engine import LayerSpec, ModelBundle, TapResult, backward_to_layer, forward, score
from .metrics import GroundTruth, bbox_score, drop_increase, ebpg, threshold_top
from .postprocess import normalize_max, render, upsample_bilinear

__version__ = "0.1.0"
