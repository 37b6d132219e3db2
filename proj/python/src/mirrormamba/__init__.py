"""Selective-scan mirror detection: synthetic scenes, metrics, scans and
inference on trained checkpoints. The heavy lifting lives in the C++ core."""

import json as _json

from . import _core
from ._core import (
    ArgumentError,
    DimensionError,
    FormatError,
    Model,
    accuracy,
    cross_selective_scan,
    f_beta,
    init_scan_params,
    iou,
    mae,
    poly_lr,
    selective_scan,
)

__all__ = [
    "ArgumentError",
    "DimensionError",
    "FormatError",
    "Model",
    "accuracy",
    "cross_selective_scan",
    "f_beta",
    "generate_scene",
    "init_scan_params",
    "iou",
    "mae",
    "make_dataset",
    "poly_lr",
    "render_scene",
    "selective_scan",
]


def _with_spec(sample):
    sample["spec"] = _json.loads(sample["spec"])
    return sample


def generate_scene(height=64, width=64, cues="all", seed=0, noise=0.0):
    """Random scene; arrays are float32 [C,H,W], ``spec`` is a dict."""
    return _with_spec(_core.generate_scene(height, width, cues, seed, noise))


def render_scene(spec, seed=0):
    return _with_spec(_core.render_scene(_json.dumps(spec), seed))


def make_dataset(out_dir, n_train, n_test, cues="all", seed=0, size=96, noise=0.02):
    """Writes the dataset files and returns the manifest as a dict."""
    return _json.loads(_core.make_dataset(str(out_dir), n_train, n_test, cues, seed, size, noise))
