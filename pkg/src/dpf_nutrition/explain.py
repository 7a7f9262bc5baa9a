"""Per-nutrient Grad-CAM heatmaps and depth renderings written as PNG files."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .dataset import NUTRIENTS, RGBDSample
from .depth import DepthMap
from .model import FusionNet, prepare_batch


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    task: str
    dish_id: str
    degenerate: bool = False


def normalize_heatmap(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def _task_index(task) -> int:
    if isinstance(task, int):
        if not 0 <= task < len(NUTRIENTS):
            raise ValueError(f"task index {task} out of range")
        return task
    if task not in NUTRIENTS:
        raise ValueError(f"unknown task {task!r}; expected one of {NUTRIENTS}")
    return NUTRIENTS.index(task)


def grad_cam(model: FusionNet, sample: RGBDSample, task, layer=None) -> Heatmap:
    """Gradient-weighted activation map of one task head at one feature level.

    ``layer`` is a pyramid level (0-4) or a feature name such as ``"F4"``,
    ``"C2"``, ``"R3"``; the default is the final fused map.
    """
    k = _task_index(task)
    if layer is None:
        layer = model.default_cam_layer(4)
    elif isinstance(layer, int):
        if not 0 <= layer <= 4:
            raise ValueError(f"pyramid level {layer} out of range")
        layer = model.default_cam_layer(layer)
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        rgb, depth, _ = prepare_batch([sample], model.config, dtype)
        with torch.enable_grad():
            feats = model.forward_features(rgb, depth)
            if layer not in feats or feats[layer].ndim != 4:
                raise ValueError(f"unknown layer {layer!r} for mode {model.config.ablation_mode}")
            act = feats[layer]
            (grad,) = torch.autograd.grad(feats["out"][0, k], act, allow_unused=False)
    finally:
        model.train(was_training)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=sample.size, mode="bilinear", align_corners=False)[0, 0]
    cam = cam.double().numpy()
    degenerate = not np.any(cam > 0) or cam.max() - cam.min() <= 0
    values = np.zeros_like(cam) if degenerate else normalize_heatmap(cam)
    return Heatmap(values, NUTRIENTS[k], sample.dish_id, degenerate)


# --------------------------------------------------------------------------
# rendering


def colorize(values: np.ndarray, cmap: str = "viridis") -> np.ndarray:
    """Map values in [0, 1] to an 8-bit RGB image."""
    rgba = colormaps[cmap](np.clip(values, 0, 1))
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def _png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _to_unit(d) -> np.ndarray:
    values = d.values if isinstance(d, DepthMap) else np.asarray(d, dtype=np.float64)
    if isinstance(d, DepthMap) and d.normalized:
        return values
    return normalize_heatmap(values)


def render_depth(d: DepthMap, overlay: np.ndarray | None = None, sensor: DepthMap | None = None,
                 cmap: str = "viridis") -> bytes:
    """Colormapped 8-bit PNG; optional RGB and sensor-depth panels placed side by side
    in the order rgb, predicted, sensor."""
    panels = []
    if overlay is not None:
        panels.append(np.round(np.clip(overlay, 0, 1) * 255).astype(np.uint8))
    panels.append(colorize(_to_unit(d), cmap))
    if sensor is not None:
        panels.append(colorize(_to_unit(sensor), cmap))
    return _png(np.concatenate(panels, axis=1))


def render_heatmap(heatmap: Heatmap, rgb: np.ndarray | None = None, alpha: float = 0.5) -> bytes:
    color = colorize(heatmap.values, "jet").astype(np.float64) / 255
    if rgb is not None:
        color = (1 - alpha) * np.clip(rgb, 0, 1) + alpha * color
    return _png(np.round(color * 255).astype(np.uint8))


def write_explanations(model: FusionNet, sample: RGBDSample, out_dir, layer=None) -> list[Path]:
    """Write ``<dish_id>_<task>_cam.png`` for each task and ``<dish_id>_depth.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for task in NUTRIENTS:
        hm = grad_cam(model, sample, task, layer)
        path = out_dir / f"{sample.dish_id}_{task}_cam.png"
        path.write_bytes(render_heatmap(hm, sample.rgb))
        written.append(path)
    if sample.depth is not None:
        path = out_dir / f"{sample.dish_id}_depth.png"
        path.write_bytes(render_depth(DepthMap(sample.depth), overlay=sample.rgb))
        written.append(path)
    return written
