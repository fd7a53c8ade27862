"""Attention rollout over captured image-attention traces, saliency
upsampling, and heatmap overlay rendering/export."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .domain import ImageBuffer
from .encoders import AttentionTrace
from .imaging import save_png


class EmptyTrace(ValueError):
    pass


class DimensionError(ValueError):
    pass


class IoError(OSError):
    pass


DEFAULT_COLORMAP = "blue-red"


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray  # G x G, min-max normalized to [0,1]; constant input -> zeros
    normalization: str = "min-max"


@dataclass(frozen=True)
class HeatmapOverlay:
    image: ImageBuffer
    alpha: float
    colormap: str


def rollout_matrix(trace: AttentionTrace) -> np.ndarray:
    """Product of residual-mixed, row-normalized, head-averaged attention
    matrices, later layers applied on the left. Rows stay stochastic."""
    if not getattr(trace, "layers", ()):
        raise EmptyTrace("attention trace has no layers")
    t = trace.layers[0].shape[-1]
    result = np.eye(t, dtype=np.float64)
    identity = np.eye(t, dtype=np.float64)
    for attn in trace.layers:
        mixed = 0.5 * np.asarray(attn, dtype=np.float64).mean(axis=0) + 0.5 * identity
        mixed /= mixed.sum(axis=1, keepdims=True)
        result = mixed @ result
    return result


def class_patch_attribution(trace: AttentionTrace) -> np.ndarray:
    """Raw (un-normalized) class-token attribution over patch tokens, G x G."""
    row = rollout_matrix(trace)[0, 1:]
    g = int(math.isqrt(row.size))
    if g * g != row.size:
        raise DimensionError(f"{row.size} patch tokens do not form a square grid")
    return row.reshape(g, g)


def rollout(trace: AttentionTrace) -> SaliencyMap:
    """Class-token patch attribution, min-max normalized; a constant
    attribution yields an all-zero grid."""
    grid = class_patch_attribution(trace)
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo <= 0.0:
        return SaliencyMap(grid=np.zeros_like(grid))
    return SaliencyMap(grid=(grid - lo) / (hi - lo))


def quadrant_mass(grid: np.ndarray, quadrant: str = "top-left") -> float:
    """Fraction of total grid mass inside one quadrant; 0.25 means uniform.

    Returns 0.25 for an all-zero grid (no attribution signal either way).
    """
    g = grid.shape[0]
    h = g // 2
    regions = {
        "top-left": grid[:h, :h],
        "top-right": grid[:h, h:],
        "bottom-left": grid[h:, :h],
        "bottom-right": grid[h:, h:],
    }
    total = float(grid.sum())
    if total <= 0:
        return 0.25
    return float(regions[quadrant].sum()) / total


def upsample(saliency: SaliencyMap, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling with grid cells centered at patch centers; output
    values never exceed the input extrema."""
    grid = np.asarray(saliency.grid, dtype=np.float64)
    g_h, g_w = grid.shape
    if height < g_h or width < g_w:
        raise DimensionError(f"target {height}x{width} smaller than grid {g_h}x{g_w}")

    def axis_coords(n_out: int, n_grid: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        scale = n_out / n_grid
        pos = (np.arange(n_out) + 0.5) / scale - 0.5
        pos = np.clip(pos, 0.0, n_grid - 1.0)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_grid - 1)
        frac = pos - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(height, g_h)
    xlo, xhi, fx = axis_coords(width, g_w)
    top = grid[ylo][:, xlo] * (1 - fx) + grid[ylo][:, xhi] * fx
    bottom = grid[yhi][:, xlo] * (1 - fx) + grid[yhi][:, xhi] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def _blue_red(values: np.ndarray) -> np.ndarray:
    """Linear ramp from blue (0) to red (1); shape (..., 3) floats in 0..255."""
    v = np.clip(values, 0.0, 1.0)
    out = np.zeros(v.shape + (3,), dtype=np.float64)
    out[..., 0] = v * 255.0
    out[..., 2] = (1.0 - v) * 255.0
    return out


COLORMAPS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"blue-red": _blue_red}


def render_overlay(
    banner: ImageBuffer,
    saliency_field: np.ndarray,
    alpha: float = 0.5,
    colormap: str = DEFAULT_COLORMAP,
) -> HeatmapOverlay:
    """Per-pixel blend: (1 - alpha) * banner + alpha * colormap(saliency),
    rounded to the nearest channel value."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if colormap not in COLORMAPS:
        raise ValueError(f"unknown colormap {colormap!r}; have {sorted(COLORMAPS)}")
    field = np.asarray(saliency_field, dtype=np.float64)
    if field.shape != (banner.height, banner.width):
        raise DimensionError(
            f"saliency {field.shape} does not match banner {banner.height}x{banner.width}"
        )
    colored = COLORMAPS[colormap](field)
    blended = (1.0 - alpha) * banner.pixels.astype(np.float64) + alpha * colored
    pixels = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return HeatmapOverlay(image=ImageBuffer.from_array(pixels), alpha=alpha, colormap=colormap)


def export_heatmap(
    overlay: HeatmapOverlay,
    saliency: SaliencyMap,
    path_prefix: str,
    model_id: str = "",
    ad_id: str = "",
) -> tuple[str, str]:
    """Write <prefix>.png plus a <prefix>.json sidecar carrying the raw grid.

    The sidecar's grid round-trips exactly through JSON.
    """
    directory = os.path.dirname(os.path.abspath(path_prefix))
    if not os.path.isdir(directory):
        raise IoError(f"directory does not exist: {directory}")
    png_path = path_prefix + ".png"
    json_path = path_prefix + ".json"
    try:
        save_png(overlay.image, png_path)
        sidecar = {
            "grid": saliency.grid.tolist(),
            "alpha": overlay.alpha,
            "colormap": overlay.colormap,
            "model_id": model_id,
            "ad_id": ad_id,
        }
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"failed writing heatmap files at {path_prefix!r}: {exc}") from exc
    return png_path, json_path
