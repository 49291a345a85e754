"""Array resampling used for score maps and positional grids.

Bilinear interpolation uses the half-pixel-center convention: output pixel
j samples the source at (j + 0.5) * (in / out) - 0.5, clamped to the valid
range. Constant inputs therefore stay constant and no out-of-range values
are invented.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ShapeError, ValidationError

RESIZE_MODES = ("bilinear", "nearest")


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    scale = n_in / n_out
    return (np.arange(n_out) + 0.5) * scale - 0.5


def _check_args(a: np.ndarray, out_h: int, out_w: int) -> None:
    if a.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C) array, got shape {a.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ValidationError(f"output size must be positive, got {out_h}x{out_w}")


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W) or (H, W, C) arrays with bilinear interpolation."""
    a = np.asarray(arr)
    _check_args(a, out_h, out_w)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    if a.dtype.kind != "f":
        a = a.astype(np.float64)
    in_h, in_w = a.shape[:2]

    ys = np.clip(_source_coords(out_h, in_h), 0.0, in_h - 1.0)
    xs = np.clip(_source_coords(out_w, in_w), 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).astype(a.dtype)[:, None, None]
    wx = (xs - x0).astype(a.dtype)[None, :, None]

    top = a[y0[:, None], x0[None, :]] * (1 - wx) + a[y0[:, None], x1[None, :]] * wx
    bot = a[y1[:, None], x0[None, :]] * (1 - wx) + a[y1[:, None], x1[None, :]] * wx
    out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with nearest-neighbor sampling (half-pixel centers)."""
    a = np.asarray(arr)
    _check_args(a, out_h, out_w)
    in_h, in_w = a.shape[:2]
    ys = np.clip(np.round(_source_coords(out_h, in_h)), 0, in_h - 1).astype(np.intp)
    xs = np.clip(np.round(_source_coords(out_w, in_w)), 0, in_w - 1).astype(np.intp)
    return a[ys[:, None], xs[None, :]]


def resize(arr: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    if mode == "bilinear":
        return bilinear_resize(arr, out_h, out_w)
    if mode == "nearest":
        return nearest_resize(arr, out_h, out_w)
    raise ConfigurationError(f"unknown resize mode {mode!r}; expected one of {RESIZE_MODES}")
