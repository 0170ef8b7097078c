"""Deterministic area-average resampling helpers (pure numpy)."""

from __future__ import annotations

import numpy as np


def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix averaging source cells [j, j+1) into output cells
    [i*n_in/n_out, (i+1)*n_in/n_out); rows sum to 1."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


def area_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-weighted average onto an out_h x out_w grid.

    Handles non-divisible and upsampling cases by fractional cell overlap;
    constant images stay exactly constant only up to float rounding.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    wr = _overlap_weights(h, out_h)
    wc = _overlap_weights(w, out_w)
    if img.ndim == 2:
        return wr @ img @ wc.T
    return np.einsum("oh,hwc,pw->opc", wr, img, wc)


def downsample_area(img: np.ndarray, factor: int) -> np.ndarray:
    """Block mean over factor x factor cells; dimensions must divide."""
    img = np.asarray(img, dtype=np.float64)
    f = int(factor)
    h, w = img.shape[:2]
    if h % f or w % f:
        raise ValueError(f"{h}x{w} not divisible by {f}")
    if img.ndim == 2:
        return img.reshape(h // f, f, w // f, f).mean(axis=(1, 3))
    c = img.shape[2]
    return img.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))


def downsample_flow(flow: np.ndarray, factor: int) -> np.ndarray:
    """Area-mean the displacement field and rescale to the coarse pixel unit."""
    return downsample_area(flow, factor) / float(factor)


def downsample_mask_strict(mask: np.ndarray, factor: int) -> np.ndarray:
    """A coarse pixel is true only when every child pixel is true."""
    f = int(factor)
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    if h % f or w % f:
        raise ValueError(f"{h}x{w} not divisible by {f}")
    return m.reshape(h // f, f, w // f, f).all(axis=(1, 3))
