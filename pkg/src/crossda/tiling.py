"""Overlapping tiled inference with cosine-window blending."""

from __future__ import annotations

import numpy as np
import torch

from .raster import tile_offsets


def cosine_window(size: int) -> np.ndarray:
    """1-D Hann-type window; shifted copies at 50% overlap sum to one."""
    i = np.arange(size, dtype=np.float64)
    return np.sin(np.pi * (i + 0.5) / size) ** 2


def _pad_to(x: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = h - x.shape[-2], w - x.shape[-1]
    if ph <= 0 and pw <= 0:
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, max(ph, 0)), (0, max(pw, 0))], mode="symmetric")


@torch.no_grad()
def run_network(net, array: np.ndarray, halo: int = 0, multiple: int = 1) -> np.ndarray:
    """Single-pass inference on a ``(C, H, W)`` array.

    The input is padded with ``halo`` symmetric pixels (plus whatever is
    needed to reach a multiple of ``multiple``) and the output is cropped back.
    """
    c, h, w = array.shape
    x = np.pad(array, [(0, 0), (halo, halo), (halo, halo)], mode="symmetric") if halo else array
    hh = -(-x.shape[1] // multiple) * multiple
    ww = -(-x.shape[2] // multiple) * multiple
    x = _pad_to(x, hh, ww)
    out = net(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None])[0].numpy()
    return out[:, halo : halo + h, halo : halo + w]


@torch.no_grad()
def tiled_apply(
    net,
    array: np.ndarray,
    tile: int,
    overlap: float = 0.5,
    halo: int = 0,
    multiple: int = 1,
    batch: int = 16,
) -> np.ndarray:
    """Blend ``net`` outputs over ``tile``-sized windows of a ``(C, H, W)`` array.

    Each window is read with ``halo`` pixels of context (symmetric padding at
    the image border) that is discarded after inference, so interior outputs
    match a single pass whenever ``halo`` covers the receptive field.
    """
    c, h, w = array.shape
    small = h < tile or w < tile
    if small:
        array = _pad_to(array, max(h, tile), max(w, tile))
    H, W = array.shape[1:]
    stride = max(1, int(round(tile * (1 - overlap))))
    rows = tile_offsets(H, tile, stride)
    cols = tile_offsets(W, tile, stride)
    padded = np.pad(array, [(0, 0), (halo, halo), (halo, halo)], mode="symmetric") if halo else array
    win = np.outer(cosine_window(tile), cosine_window(tile))

    acc = None
    weight = np.zeros((H, W), dtype=np.float64)
    offsets = [(r, c_) for r in rows for c_ in cols]
    span = tile + 2 * halo
    for start in range(0, len(offsets), batch):
        chunk = offsets[start : start + batch]
        x = np.stack([padded[:, r : r + span, c_ : c_ + span] for r, c_ in chunk])
        hh = -(-span // multiple) * multiple
        x = _pad_to(x, hh, hh)
        y = net(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))).numpy()
        y = y[:, :, halo : halo + tile, halo : halo + tile]
        if acc is None:
            acc = np.zeros((y.shape[1], H, W), dtype=np.float64)
        for (r, c_), out in zip(chunk, y):
            acc[:, r : r + tile, c_ : c_ + tile] += out * win
            weight[r : r + tile, c_ : c_ + tile] += win
    result = (acc / weight).astype(np.float32)
    return result[:, :h, :w] if small else result
