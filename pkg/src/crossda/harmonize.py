"""Landsat-8 30 m -> Proba-V-like 333 m upscaling.

Per band: spectral band selection, Gaussian PSF at the Proba-V nadir GSD,
1-in-3 subsampling to 90 m, and separable Lanczos-3 resampling to 333 m.
Every stage is a linear, DC-preserving operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy import sparse

from .raster import BANDS, MASK_NODATA, CloudMask, Domain, MultispectralImage, RasterError

FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
LANCZOS_ORDER = 3
L8_RES = 30.0
SUBSAMPLED_RES = 90.0
PV_RES = 333.0


@dataclass(frozen=True)
class SensorBandModel:
    band: str
    gsd_m: float
    pixel_size_m: float = L8_RES

    def __post_init__(self):
        if self.gsd_m <= 0 or self.pixel_size_m <= 0:
            raise ValueError(f"{self.band}: GSD and pixel size must be positive")

    @property
    def sigma(self) -> float:
        """Gaussian sigma in input pixels, taking the GSD as the PSF FWHM."""
        return self.gsd_m / (self.pixel_size_m * FWHM_TO_SIGMA)


PROBAV_MODELS = {
    "BLUE": SensorBandModel("BLUE", 96.9),
    "RED": SensorBandModel("RED", 96.9),
    "NIR": SensorBandModel("NIR", 96.9),
    "SWIR": SensorBandModel("SWIR", 184.7),
}

# Landsat-8 source band(s) for each Proba-V band.
BAND_SOURCES = {"BLUE": ("B1", "B2"), "RED": ("B4",), "NIR": ("B5",), "SWIR": ("B6",)}


def blend_blue(b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """SRF-overlap weighting of Landsat-8 B1/B2 into the Proba-V BLUE band."""
    b1 = np.asarray(b1, dtype=np.float32)
    b2 = np.asarray(b2, dtype=np.float32)
    if b1.shape != b2.shape:
        raise ValueError(f"shape mismatch: B1 {b1.shape} vs B2 {b2.shape}")
    return np.float32(0.25) * b1 + np.float32(0.75) * b2


def select_bands(l8_bands: Mapping[str, np.ndarray], valid: Optional[np.ndarray] = None) -> MultispectralImage:
    for target, sources in BAND_SOURCES.items():
        for src in sources:
            if src not in l8_bands:
                raise KeyError(f"missing Landsat-8 band {src} (source of {target})")
    stack = np.stack(
        [
            blend_blue(l8_bands["B1"], l8_bands["B2"]),
            np.asarray(l8_bands["B4"], dtype=np.float32),
            np.asarray(l8_bands["B5"], dtype=np.float32),
            np.asarray(l8_bands["B6"], dtype=np.float32),
        ]
    )
    return MultispectralImage(data=stack, resolution_m=L8_RES, domain=Domain.L8_30M, valid=valid)


# --- PSF ---------------------------------------------------------------------


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    padded = np.pad(a, pad, mode="symmetric")
    n = a.shape[axis]
    out = np.zeros_like(a)
    for k, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(k, k + n), axis=axis)
    return out


def psf_filter(band: np.ndarray, model: SensorBandModel) -> np.ndarray:
    """Convolve with the normalised 2-D Gaussian PSF (symmetric borders)."""
    kernel = gaussian_kernel1d(model.sigma)
    out = np.asarray(band, dtype=np.float64)
    out = _correlate_axis(out, kernel, axis=-2)
    out = _correlate_axis(out, kernel, axis=-1)
    return out.astype(np.float32)


def subsample3(band: np.ndarray) -> np.ndarray:
    band = np.asarray(band)
    if band.shape[-2] < 3 or band.shape[-1] < 3:
        raise ValueError(f"subsample3 needs at least 3x3 input, got {band.shape}")
    return band[..., ::3, ::3]


# --- Lanczos -----------------------------------------------------------------


def lanczos_kernel(x, a: int = LANCZOS_ORDER) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    i = np.mod(i, period)
    return np.where(i >= n, period - 1 - i, i)


def resampled_size(n_in: int, in_res: float, out_res: float) -> int:
    return int(round(n_in * in_res / out_res))


def lanczos_weights(n_in: int, n_out: int, factor: float, a: int = LANCZOS_ORDER) -> sparse.csr_matrix:
    """``(n_out, n_in)`` resampling matrix; rows sum to one.

    ``factor`` is the number of input pixels per output pixel.  When
    downsampling the kernel is stretched by ``factor`` so it acts as the
    anti-aliasing low-pass.
    """
    scale = max(factor, 1.0)
    support = a * scale
    rows, cols, vals = [], [], []
    for j in range(n_out):
        center = (j + 0.5) * factor - 0.5
        lo = int(math.floor(center - support)) + 1
        hi = int(math.ceil(center + support))
        taps = np.arange(lo, hi)
        w = lanczos_kernel((taps - center) / scale, a)
        w /= w.sum()
        idx = _reflect_index(taps, n_in)
        rows.append(np.full(len(taps), j))
        cols.append(idx)
        vals.append(w)
    m = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_out, n_in)
    )
    return m.tocsr()  # duplicate (reflected) indices are summed here


def lanczos_resample(band: np.ndarray, out_res_m: float = PV_RES, in_res_m: float = SUBSAMPLED_RES) -> np.ndarray:
    band = np.asarray(band, dtype=np.float64)
    h, w = band.shape[-2:]
    oh, ow = resampled_size(h, in_res_m, out_res_m), resampled_size(w, in_res_m, out_res_m)
    if oh < 1 or ow < 1:
        raise ValueError(f"output dimension < 1 for input {h}x{w}")
    factor = out_res_m / in_res_m
    wy = lanczos_weights(h, oh, factor)
    wx = lanczos_weights(w, ow, factor)
    flat = band.reshape(-1, h, w)
    out = np.stack([(wy @ (wx @ plane.T).T) for plane in flat])
    return out.reshape(*band.shape[:-2], oh, ow).astype(np.float32)


def _support_chain(mask: np.ndarray, model: SensorBandModel) -> np.ndarray:
    """Propagate a boolean mask through the chain with absolute kernel weights."""
    m = mask.astype(np.float64)
    kernel = gaussian_kernel1d(model.sigma)
    m = _correlate_axis(_correlate_axis(m, kernel, -2), kernel, -1)
    m = subsample3(m)
    h, w = m.shape
    oh, ow = resampled_size(h, SUBSAMPLED_RES, PV_RES), resampled_size(w, SUBSAMPLED_RES, PV_RES)
    factor = PV_RES / SUBSAMPLED_RES
    wy = abs(lanczos_weights(h, oh, factor))
    wx = abs(lanczos_weights(w, ow, factor))
    return (wy @ (wx @ m.T).T) > 0


def upscale_band(band: np.ndarray, model: SensorBandModel) -> np.ndarray:
    return lanczos_resample(subsample3(psf_filter(band, model)))


def upscale_l8(
    l8_bands: Mapping[str, np.ndarray],
    models: Mapping[str, SensorBandModel] = PROBAV_MODELS,
    valid: Optional[np.ndarray] = None,
) -> MultispectralImage:
    """Full upscaling transform from Landsat-8 bands to the 333 m domain."""
    selected = select_bands(l8_bands, valid=valid)
    bands = [upscale_band(selected.data[i], models[name]) for i, name in enumerate(BANDS)]
    h = min(b.shape[0] for b in bands)
    w = min(b.shape[1] for b in bands)
    stack = np.stack([b[:h, :w] for b in bands])
    out_valid = None
    if valid is not None and not np.all(valid):
        invalid = np.zeros((h, w), dtype=bool)
        for name in BANDS:
            invalid |= _support_chain(~np.asarray(valid, dtype=bool), models[name])[:h, :w]
        stack[:, invalid] = 0.0
        out_valid = ~invalid
    return MultispectralImage(data=stack, resolution_m=PV_RES, domain=Domain.LU_333M, valid=out_valid)


def upscale_labels(
    mask: CloudMask,
    models: Mapping[str, SensorBandModel] = PROBAV_MODELS,
    image_shape: Optional[tuple[int, int]] = None,
) -> CloudMask:
    """Run the cloud fraction through the BLUE chain and threshold at 0.5."""
    if image_shape is not None and tuple(image_shape) != mask.shape:
        raise RasterError(f"labels: shape {mask.shape} does not match image {tuple(image_shape)}")
    model = models["BLUE"]
    invalid = mask.labels == MASK_NODATA
    cloud = (mask.labels == 1).astype(np.float32)
    frac = upscale_band(cloud, model)
    out = (frac >= 0.5).astype(np.uint8)
    if invalid.any():
        out[_support_chain(invalid, model)] = MASK_NODATA
    return CloudMask(labels=out, resolution_m=PV_RES)
