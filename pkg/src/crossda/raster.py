"""Raster data model, GeoTIFF I/O and patch extraction.

Images are held as a float32 ``(4, H, W)`` stack in the fixed band order
BLUE, RED, NIR, SWIR.  Invalid pixels live in a separate boolean mask so band
arrays never contain NaN.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import rasterio
from affine import Affine
from rasterio.errors import NotGeoreferencedWarning

logger = logging.getLogger(__name__)

BANDS = ("BLUE", "RED", "NIR", "SWIR")
NODATA = 65535.0
MASK_NODATA = 255


class RasterError(ValueError):
    """Raised for malformed rasters or files; the message names the field."""


class Domain(str, Enum):
    L8_30M = "L8_30M"
    LU_333M = "LU_333M"
    PV_333M = "PV_333M"
    PV_ADAPTED_333M = "PV_ADAPTED_333M"

    @property
    def resolution_m(self) -> float:
        return 30.0 if self is Domain.L8_30M else 333.0


def _check_domain(domain: Domain, resolution_m: float) -> None:
    if abs(domain.resolution_m - resolution_m) > 1.0:
        raise RasterError(
            f"domain_tag: {domain.value} expects {domain.resolution_m:g} m, got {resolution_m:g} m"
        )


@dataclass
class MultispectralImage:
    """4-band TOA reflectance raster with resolution metadata."""

    data: np.ndarray
    resolution_m: float
    domain: Domain
    valid: Optional[np.ndarray] = None
    transform: Optional[Affine] = None
    crs: Optional[str] = None
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.domain = Domain(self.domain)
        if self.data.ndim != 3 or self.data.shape[0] != len(BANDS):
            raise RasterError(f"bands: expected shape (4, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise RasterError("bands: non-finite values; use the validity mask instead")
        if self.valid is None:
            self.valid = np.ones(self.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.shape:
                raise RasterError(f"valid: shape {self.valid.shape} != image shape {self.shape}")
        _check_domain(self.domain, self.resolution_m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def band(self, name: str) -> np.ndarray:
        return self.data[BANDS.index(name)]

    def replace(self, data: np.ndarray, domain: Domain | None = None, valid=None) -> "MultispectralImage":
        """Copy of this image with new band data (and optionally domain/validity)."""
        return MultispectralImage(
            data=data,
            resolution_m=self.resolution_m,
            domain=domain or self.domain,
            valid=self.valid.copy() if valid is None else valid,
            transform=self.transform,
            crs=self.crs,
            name=self.name,
        )


@dataclass
class CloudMask:
    """Per-pixel labels: 0 clear, 1 cloudy, 255 invalid."""

    labels: np.ndarray
    resolution_m: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise RasterError(f"labels: expected 2-D array, got shape {self.labels.shape}")
        bad = ~np.isin(self.labels, (0, 1, MASK_NODATA))
        if bad.any():
            raise RasterError(f"labels: unexpected codes {np.unique(self.labels[bad])[:5].tolist()}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def valid(self) -> np.ndarray:
        return self.labels != MASK_NODATA


@dataclass
class QualityMask:
    """Per-band radiometric quality flags, ``True`` meaning bad quality."""

    flags: np.ndarray

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.flags.ndim != 3 or self.flags.shape[0] != len(BANDS):
            raise RasterError(f"flags: expected shape (4, H, W), got {self.flags.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.flags.shape[1], self.flags.shape[2]

    def any_bad(self) -> np.ndarray:
        return self.flags.any(axis=0)


@dataclass
class PatchSet:
    """Fixed-size square patches with provenance ``(source_id, row, col)``.

    ``labels`` and ``valid`` are optional per-pixel arrays aligned with
    ``patches``; they are carried along when patches come from labelled scenes.
    """

    patches: np.ndarray
    provenance: list[tuple[str, int, int]]
    patch_size: int
    labels: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None
    quality: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.patches)

    def subset(self, index) -> "PatchSet":
        index = np.asarray(index)
        pick = lambda a: None if a is None else a[index]
        return PatchSet(
            patches=self.patches[index],
            provenance=[self.provenance[i] for i in index.tolist()],
            patch_size=self.patch_size,
            labels=pick(self.labels),
            valid=pick(self.valid),
            quality=pick(self.quality),
        )

    @classmethod
    def concat(cls, sets: Iterable["PatchSet"]) -> "PatchSet":
        sets = list(sets)
        if not sets:
            raise ValueError("cannot concatenate an empty list of patch sets")
        sizes = {s.patch_size for s in sets}
        if len(sizes) != 1:
            raise ValueError(f"mixed patch sizes {sorted(sizes)}")

        def cat(attr):
            parts = [getattr(s, attr) for s in sets]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts)

        return cls(
            patches=np.concatenate([s.patches for s in sets]),
            provenance=[p for s in sets for p in s.provenance],
            patch_size=sizes.pop(),
            labels=cat("labels"),
            valid=cat("valid"),
            quality=cat("quality"),
        )


# --- I/O -------------------------------------------------------------------


def _default_transform(resolution_m: float) -> Affine:
    return Affine(resolution_m, 0.0, 0.0, 0.0, -resolution_m, 0.0)


def load_image(
    path,
    band_order: Sequence[str] = BANDS,
    domain: Domain | str | None = None,
) -> MultispectralImage:
    """Read a GeoTIFF into a :class:`MultispectralImage`.

    ``band_order`` names the file's bands in file order; entries other than
    the four canonical names are ignored.  The file must have exactly
    ``len(band_order)`` bands.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"path: no such file {path}")
    missing = [b for b in BANDS if b not in band_order]
    if missing:
        raise RasterError(f"band_order: missing {missing}")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotGeoreferencedWarning)
        with rasterio.open(path) as src:
            if src.count < len(BANDS) or src.count != len(band_order):
                raise RasterError(
                    f"band count mismatch: file has {src.count} bands, band_order lists {len(band_order)}"
                )
            raw = src.read().astype(np.float64)
            nodata = src.nodata
            transform = src.transform
            crs = src.crs.to_string() if src.crs else None
            tags = src.tags()

    if transform.is_identity or transform.a == 0 or transform.e == 0:
        raise RasterError("geotransform: file carries no usable georeferencing")
    if abs(abs(transform.a) - abs(transform.e)) > 1e-6 * abs(transform.a):
        raise RasterError(f"geotransform: non-square pixels {transform.a} x {transform.e}")
    resolution = float(abs(transform.a))

    idx = [band_order.index(b) for b in BANDS]
    stack = raw[idx]
    if nodata is not None:
        invalid = np.any(stack == nodata, axis=0)
    else:
        invalid = np.zeros(stack.shape[1:], dtype=bool)
    invalid |= ~np.all(np.isfinite(stack), axis=0)
    stack[:, invalid] = 0.0

    if domain is None:
        domain = tags.get("DOMAIN") or (Domain.L8_30M if abs(resolution - 30) <= 1 else Domain.PV_333M)
    return MultispectralImage(
        data=stack.astype(np.float32),
        resolution_m=resolution,
        domain=Domain(domain),
        valid=~invalid,
        transform=transform,
        crs=crs,
        name=path.stem,
    )


def save_image(image: MultispectralImage, path) -> None:
    """Write ``image`` as a float32 GeoTIFF in BLUE, RED, NIR, SWIR order."""
    data = image.data.copy()
    data[:, ~image.valid] = NODATA
    profile = dict(
        driver="GTiff",
        height=image.shape[0],
        width=image.shape[1],
        count=len(BANDS),
        dtype="float32",
        nodata=NODATA,
        transform=image.transform or _default_transform(image.resolution_m),
        crs=image.crs,
        compress="deflate",
    )
    with rasterio.open(path, "w", **profile) as dst:
        dst.write(data)
        dst.update_tags(DOMAIN=image.domain.value)
        for i, name in enumerate(BANDS, start=1):
            dst.set_band_description(i, name)


def save_mask(mask: CloudMask, path, transform: Affine | None = None, crs=None) -> None:
    profile = dict(
        driver="GTiff", height=mask.shape[0], width=mask.shape[1], count=1, dtype="uint8",
        nodata=MASK_NODATA, transform=transform or _default_transform(mask.resolution_m), crs=crs,
        compress="deflate",
    )
    with rasterio.open(path, "w", **profile) as dst:
        dst.write(mask.labels[None])


def load_mask(path) -> CloudMask:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotGeoreferencedWarning)
        with rasterio.open(path) as src:
            labels = src.read(1)
            resolution = float(abs(src.transform.a))
    return CloudMask(labels=labels, resolution_m=resolution)


def save_quality(quality: QualityMask, path, resolution_m: float = 333.0, transform=None, crs=None) -> None:
    h, w = quality.shape
    profile = dict(
        driver="GTiff", height=h, width=w, count=len(BANDS), dtype="uint8",
        transform=transform or _default_transform(resolution_m), crs=crs, compress="deflate",
    )
    with rasterio.open(path, "w", **profile) as dst:
        dst.write(quality.flags.astype(np.uint8))


def load_quality(path) -> QualityMask:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotGeoreferencedWarning)
        with rasterio.open(path) as src:
            return QualityMask(flags=src.read() > 0)


def save_float(array: np.ndarray, path, resolution_m: float = 333.0, transform=None, crs=None) -> None:
    """Write a single-band float32 raster (e.g. a probability map)."""
    profile = dict(
        driver="GTiff", height=array.shape[0], width=array.shape[1], count=1, dtype="float32",
        transform=transform or _default_transform(resolution_m), crs=crs, compress="deflate",
    )
    with rasterio.open(path, "w", **profile) as dst:
        dst.write(np.asarray(array, dtype=np.float32)[None])


# --- patches ---------------------------------------------------------------


def tile_offsets(dim: int, size: int, stride: int) -> list[int]:
    """Offsets ``0, stride, ...`` plus a final offset flush with the edge."""
    if size > dim:
        raise ValueError(f"patch size {size} larger than image dimension {dim}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    offsets = list(range(0, dim - size + 1, stride))
    if offsets[-1] != dim - size:
        offsets.append(dim - size)
    return offsets


def extract_patches(
    image: MultispectralImage,
    size: int,
    stride: int,
    labels: CloudMask | None = None,
    quality: QualityMask | None = None,
    source_id: str | None = None,
) -> PatchSet:
    h, w = image.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} larger than image {h}x{w}")
    rows = tile_offsets(h, size, stride)
    cols = tile_offsets(w, size, stride)
    sid = source_id if source_id is not None else image.name
    prov = [(sid, r, c) for r in rows for c in cols]
    window = lambda a: np.stack([a[..., r : r + size, c : c + size] for _, r, c in prov])
    return PatchSet(
        patches=window(image.data),
        provenance=prov,
        patch_size=size,
        labels=None if labels is None else window(labels.labels),
        valid=window(image.valid),
        quality=None if quality is None else window(quality.flags),
    )


def paste_patches(patch_set: PatchSet, shape: tuple[int, int], source_id: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Write patches back at their offsets; returns ``(canvas, covered)``."""
    canvas = np.zeros((patch_set.patches.shape[1], *shape), dtype=patch_set.patches.dtype)
    covered = np.zeros(shape, dtype=bool)
    s = patch_set.patch_size
    for patch, (sid, r, c) in zip(patch_set.patches, patch_set.provenance):
        if source_id is not None and sid != source_id:
            continue
        canvas[:, r : r + s, c : c + s] = patch
        covered[r : r + s, c : c + s] = True
    return canvas, covered
