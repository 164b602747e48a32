"""Deterministic two-domain synthetic benchmark.

Source scenes stand in for the LU domain: smooth, band-correlated terrain
built from a few land-cover spectra, plus opaque elliptical clouds with an
exact mask.  :func:`degrade` produces the PV-like target domain (BLUE
gain/offset, PSF blur, sensor noise and BLUE saturation) together with a
quality mask that flags the saturated pixels.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .raster import BANDS, CloudMask, Domain, MultispectralImage, QualityMask

# Land-cover reflectance spectra (BLUE, RED, NIR, SWIR).
COVER_SPECTRA = np.array(
    [
        [0.035, 0.045, 0.34, 0.16],  # vegetation
        [0.09, 0.16, 0.25, 0.33],  # bare soil
        [0.06, 0.04, 0.025, 0.015],  # water
        [0.40, 0.45, 0.49, 0.53],  # bright sand, saturates BLUE in the target
    ]
)
# Cloud spectrum relative to a per-pixel cloud brightness t.
CLOUD_OFFSETS = np.array([0.0, -0.02, -0.03, -0.06])
CLOUD_BRIGHTNESS = (0.68, 0.95)
TERRAIN_MAX = 0.55
RESOLUTION = 333.0


@dataclass(frozen=True)
class DegradationSpec:
    blue_clip: float = 0.35
    noise_sigma: float = 0.02
    blur_sigma: float = 0.7
    gain: tuple[float, float, float, float] = (1.03, 1.0, 1.0, 1.0)
    offset: tuple[float, float, float, float] = (0.02, 0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur sigma must be >= 0")
        if not 0.0 < self.blue_clip <= 2.0:
            raise ValueError(f"blue_clip {self.blue_clip} outside the reflectance range")
        if len(self.gain) != len(BANDS) or len(self.offset) != len(BANDS):
            raise ValueError("gain and offset need one entry per band")

    def replace(self, **changes) -> "DegradationSpec":
        return dataclasses.replace(self, **changes)


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _ellipse(size: int, cy: float, cx: float, ay: float, ax: float, angle: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    y -= cy
    x -= cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * x + s * y) / ax
    v = (-s * x + c * y) / ay
    return u * u + v * v <= 1.0


def _cloud_mask(rng: np.random.Generator, size: int, fraction: tuple[float, float]) -> np.ndarray:
    lo, hi = fraction
    for _ in range(100):
        target = rng.uniform(lo + 0.05, hi - 0.05)
        mask = np.zeros((size, size), dtype=bool)
        while mask.mean() < target:
            cy, cx = rng.uniform(0, size, size=2)
            ay, ax = size * rng.uniform(0.08, 0.25, size=2)
            mask |= _ellipse(size, cy, cx, ay, ax, rng.uniform(0, np.pi))
        if lo <= mask.mean() <= hi:
            return mask
    raise RuntimeError("could not place clouds within the requested fraction")


def make_source_scene(
    seed: int, size: int = 128, cloud_fraction: tuple[float, float] = (0.2, 0.6)
) -> tuple[MultispectralImage, CloudMask]:
    """Procedural LU-like scene and its exact cloud mask."""
    if size < 64:
        raise ValueError(f"scene size must be >= 64, got {size}")
    rng = np.random.default_rng(seed)
    logits = np.stack([_smooth_field(rng, size, size / 10) for _ in COVER_SPECTRA])
    abund = np.exp(2.5 * logits)
    abund /= abund.sum(axis=0, keepdims=True)
    terrain = np.einsum("khw,kb->bhw", abund, COVER_SPECTRA)
    texture = 1.0 + 0.08 * _smooth_field(rng, size, 1.2)
    terrain = np.clip(terrain * texture, 0.005, TERRAIN_MAX)

    clouds = _cloud_mask(rng, size, cloud_fraction)
    lo, hi = CLOUD_BRIGHTNESS
    t = lo + (hi - lo) / (1.0 + np.exp(-1.5 * _smooth_field(rng, size, 3.0)))
    cloud_refl = t[None] + CLOUD_OFFSETS[:, None, None]
    data = np.where(clouds[None], cloud_refl, terrain).astype(np.float32)
    image = MultispectralImage(data=data, resolution_m=RESOLUTION, domain=Domain.LU_333M, name=f"scene_{seed}")
    return image, CloudMask(labels=clouds.astype(np.uint8), resolution_m=RESOLUTION)


def degrade(image: MultispectralImage, spec: DegradationSpec = DegradationSpec()) -> tuple[MultispectralImage, QualityMask]:
    """Map a source scene into the target domain and flag saturated pixels."""
    rng = np.random.default_rng(spec.seed)
    x = image.data.astype(np.float64)
    x = x * np.asarray(spec.gain)[:, None, None] + np.asarray(spec.offset)[:, None, None]
    if spec.blur_sigma > 0:
        x = np.stack([gaussian_filter(b, spec.blur_sigma, mode="reflect") for b in x])
    if spec.noise_sigma > 0:
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    flags = np.zeros(x.shape, dtype=bool)
    blue = BANDS.index("BLUE")
    flags[blue] = x[blue] >= spec.blue_clip
    x[blue] = np.minimum(x[blue], spec.blue_clip)
    out = image.replace(x.astype(np.float32), domain=Domain.PV_333M)
    return out, QualityMask(flags=flags)


@dataclass
class ScenePair:
    index: int
    source: MultispectralImage
    target: MultispectralImage
    labels: CloudMask
    quality: QualityMask


def make_pair(index: int, size: int = 128, seed: int = 0, spec: DegradationSpec = DegradationSpec()) -> ScenePair:
    scene_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    source, labels = make_source_scene(scene_seed, size)
    target, quality = degrade(source, spec.replace(seed=scene_seed ^ 0x5EED))
    source.name = target.name = f"scene_{index:04d}"
    return ScenePair(index, source, target, labels, quality)


def make_benchmark(n: int, size: int = 128, seed: int = 0, spec: DegradationSpec = DegradationSpec()) -> list[ScenePair]:
    return [make_pair(i, size, seed, spec) for i in range(n)]


def write_benchmark(pairs: list[ScenePair], out_dir) -> None:
    from .raster import save_image, save_mask, save_quality

    out_dir = Path(out_dir)
    for sub in ("source", "target"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for p in pairs:
        stem = p.source.name
        save_image(p.source, out_dir / "source" / f"{stem}.tif")
        save_mask(p.labels, out_dir / "source" / f"{stem}_mask.tif")
        save_image(p.target, out_dir / "target" / f"{stem}.tif")
        save_mask(p.labels, out_dir / "target" / f"{stem}_mask.tif")
        save_quality(p.quality, out_dir / "target" / f"{stem}_quality.tif")
