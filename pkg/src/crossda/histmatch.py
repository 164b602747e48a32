"""Per-band histogram matching baseline (quantile mapping)."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import BANDS, Domain, MultispectralImage, PatchSet

logger = logging.getLogger(__name__)


@dataclass
class HistogramMatchModel:
    """Monotone piecewise-linear map per band, knots ``source_q -> target_q``."""

    source_q: list[np.ndarray]
    target_q: list[np.ndarray]

    def __post_init__(self):
        for s, t in zip(self.source_q, self.target_q):
            if len(s) != len(t) or np.any(np.diff(s) <= 0) or np.any(np.diff(t) < 0):
                raise ValueError("histogram map knots must be increasing and nondecreasing")

    @classmethod
    def identity(cls, lo: float = 0.0, hi: float = 1.0) -> "HistogramMatchModel":
        k = np.array([lo, hi])
        return cls([k.copy() for _ in BANDS], [k.copy() for _ in BANDS])

    def map_band(self, i: int, values: np.ndarray) -> np.ndarray:
        # np.interp clamps to the end knots outside the fitted range
        return np.interp(values, self.source_q[i], self.target_q[i]).astype(np.float32)

    def to_dict(self) -> dict:
        return {
            "bands": list(BANDS),
            "source_q": [s.tolist() for s in self.source_q],
            "target_q": [t.tolist() for t in self.target_q],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HistogramMatchModel":
        return cls([np.asarray(s) for s in d["source_q"]], [np.asarray(t) for t in d["target_q"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "HistogramMatchModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _pool_values(pool, band: int) -> np.ndarray:
    if isinstance(pool, PatchSet):
        vals = pool.patches[:, band]
        if pool.valid is not None:
            return vals[pool.valid]
        return vals.ravel()
    if isinstance(pool, MultispectralImage):
        return pool.data[band][pool.valid]
    if isinstance(pool, (list, tuple)):
        return np.concatenate([_pool_values(p, band) for p in pool])
    arr = np.asarray(pool)
    return arr[:, band].ravel() if arr.ndim == 4 else arr[band].ravel()


def _collapse_ties(src: np.ndarray, tgt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge repeated source knots, averaging their target values."""
    uniq, inverse = np.unique(src, return_inverse=True)
    if len(uniq) == len(src):
        return src, tgt
    sums = np.bincount(inverse, weights=tgt)
    counts = np.bincount(inverse)
    return uniq, sums / counts


def _quantiles(values: np.ndarray, n: int) -> np.ndarray:
    """Linear-interpolation quantiles at levels ``i / (n - 1)``.

    Positions are formed as ``i * (m - 1) / (n - 1)`` so that they are exact
    integers whenever the sample size allows it; the knots then coincide
    with order statistics without rounding noise.
    """
    s = np.sort(values)
    pos = np.arange(n, dtype=np.float64) * (len(s) - 1) / max(n - 1, 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, len(s) - 1)
    frac = pos - lo
    return np.where(frac == 0, s[lo], s[lo] + frac * (s[hi] - s[lo]))


def histogram_match_fit(pv_pool, lu_pool, n_quantiles: int = 1024) -> HistogramMatchModel:
    """Fit a quantile map from the PV distribution onto the LU distribution."""
    src_knots, tgt_knots = [], []
    for b, name in enumerate(BANDS):
        src = _pool_values(pv_pool, b).astype(np.float64)
        tgt = _pool_values(lu_pool, b).astype(np.float64)
        if src.size == 0 or tgt.size == 0:
            raise ValueError("histogram matching needs nonempty pools")
        sq = _quantiles(src, n_quantiles)
        tq = _quantiles(tgt, n_quantiles)
        if sq[-1] - sq[0] <= 0:
            warnings.warn(f"{name}: constant source band; using identity map", RuntimeWarning, stacklevel=2)
            v = sq[0]
            src_knots.append(np.array([v - 10.0, v + 10.0]))
            tgt_knots.append(np.array([v - 10.0, v + 10.0]))
            continue
        sq, tq = _collapse_ties(sq, np.maximum.accumulate(tq))
        src_knots.append(sq)
        tgt_knots.append(tq)
    return HistogramMatchModel(src_knots, tgt_knots)


def histogram_match_apply(image, model: HistogramMatchModel):
    """Apply the band maps to an image, a ``(4, H, W)`` array or an ``(N, 4, H, W)`` batch."""
    if isinstance(image, MultispectralImage):
        out = np.stack([model.map_band(i, image.data[i]) for i in range(len(BANDS))])
        out[:, ~image.valid] = 0.0
        domain = Domain.PV_ADAPTED_333M if image.domain is Domain.PV_333M else image.domain
        return image.replace(out, domain=domain)
    arr = np.asarray(image)
    if arr.ndim == 4:
        return np.stack([model.map_band(i, arr[:, i]) for i in range(len(BANDS))], axis=1)
    return np.stack([model.map_band(i, arr[i]) for i in range(len(BANDS))])
