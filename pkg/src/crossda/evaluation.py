"""Radiometric and accuracy analyses: histograms, spectra, stratified stats."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .raster import BANDS, MultispectralImage, PatchSet, QualityMask

HIST_BINS = 256
HIST_RANGE = (0.0, 1.2)
DB_FLOOR = 1e-12
QUANTILES = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)


def _band_values(images, band: int) -> np.ndarray:
    parts = []
    for im in images:
        if isinstance(im, MultispectralImage):
            parts.append(im.data[band][im.valid])
        elif isinstance(im, PatchSet):
            vals = im.patches[:, band]
            parts.append(vals[im.valid] if im.valid is not None else vals.ravel())
        else:
            arr = np.asarray(im)
            parts.append(arr[:, band].ravel() if arr.ndim == 4 else arr[band].ravel())
    return np.concatenate(parts)


@dataclass
class BandHistograms:
    edges: np.ndarray
    hists: np.ndarray  # (4, bins), each row sums to 1

    def to_dict(self) -> dict:
        return {"bands": list(BANDS), "edges": self.edges.tolist(), "hists": self.hists.tolist()}


def band_histograms(images: Sequence, bins: int = HIST_BINS, range: tuple[float, float] = HIST_RANGE) -> BandHistograms:
    """Pooled, normalised per-band histograms over a fixed range.

    Values outside ``range`` are clipped into the end bins so the mass of
    every histogram is one.
    """
    images = list(images)
    if not images:
        raise ValueError("band_histograms needs at least one image")
    edges = np.linspace(range[0], range[1], bins + 1)
    hists = []
    for b in np.arange(len(BANDS)):
        v = np.clip(_band_values(images, b), range[0], range[1])
        counts, _ = np.histogram(v, bins=edges)
        if counts.sum() == 0:
            raise ValueError(f"{BANDS[b]}: no valid pixels")
        hists.append(counts / counts.sum())
    return BandHistograms(edges=edges, hists=np.array(hists))


def histogram_distance(h1: BandHistograms, h2: BandHistograms) -> np.ndarray:
    """Per-band L1 distance, in ``[0, 2]``."""
    if not np.array_equal(h1.edges, h2.edges):
        raise ValueError("histograms use different binning")
    return np.abs(h1.hists - h2.hists).sum(axis=1)


def _square_patches(patches) -> np.ndarray:
    arr = patches.patches if isinstance(patches, PatchSet) else patches
    if isinstance(arr, (list, tuple)):
        sizes = {tuple(np.shape(p)[-2:]) for p in arr}
        if len(sizes) != 1:
            raise ValueError(f"mixed patch sizes {sorted(sizes)}")
        arr = np.stack(arr)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != arr.shape[-2]:
        raise ValueError(f"expected (N, C, S, S) square patches, got {arr.shape}")
    return arr


def fft_amplitude(patches) -> np.ndarray:
    """``|DFT|`` per patch and band, DC at index (0, 0); shape ``(N, C, S, S)``."""
    return np.abs(np.fft.fft2(_square_patches(patches), axes=(-2, -1)))


def fft_amplitude_db(patches) -> np.ndarray:
    """Mean dB amplitude spectrum per band, DC centred; shape ``(C, S, S)``."""
    db = 20.0 * np.log10(fft_amplitude(patches) + DB_FLOOR)
    return np.fft.fftshift(db.mean(axis=0), axes=(-2, -1))


def _distribution(d: np.ndarray, edges: np.ndarray) -> dict:
    if d.size == 0:
        return {"n": 0, "mean": float("nan"), "std": float("nan"),
                "quantiles": {str(q): float("nan") for q in QUANTILES},
                "median_abs": float("nan"), "hist": [0] * (len(edges) - 1)}
    counts, _ = np.histogram(np.clip(d, edges[0], edges[-1]), bins=edges)
    return {
        "n": int(d.size),
        "mean": float(d.mean()),
        "std": float(d.std()),
        "quantiles": {str(q): float(v) for q, v in zip(QUANTILES, np.quantile(d, QUANTILES))},
        "median_abs": float(np.median(np.abs(d))),
        "hist": counts.tolist(),
    }


def toa_difference_stats(
    pv: MultispectralImage | Sequence,
    adapted: MultispectralImage | Sequence,
    quality: QualityMask | Sequence,
    bins: int = 200,
    limit: float = 0.5,
) -> dict:
    """Distribution of ``pv - adapted`` per band, split by that band's quality flag."""
    pv_l = pv if isinstance(pv, (list, tuple)) else [pv]
    ad_l = adapted if isinstance(adapted, (list, tuple)) else [adapted]
    q_l = quality if isinstance(quality, (list, tuple)) else [quality]
    if not (len(pv_l) == len(ad_l) == len(q_l)):
        raise ValueError("pv, adapted and quality lists differ in length")
    edges = np.linspace(-limit, limit, bins + 1)
    out = {"edges": edges.tolist(), "bands": {}}
    for b, name in enumerate(BANDS):
        good, bad = [], []
        for p, a, q in zip(pv_l, ad_l, q_l):
            if p.shape != a.shape or p.shape != q.shape:
                raise ValueError(f"shape mismatch: {p.shape}, {a.shape}, {q.shape}")
            valid = p.valid & a.valid
            d = p.data[b].astype(np.float64) - a.data[b]
            flag = q.flags[b]
            good.append(d[valid & ~flag])
            bad.append(d[valid & flag])
        good, bad = np.concatenate(good), np.concatenate(bad)
        out["bands"][name] = {
            "good": _distribution(good, edges),
            "bad": _distribution(bad, edges),
            "all": _distribution(np.concatenate([good, bad]), edges),
        }
    return out


def summary_stats(values: Iterable[float]) -> dict:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one value")
    return {"min": float(v.min()), "max": float(v.max()), "mean": float(v.mean()), "std": float(v.std())}


def ablation_report(runs: Sequence[tuple[str, Sequence[float]]], out_dir=None) -> list[dict]:
    """Min/max/mean/population-std accuracy per configuration, in input order."""
    if not runs:
        raise ValueError("ablation_report needs at least one run")
    rows = []
    for name, accs in runs:
        if len(accs) == 0:
            raise ValueError(f"{name}: no seeds")
        rows.append({"config": name, "n_seeds": len(accs), **summary_stats(accs)})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2))
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        (out_dir / "ablation.md").write_text(render_table(rows))
    return rows


def render_table(rows: Sequence[dict]) -> str:
    lines = ["| config | min | max | mean | std |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['config']} | {r['min']:.2f} | {r['max']:.2f} | {r['mean']:.2f} | {r['std']:.2f} |")
    return "\n".join(lines) + "\n"


# --- figures -------------------------------------------------------------------


def plot_histograms(named: dict[str, BandHistograms], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(BANDS), 1, figsize=(6, 8), sharex=True)
    for b, ax in enumerate(axes):
        for label, h in named.items():
            centers = 0.5 * (h.edges[1:] + h.edges[:-1])
            ax.plot(centers, h.hists[b], label=label, lw=1)
        ax.set_ylabel(BANDS[b])
    axes[0].legend(fontsize=7)
    axes[-1].set_xlabel("TOA reflectance")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_spectra(named: dict[str, np.ndarray], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(BANDS), len(named), figsize=(3 * len(named), 10), squeeze=False)
    for j, (label, spec) in enumerate(named.items()):
        for b in range(len(BANDS)):
            axes[b, j].imshow(spec[b], cmap="viridis")
            axes[b, j].set_xticks([])
            axes[b, j].set_yticks([])
        axes[0, j].set_title(label, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_differences(stats: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    edges = np.asarray(stats["edges"])
    centers = 0.5 * (edges[1:] + edges[:-1])
    fig, axes = plt.subplots(len(BANDS), 1, figsize=(6, 8), sharex=True)
    for ax, name in zip(axes, BANDS):
        for stratum in ("good", "bad"):
            h = np.asarray(stats["bands"][name][stratum]["hist"], dtype=float)
            if h.sum():
                ax.plot(centers, h / h.sum(), label=stratum, lw=1)
        ax.set_ylabel(name)
    axes[0].legend(fontsize=7)
    axes[-1].set_xlabel("PV - adapted")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
