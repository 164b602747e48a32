"""Benchmark plumbing shared by the CLI and the acceptance runs.

A benchmark directory (as written by ``crossda synth``) holds paired
``source/`` and ``target/`` scenes plus ``index.json`` with the train/test
split.  Training only ever sees the two domains as independent patch pools;
the pairing is used for scoring.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .cloud import accuracy, predict_proba
from .evaluation import band_histograms, histogram_distance, toa_difference_stats
from .raster import BANDS, PatchSet, extract_patches, load_image, load_mask, load_quality
from .synth import ScenePair, write_benchmark

TRAIN_FRACTION = 0.75


def split_indices(n: int, train_fraction: float = TRAIN_FRACTION) -> dict[str, list[int]]:
    k = int(round(n * train_fraction))
    return {"train": list(range(k)), "test": list(range(k, n))}


def save_bench(pairs: Sequence[ScenePair], out_dir, meta: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    write_benchmark(list(pairs), out_dir)
    index = {
        "scenes": [p.source.name for p in pairs],
        "split": split_indices(len(pairs)),
        **(meta or {}),
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=2))
    return out_dir


def load_bench(bench_dir, split: str | None = None) -> list[ScenePair]:
    bench_dir = Path(bench_dir)
    index_path = bench_dir / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"bench: no index.json in {bench_dir}")
    index = json.loads(index_path.read_text())
    ids = range(len(index["scenes"])) if split is None else index["split"][split]
    pairs = []
    for i in ids:
        stem = index["scenes"][i]
        src = bench_dir / "source" / f"{stem}.tif"
        tgt = bench_dir / "target" / f"{stem}.tif"
        pairs.append(
            ScenePair(
                index=i,
                source=load_image(src),
                target=load_image(tgt),
                labels=load_mask(bench_dir / "source" / f"{stem}_mask.tif"),
                quality=load_quality(bench_dir / "target" / f"{stem}_quality.tif"),
            )
        )
    return pairs


def source_pool(pairs: Sequence[ScenePair], size: int, stride: int | None = None) -> PatchSet:
    return PatchSet.concat(
        [extract_patches(p.source, size, stride or size, labels=p.labels) for p in pairs]
    )


def target_pool(pairs: Sequence[ScenePair], size: int, stride: int | None = None) -> PatchSet:
    return PatchSet.concat(
        [extract_patches(p.target, size, stride or size, quality=p.quality) for p in pairs]
    )


def scene_accuracy(classifier, pairs: Sequence[ScenePair], arrays: Sequence[np.ndarray]) -> dict:
    """Pixel accuracy of ``classifier`` on each array against the scene labels.

    Pixels are pooled over scenes, so every pixel weighs the same.
    """
    correct = n = 0
    good = n_good = 0
    for pair, x in zip(pairs, arrays):
        pred = (predict_proba(classifier, x) >= 0.5).astype(np.uint8)
        a = accuracy(pred, pair.labels, pair.quality)
        correct += a["accuracy"] * a["n_valid"] / 100.0
        n += a["n_valid"]
        good += 0.0 if not a["n_good"] else a["accuracy_good"] * a["n_good"] / 100.0
        n_good += a["n_good"]
    n_bad = n - n_good
    return {
        "accuracy": 100.0 * correct / n,
        "accuracy_good": 100.0 * good / n_good if n_good else float("nan"),
        "accuracy_bad": 100.0 * (correct - good) / n_bad if n_bad else float("nan"),
        "share_bad": n_bad / n,
    }


def evaluate_methods(
    classifier,
    pairs: Sequence[ScenePair],
    methods: Mapping[str, Callable[[np.ndarray], np.ndarray]],
) -> dict[str, dict]:
    """Score the classifier on the source, the raw target and each transformed target.

    Every entry also carries the per-band histogram L1 distance to the
    source; transformed entries add the stratified ``target - transformed``
    statistics.
    """
    from .raster import Domain

    src = [p.source.data for p in pairs]
    tgt = [p.target.data for p in pairs]
    ref = band_histograms(src)
    out = {
        "source": {**scene_accuracy(classifier, pairs, src), "hist_l1": [0.0] * len(BANDS)},
        "no-da": {
            **scene_accuracy(classifier, pairs, tgt),
            "hist_l1": histogram_distance(ref, band_histograms(tgt)).tolist(),
        },
    }
    for name, fn in methods.items():
        adapted = [np.asarray(fn(x), dtype=np.float32) for x in tgt]
        entry = scene_accuracy(classifier, pairs, adapted)
        entry["hist_l1"] = histogram_distance(ref, band_histograms(adapted)).tolist()
        images = [p.target.replace(a, domain=Domain.PV_ADAPTED_333M) for p, a in zip(pairs, adapted)]
        diff = toa_difference_stats([p.target for p in pairs], images, [p.quality for p in pairs])
        entry["median_abs_diff"] = {
            b: {s: diff["bands"][b][s]["median_abs"] for s in ("good", "bad")} for b in BANDS
        }
        out[name] = entry
    return out
