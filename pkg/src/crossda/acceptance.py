"""Scaled synthetic domain-adaptation experiment used for acceptance.

One run builds the paired benchmark, trains a source-only cloud classifier,
fits the histogram-matching baseline, trains the adaptation networks and
scores every method on the held-out scenes.  Several seeds give the ablation
table.  ``python3 -m crossda.acceptance --out DIR`` runs it standalone.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cloud import train_cloud
from .config import CloudTrainConfig, da_preset
from .da import adapt_array, train_da
from .evaluation import ablation_report
from .experiment import evaluate_methods, source_pool, split_indices, target_pool
from .histmatch import histogram_match_apply, histogram_match_fit
from .raster import BANDS
from .synth import make_benchmark

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    n_scenes: int = 200
    scene_size: int = 128
    bench_seed: int = 0
    # source classifier
    cloud_steps: int = 1500
    cloud_batch: int = 16
    cloud_lr: float = 1e-3
    pool_patch: int = 64
    # adaptation networks; steps stay within the 5000-step acceptance budget
    da_preset: str = "full-da"
    da_steps: int = 2000
    da_batch: int = 8
    da_patch: int = 32
    da_lr: float = 1e-4
    reported_presets: tuple[str, ...] = ("no-seg-id",)
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    da_records_tail: dict = field(default_factory=dict)
    seconds: float = 0.0


def run_seed(pairs, split, cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Train the classifier and every DA variant for one seed and score them."""
    t0 = time.time()
    torch.set_num_threads(1)
    train = [pairs[i] for i in split["train"]]
    test = [pairs[i] for i in split["test"]]

    clf_cfg = CloudTrainConfig(
        steps=cfg.cloud_steps, batch_size=cfg.cloud_batch, patch_size=32,
        learning_rate=cfg.cloud_lr, seed=seed,
    )
    net = train_cloud(source_pool(train, cfg.pool_patch), clf_cfg).net
    logger.info("seed %d: classifier trained (%.0fs)", seed, time.time() - t0)

    pv = target_pool(train, cfg.da_patch)
    lu = source_pool(train, cfg.da_patch)
    hm = histogram_match_fit(pv, lu)
    methods = {"hist-match": lambda x: histogram_match_apply(x, hm)}
    tails = {}
    for preset in (cfg.da_preset,) + tuple(cfg.reported_presets):
        da_cfg = da_preset(
            preset, steps=cfg.da_steps, batch_size=cfg.da_batch, patch_size=cfg.da_patch,
            learning_rate=cfg.da_lr, seed=seed,
        )
        res = train_da(pv, lu, da_cfg, classifier=net)
        G = res.state.g_pv2lu
        methods[preset] = lambda x, G=G: adapt_array(G, x)
        tails[preset] = {k: float(np.mean([r[k] for r in res.records[-100:]])) for k in res.records[0]}
        logger.info("seed %d: %s trained (%.0fs)", seed, preset, time.time() - t0)
    metrics = evaluate_methods(net, test, methods)
    return SeedResult(seed=seed, metrics=metrics, da_records_tail=tails, seconds=time.time() - t0)


def criteria(results: list[SeedResult], cfg: ExperimentConfig) -> dict:
    """Acceptance quantities for the DA experiment and the ablation ordering."""
    first = results[0].metrics
    raw, da, src = first["no-da"], first[cfg.da_preset], first["source"]
    raw_l1, da_l1 = np.asarray(raw["hist_l1"]), np.asarray(da["hist_l1"])
    reduction = 1.0 - da_l1 / raw_l1
    deficit = src["accuracy"] - raw["accuracy"]
    gain = da["accuracy"] - raw["accuracy"]
    blue = da["median_abs_diff"]["BLUE"]
    ratio = blue["bad"] / blue["good"] if blue["good"] > 0 else float("inf")

    names = ["no-da", "hist-match", cfg.da_preset, *cfg.reported_presets]
    table = ablation_report([(n, [r.metrics[n]["accuracy"] for r in results]) for n in names])
    mean = {row["config"]: row["mean"] for row in table}
    return {
        "hist_reduction": dict(zip(BANDS, reduction.tolist())),
        "hist_ok": bool((reduction >= 0.5).all()),
        "accuracy": {"source": src["accuracy"], "raw": raw["accuracy"], "adapted": da["accuracy"]},
        "deficit_covered": gain / deficit if deficit > 0 else float("nan"),
        "accuracy_ok": bool(gain > 0 and gain >= 0.5 * deficit),
        "median_ratio_blue": ratio,
        "median_ok": bool(ratio >= 3.0),
        "ablation": table,
        "ordering_ok": bool(mean[cfg.da_preset] >= mean["hist-match"] and mean[cfg.da_preset] >= mean["no-da"]),
    }


def run_experiment(cfg: ExperimentConfig = ExperimentConfig(), out_dir=None) -> dict:
    pairs = make_benchmark(cfg.n_scenes, cfg.scene_size, seed=cfg.bench_seed)
    split = split_indices(len(pairs))
    results = [run_seed(pairs, split, cfg, s) for s in cfg.seeds]
    report = {
        "config": asdict(cfg),
        "seeds": [asdict(r) for r in results],
        "criteria": criteria(results, cfg),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "acceptance.json").write_text(json.dumps(report, indent=2))
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="synthetic DA acceptance experiment")
    parser.add_argument("--out", required=True)
    parser.add_argument("--da-steps", type=int, default=ExperimentConfig.da_steps)
    parser.add_argument("--seeds", type=int, nargs="+", default=list(ExperimentConfig.seeds))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig(da_steps=args.da_steps, seeds=tuple(args.seeds))
    report = run_experiment(cfg, args.out)
    print(json.dumps(report["criteria"], indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
