"""Training, tiled inference and scoring of the LU cloud classifier."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import CloudTrainConfig
from .models import CloudUNet, NetworkKind, load_checkpoint, save_checkpoint
from .raster import MASK_NODATA, CloudMask, MultispectralImage, PatchSet, QualityMask
from .tiling import run_network, tiled_apply

logger = logging.getLogger(__name__)

UNET_HALO = 16
UNET_TILE = 32


def _augment_pair(x: np.ndarray, y: np.ndarray, rng: np.random.Generator):
    k = int(rng.integers(4))
    hf, vf = rng.integers(2, size=2)
    x, y = np.rot90(x, k, axes=(-2, -1)), np.rot90(y, k, axes=(-2, -1))
    if hf:
        x, y = x[..., ::-1], y[..., ::-1]
    if vf:
        x, y = x[..., ::-1, :], y[..., ::-1, :]
    return x, y


def _sample_batch(pool: PatchSet, cfg: CloudTrainConfig, rng: np.random.Generator):
    n = len(pool)
    idx = rng.integers(n, size=cfg.batch_size)
    size = cfg.patch_size
    xs, ys = [], []
    for i in idx:
        x = pool.patches[i]
        # invalid pixels carry the ignore code so they drop out of the loss
        y = pool.labels[i].astype(np.int16)
        if pool.valid is not None:
            y = np.where(pool.valid[i], y, MASK_NODATA)
        if pool.patch_size > size:
            r, c = rng.integers(pool.patch_size - size + 1, size=2)
            x, y = x[:, r : r + size, c : c + size], y[r : r + size, c : c + size]
        if cfg.augment:
            x, y = _augment_pair(x, y, rng)
        xs.append(np.ascontiguousarray(x))
        ys.append(np.ascontiguousarray(y))
    return torch.from_numpy(np.stack(xs).astype(np.float32)), torch.from_numpy(np.stack(ys))


def masked_bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over pixels whose label is 0 or 1."""
    valid = labels != MASK_NODATA
    if not valid.any():
        return logits.sum() * 0.0
    target = labels.clamp(0, 1).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits[valid], target[valid])


@dataclass
class CloudResult:
    net: CloudUNet
    records: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    seed: int = 0


def train_cloud(
    pool: PatchSet,
    cfg: CloudTrainConfig,
    out_dir=None,
    progress: Callable[[int, dict], None] | None = None,
) -> CloudResult:
    """Fit a cloud U-Net on labelled LU patches for ``cfg.steps`` Adam steps."""
    if pool.labels is None:
        raise ValueError("train_cloud needs a PatchSet with labels")
    if pool.labels.shape != (len(pool), pool.patch_size, pool.patch_size):
        raise ValueError(
            f"label/patch misalignment: labels {pool.labels.shape} vs {len(pool)} patches of {pool.patch_size}"
        )
    if pool.patch_size < cfg.patch_size:
        raise ValueError(f"pool patches ({pool.patch_size}) smaller than training patch size {cfg.patch_size}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = CloudUNet()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    result = CloudResult(net=net, seed=cfg.seed)
    net.train()
    for step in range(cfg.steps):
        x, y = _sample_batch(pool, cfg, rng)
        logits = net.score(x)[:, 0]
        loss = masked_bce(logits, y)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"step {step}: non-finite cloud loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            valid = y != MASK_NODATA
            acc = ((logits > 0) == (y == 1))[valid].float().mean().item() * 100 if valid.any() else float("nan")
        rec = {"step": step, "loss": loss.item(), "accuracy": acc}
        result.records.append(rec)
        if progress is not None:
            progress(step, rec)
    net.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.checkpoint = save_checkpoint(out_dir, net, step=cfg.steps, seed=cfg.seed, config=cfg.to_dict())
        with open(out_dir / "losses.jsonl", "w") as fh:
            for rec in result.records:
                fh.write(json.dumps(rec) + "\n")
    return result


def train_cloud_ensemble(
    pool: PatchSet,
    cfg: CloudTrainConfig,
    seeds: Sequence[int],
    evaluate: Callable[[CloudUNet], float] | None = None,
    out_dir=None,
) -> tuple[list[CloudResult], dict]:
    """Train one network per seed and summarise per-seed accuracies.

    Without ``evaluate`` the per-seed metric is the mean training-batch
    accuracy over the last 10% of steps.
    """
    from .evaluation import summary_stats

    results, scores = [], []
    for seed in seeds:
        sub = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
        res = train_cloud(pool, cfg.replace(seed=seed), out_dir=sub)
        if evaluate is not None:
            score = float(evaluate(res.net))
        else:
            tail = res.records[-max(1, len(res.records) // 10):]
            score = float(np.mean([r["accuracy"] for r in tail]))
        results.append(res)
        scores.append(score)
    stats = {"seeds": list(seeds), "accuracies": scores, **summary_stats(scores)}
    if out_dir is not None:
        (Path(out_dir) / "ensemble.json").write_text(json.dumps(stats, indent=2))
    return results, stats


def load_cloud_net(source) -> CloudUNet:
    if isinstance(source, torch.nn.Module):
        return source
    return load_checkpoint(source, NetworkKind.CLOUD_UNET).to_module()


def predict_proba(net, data: np.ndarray, tiled: bool = True) -> np.ndarray:
    """Cloud probability for a ``(4, H, W)`` array."""
    net = load_cloud_net(net)
    net.eval()
    if tiled:
        out = tiled_apply(net, data, tile=UNET_TILE, overlap=0.5, halo=UNET_HALO, multiple=4)
    else:
        out = run_network(net, data, halo=UNET_HALO, multiple=4)
    return np.clip(out[0], 0.0, 1.0)


def predict_cloud(image: MultispectralImage, ckpt, threshold: float = 0.5) -> tuple[np.ndarray, CloudMask]:
    """Probability map and thresholded mask; invalid pixels get code 255.

    Inference runs on the bounding box of valid pixels, so invalid margins do
    not change the probabilities of the valid region.
    """
    net = load_cloud_net(ckpt)
    h, w = image.shape
    prob = np.zeros((h, w), dtype=np.float32)
    rows = np.flatnonzero(image.valid.any(axis=1))
    cols = np.flatnonzero(image.valid.any(axis=0))
    if len(rows):
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        prob[r0:r1, c0:c1] = predict_proba(net, image.data[:, r0:r1, c0:c1])
    mask = (prob >= threshold).astype(np.uint8)
    mask[~image.valid] = MASK_NODATA
    prob[~image.valid] = 0.0
    return prob, CloudMask(labels=mask, resolution_m=image.resolution_m)


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, CloudMask) else np.asarray(m)


def accuracy(pred, truth, strata: QualityMask | np.ndarray | None = None) -> dict:
    """Overall accuracy (percent) on pixels valid in both masks.

    With ``strata`` (a quality mask, or a boolean "bad" map), accuracy and
    population share are also reported for good and bad pixels; a pixel is
    bad when any band is flagged.
    """
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {t.shape}")
    valid = (p != MASK_NODATA) & (t != MASK_NODATA)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid pixels to score")
    correct = (p == t) & valid
    out = {"accuracy": 100.0 * correct.sum() / n, "n_valid": n}
    if strata is not None:
        bad = strata.any_bad() if isinstance(strata, QualityMask) else np.asarray(strata, dtype=bool)
        if bad.ndim == 3:
            bad = bad.any(axis=0)
        if bad.shape != p.shape:
            raise ValueError(f"shape mismatch: strata {bad.shape} vs masks {p.shape}")
        for name, sel in (("good", valid & ~bad), ("bad", valid & bad)):
            k = int(sel.sum())
            out[f"n_{name}"] = k
            out[f"share_{name}"] = k / n
            out[f"accuracy_{name}"] = 100.0 * correct[sel].sum() / k if k else float("nan")
    return out
