"""Cycle-consistent adversarial domain adaptation between PV and LU patches.

Four networks are trained together: ``g_pv2lu`` (the adaptation applied to
Proba-V imagery), ``g_lu2pv``, and one discriminator per domain.  A frozen
cloud classifier trained on LU supplies the segmentation-consistency term.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .config import DAConfig
from .models import (
    Discriminator,
    Generator,
    NetworkKind,
    load_checkpoint,
    save_checkpoint,
)
from .raster import Domain, MultispectralImage, PatchSet
from .tiling import run_network, tiled_apply

logger = logging.getLogger(__name__)

RECORD_KEYS = (
    "d_lu", "d_pv", "gp_lu", "gp_pv",
    "gan_pv2lu", "gan_lu2pv", "id_pv2lu", "id_lu2pv",
    "cyc", "seg_pv2lu", "seg_lu2pv",
)
NETWORKS = ("g_pv2lu", "g_lu2pv", "d_pv", "d_lu")
GENERATOR_HALO = 8  # receptive-field radius of the generator is 6 px
ADAPT_RANGE = (0.0, 1.5)


def objective_terms(cfg: DAConfig) -> set[str]:
    """Loss terms with nonzero weight in the generator objective."""
    weights = {"gan": cfg.lambda_gan, "id": cfg.lambda_id, "cyc": cfg.lambda_cyc, "seg": cfg.lambda_seg}
    return {k for k, v in weights.items() if v > 0}


@dataclass
class DAState:
    g_pv2lu: Generator
    g_lu2pv: Generator
    d_pv: Discriminator
    d_lu: Discriminator
    optimizers: dict[str, torch.optim.Optimizer]
    classifier: Optional[nn.Module] = None
    step: int = 0

    @classmethod
    def create(cls, cfg: DAConfig, classifier: nn.Module | None = None) -> "DAState":
        torch.manual_seed(cfg.seed)
        nets = dict(g_pv2lu=Generator(), g_lu2pv=Generator(), d_pv=Discriminator(), d_lu=Discriminator())
        opts = {k: torch.optim.Adam(n.parameters(), lr=cfg.learning_rate) for k, n in nets.items()}
        if classifier is not None:
            classifier.eval()
            for p in classifier.parameters():
                p.requires_grad_(False)
        return cls(optimizers=opts, classifier=classifier, **nets)

    def networks(self) -> dict[str, nn.Module]:
        return {k: getattr(self, k) for k in NETWORKS}


def augment(batch: np.ndarray, rng: np.random.Generator, rot90: bool = True, flip: bool = True) -> np.ndarray:
    """Random 90-degree rotations and flips, drawn independently per sample."""
    if not (rot90 or flip):
        return batch
    out = np.empty_like(batch)
    for i, x in enumerate(batch):
        k = int(rng.integers(4)) if rot90 else 0
        hf, vf = (rng.integers(2, size=2) if flip else (0, 0))
        x = np.rot90(x, k, axes=(-2, -1))
        if hf:
            x = x[..., ::-1]
        if vf:
            x = x[..., ::-1, :]
        out[i] = x
    return out


class BatchSampler:
    """Epoch-wise shuffled batches from one pool, driven by its own RNG."""

    def __init__(self, patches: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(patches) == 0:
            raise ValueError("empty patch pool")
        self.patches = patches
        self.batch_size = min(batch_size, len(patches))
        self.rng = rng
        self._order = np.empty(0, dtype=int)

    def next(self) -> np.ndarray:
        if len(self._order) < self.batch_size:
            self._order = self.rng.permutation(len(self.patches))
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return self.patches[idx]


def _weighted(weight: float, fn: Callable[[], torch.Tensor]) -> torch.Tensor:
    """Evaluate a loss term; zero-weight terms are computed without a graph."""
    if weight > 0:
        return fn()
    with torch.no_grad():
        return fn()


def train_step(state: DAState, pv_batch, lu_batch, cfg: DAConfig) -> dict[str, float]:
    """One discriminator update per domain followed by one generator update."""
    pv = torch.as_tensor(np.ascontiguousarray(pv_batch), dtype=torch.float32)
    lu = torch.as_tensor(np.ascontiguousarray(lu_batch), dtype=torch.float32)
    G_ab, G_ba, D_pv, D_lu = state.g_pv2lu, state.g_lu2pv, state.d_pv, state.d_lu
    for net in (G_ab, G_ba, D_pv, D_lu):
        net.train()
    rec: dict[str, torch.Tensor] = {}

    fake_lu = G_ab(pv)
    fake_pv = G_ba(lu)

    # discriminators
    for name, D, real, fake in (("lu", D_lu, lu, fake_lu), ("pv", D_pv, pv, fake_pv)):
        for p in D.parameters():
            p.requires_grad_(True)
        opt = state.optimizers[f"d_{name}"]
        opt.zero_grad(set_to_none=True)
        ld = L.disc_loss(D, real, fake)
        gp = L.gradient_penalty(D, real, fake=fake) if cfg.gp_weight > 0 else ld.new_zeros(())
        (ld + cfg.gp_weight * gp).backward()
        opt.step()
        rec[f"d_{name}"], rec[f"gp_{name}"] = ld.detach(), gp.detach()
        for p in D.parameters():
            p.requires_grad_(False)

    # generators: one backward of the summed objectives gives each generator
    # exactly the gradient of its own objective (the parameter sets are disjoint)
    f = state.classifier
    rec["gan_pv2lu"] = _weighted(cfg.lambda_gan, lambda: L.gan_loss(D_lu, fake_lu, real=lu))
    rec["gan_lu2pv"] = _weighted(cfg.lambda_gan, lambda: L.gan_loss(D_pv, fake_pv, real=pv))
    rec["id_pv2lu"] = _weighted(cfg.lambda_id, lambda: L.identity_loss(G_ab, pv, fake_lu))
    rec["id_lu2pv"] = _weighted(cfg.lambda_id, lambda: L.identity_loss(G_ba, lu, fake_pv))
    rec["cyc"] = _weighted(cfg.lambda_cyc, lambda: L.cycle_loss(G_ab, G_ba, pv, lu, fake_lu, fake_pv))
    if f is not None:
        rec["seg_pv2lu"] = _weighted(cfg.lambda_seg, lambda: L.seg_consistency_loss(f, pv, out=fake_lu))
        rec["seg_lu2pv"] = _weighted(cfg.lambda_seg, lambda: L.seg_consistency_loss(f, lu, out=fake_pv))
    else:
        if cfg.lambda_seg > 0:
            raise ValueError("lambda_seg > 0 requires a frozen cloud classifier")
        rec["seg_pv2lu"] = rec["seg_lu2pv"] = fake_lu.new_zeros(())

    total = (
        cfg.lambda_gan * (rec["gan_pv2lu"] + rec["gan_lu2pv"])
        + cfg.lambda_id * (rec["id_pv2lu"] + rec["id_lu2pv"])
        + cfg.lambda_cyc * rec["cyc"]
        + cfg.lambda_seg * (rec["seg_pv2lu"] + rec["seg_lu2pv"])
    )
    record = {k: rec[k].item() for k in RECORD_KEYS}
    bad = [k for k, v in record.items() if not np.isfinite(v)]
    if bad:
        raise L.TrainingDivergenceError(f"non-finite loss terms {bad}", step=state.step)
    for key in ("g_pv2lu", "g_lu2pv"):
        state.optimizers[key].zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
    for key in ("g_pv2lu", "g_lu2pv"):
        state.optimizers[key].step()
    for D in (D_pv, D_lu):
        for p in D.parameters():
            p.requires_grad_(True)

    state.step += 1
    return record


def steps_for(cfg: DAConfig, n_pv: int, n_lu: int) -> int:
    if cfg.steps is not None:
        return cfg.steps
    return cfg.epochs * max(1, min(n_pv, n_lu) // cfg.batch_size)


def _patches(pool) -> np.ndarray:
    return pool.patches if isinstance(pool, PatchSet) else np.asarray(pool, dtype=np.float32)


@dataclass
class DAResult:
    state: DAState
    records: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train_da(
    pv_pool,
    lu_pool,
    cfg: DAConfig,
    classifier: nn.Module | None = None,
    out_dir=None,
    progress: Callable[[int, dict], None] | None = None,
) -> DAResult:
    """Train all four networks on unpaired PV/LU pools.

    Each pool is shuffled by its own RNG stream, so the batches of one domain
    never depend on the ordering of the other.
    """
    pv = _patches(pv_pool)
    lu = _patches(lu_pool)
    if len(pv) == 0 or len(lu) == 0:
        raise ValueError("train_da needs nonempty PV and LU pools")
    if cfg.lambda_seg > 0 and classifier is None:
        if cfg.classifier is None:
            raise ValueError("lambda_seg > 0 requires a classifier checkpoint")
        classifier = load_checkpoint(cfg.classifier, NetworkKind.CLOUD_UNET).to_module()
    elif cfg.lambda_seg == 0:
        classifier = None

    state = DAState.create(cfg, classifier)
    pv_seq, lu_seq, aug_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    pv_sampler = BatchSampler(pv, cfg.batch_size, np.random.default_rng(pv_seq))
    lu_sampler = BatchSampler(lu, cfg.batch_size, np.random.default_rng(lu_seq))
    aug_rng = np.random.default_rng(aug_seq)
    n_steps = steps_for(cfg, len(pv), len(lu))

    out_dir = Path(out_dir) if out_dir is not None else None
    log = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log = open(out_dir / "losses.jsonl", "w")
    result = DAResult(state=state)
    last_ckpt = None
    try:
        for step in range(n_steps):
            pv_b = augment(pv_sampler.next(), aug_rng, cfg.augment_rot90, cfg.augment_flip)
            lu_b = augment(lu_sampler.next(), aug_rng, cfg.augment_rot90, cfg.augment_flip)
            try:
                rec = train_step(state, pv_b, lu_b, cfg)
            except L.TrainingDivergenceError as exc:
                exc.step, exc.last_checkpoint = step, last_ckpt
                raise
            result.records.append(rec)
            if log is not None:
                log.write(json.dumps({"step": step, **rec}) + "\n")
            if progress is not None:
                progress(step, rec)
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                last_ckpt = save_da_checkpoint(state, out_dir / f"step_{step + 1:06d}", cfg)
    finally:
        if log is not None:
            log.close()
    if out_dir is not None:
        result.checkpoint = save_da_checkpoint(state, out_dir / "final", cfg)
    return result


def save_da_checkpoint(state: DAState, path, cfg: DAConfig) -> Path:
    path = Path(path)
    for name, net in state.networks().items():
        save_checkpoint(path / name, net, step=state.step, seed=cfg.seed, config=cfg.to_dict())
    manifest = {"networks": list(NETWORKS), "step": state.step, "seed": cfg.seed, "config": cfg.to_dict()}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_generator(source) -> Generator:
    """Accept a Generator, a generator checkpoint dir, or a DA checkpoint set dir."""
    if isinstance(source, nn.Module):
        return source
    path = Path(source)
    if (path / "g_pv2lu").is_dir():
        path = path / "g_pv2lu"
    elif (path / "final" / "g_pv2lu").is_dir():
        path = path / "final" / "g_pv2lu"
    return load_checkpoint(path, NetworkKind.GENERATOR).to_module()


def adapt_array(generator, data: np.ndarray, tile: int = 64, overlap: float = 0.5, tiled: bool = True) -> np.ndarray:
    """Apply a generator to a ``(4, H, W)`` array (or ``(N, 4, H, W)`` batch)."""
    G = load_generator(generator)
    G.eval()
    if data.ndim == 4:
        return np.stack([adapt_array(G, d, tile, overlap, tiled) for d in data])
    if tiled:
        out = tiled_apply(G, data, tile=tile, overlap=overlap, halo=GENERATOR_HALO)
    else:
        out = run_network(G, data, halo=GENERATOR_HALO)
    return np.clip(out, *ADAPT_RANGE)


def adapt_image(image: MultispectralImage, generator, tile: int = 64, overlap: float = 0.5) -> MultispectralImage:
    out = adapt_array(generator, image.data, tile, overlap)
    out[:, ~image.valid] = 0.0
    return image.replace(out, domain=Domain.PV_ADAPTED_333M)
