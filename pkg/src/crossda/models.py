"""Network specifications, torch builders and checkpoint persistence.

Each architecture is described by a :class:`NetworkSpec` (a flat layer list
plus skip links).  The torch modules are constructed from those layer
entries, so the NetworkSpec is the single source for filter counts, kernel sizes and
parameter totals.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IN_CHANNELS = 4
LEAKY_SLOPE = 0.2
CHECKPOINT_VERSION = 1


class NetworkKind(str, Enum):
    GENERATOR = "GENERATOR"
    DISCRIMINATOR = "DISCRIMINATOR"
    CLOUD_UNET = "CLOUD_UNET"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    op: str  # conv | pool | upsample | concat
    in_channels: int = 0
    filters: int = 0
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    activation: Optional[str] = None
    norm: Optional[str] = None
    separable: bool = False

    def param_count(self) -> int:
        if self.op != "conv":
            return 0
        k2 = self.kernel * self.kernel
        if self.separable:
            n = k2 * self.in_channels + self.in_channels * self.filters + self.filters
        else:
            n = k2 * self.in_channels * self.filters + self.filters
        if self.norm == "batch":
            n += 2 * self.filters
        return n


@dataclass(frozen=True)
class NetworkSpec:
    kind: NetworkKind
    layers: tuple[LayerSpec, ...]
    skips: tuple[tuple[str, str], ...] = ()
    in_channels: int = IN_CHANNELS

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def generator_spec(width: int = 64) -> NetworkSpec:
    def sep(name, cin, dil):
        return LayerSpec(name, "conv", cin, width, 3, 1, dil, "relu", "batch", True)

    return NetworkSpec(
        kind=NetworkKind.GENERATOR,
        layers=(
            sep("block1_conv1", IN_CHANNELS, 1),
            sep("block1_conv2", width, 1),
            sep("block2_conv1", width, 2),
            sep("block2_conv2", width, 2),
            LayerSpec("out", "conv", width, IN_CHANNELS, 1),
        ),
        # block1 output is added to block2 output; the input is added to the
        # final 1x1 projection so the net is identity plus a correction.
        skips=(("block1_conv2", "block2_conv2"), ("input", "out")),
    )


def discriminator_spec(base_filters: int = 8, n_layers: int = 4) -> NetworkSpec:
    layers = []
    cin = IN_CHANNELS
    for i in range(n_layers):
        f = base_filters * 2**i
        layers.append(LayerSpec(f"conv{i + 1}", "conv", cin, f, 4, 2, 1, "leaky_relu", "batch"))
        cin = f
    layers.append(LayerSpec("out", "conv", cin, 1, 1, activation="sigmoid"))
    return NetworkSpec(kind=NetworkKind.DISCRIMINATOR, layers=tuple(layers))


def cloud_unet_spec(widths: tuple[int, int, int] = (24, 56, 216)) -> NetworkSpec:
    w1, w2, w3 = widths

    def sep(name, cin, cout):
        return LayerSpec(name, "conv", cin, cout, 3, activation="relu", norm="batch", separable=True)

    layers = (
        sep("enc1_conv1", IN_CHANNELS, w1),
        sep("enc1_conv2", w1, w1),
        LayerSpec("pool1", "pool", kernel=2, stride=2),
        sep("enc2_conv1", w1, w2),
        sep("enc2_conv2", w2, w2),
        LayerSpec("pool2", "pool", kernel=2, stride=2),
        sep("mid_conv1", w2, w3),
        sep("mid_conv2", w3, w3),
        LayerSpec("up2", "upsample", kernel=2, stride=2),
        LayerSpec("cat2", "concat"),
        sep("dec2_conv1", w3 + w2, w2),
        sep("dec2_conv2", w2, w2),
        LayerSpec("up1", "upsample", kernel=2, stride=2),
        LayerSpec("cat1", "concat"),
        sep("dec1_conv1", w2 + w1, w1),
        sep("dec1_conv2", w1, w1),
        LayerSpec("out", "conv", w1, 1, 1, activation="sigmoid"),
    )
    return NetworkSpec(
        kind=NetworkKind.CLOUD_UNET,
        layers=layers,
        skips=(("enc2_conv2", "cat2"), ("enc1_conv2", "cat1")),
    )


# --- torch modules -----------------------------------------------------------


def _conv(layer: LayerSpec) -> nn.Module:
    if layer.separable:
        pad = layer.dilation * (layer.kernel // 2)
        return nn.Sequential(
            nn.Conv2d(layer.in_channels, layer.in_channels, layer.kernel, padding=pad,
                      dilation=layer.dilation, groups=layer.in_channels, bias=False),
            nn.Conv2d(layer.in_channels, layer.filters, 1),
        )
    if layer.stride == 2:
        pad = (layer.kernel - 2) // 2
    else:
        pad = layer.dilation * (layer.kernel // 2)
    return nn.Conv2d(layer.in_channels, layer.filters, layer.kernel, stride=layer.stride,
                     padding=pad, dilation=layer.dilation)


class Generator(nn.Module):
    """Residual separable-conv generator; starts as the exact identity map."""

    def __init__(self, spec: NetworkSpec | None = None):
        super().__init__()
        self.spec = spec or generator_spec()
        convs = [l for l in self.spec.layers if l.name != "out"]
        self.convs = nn.ModuleList(_conv(l) for l in convs)
        self.norms = nn.ModuleList(nn.BatchNorm2d(l.filters) for l in convs)
        self.out = _conv(self.spec.layer("out"))
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        h = x
        feats = []
        for conv, norm in zip(self.convs, self.norms):
            h = norm(F.relu(conv(h)))
            feats.append(h)
        block1, block2 = feats[1], feats[3]
        return x + self.out(block2 + block1)


class Discriminator(nn.Module):
    """PatchGAN-style discriminator with a total downsampling factor of 16."""

    def __init__(self, spec: NetworkSpec | None = None):
        super().__init__()
        self.spec = spec or discriminator_spec()
        convs = [l for l in self.spec.layers if l.name != "out"]
        self.factor = 2 ** len(convs)
        self.convs = nn.ModuleList(_conv(l) for l in convs)
        self.norms = nn.ModuleList(nn.BatchNorm2d(l.filters) for l in convs)
        self.out = _conv(self.spec.layer("out"))

    def _pad(self, x):
        h, w = x.shape[-2:]
        if h < self.factor or w < self.factor:
            raise ValueError(f"discriminator input must be at least {self.factor}x{self.factor}, got {h}x{w}")
        ph = -h % self.factor
        pw = -w % self.factor
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        return x

    def score(self, x):
        """Pre-sigmoid logit map."""
        h = self._pad(x)
        for conv, norm in zip(self.convs, self.norms):
            h = norm(F.leaky_relu(conv(h), LEAKY_SLOPE))
        return self.out(h)

    def forward(self, x):
        return torch.sigmoid(self.score(x))


class CloudUNet(nn.Module):
    """Two-level U-Net with separable convolutions; outputs cloud probability."""

    def __init__(self, spec: NetworkSpec | None = None):
        super().__init__()
        self.spec = spec or cloud_unet_spec()
        self.blocks = nn.ModuleDict()
        for layer in self.spec.layers:
            if layer.op == "conv" and layer.name != "out":
                self.blocks[layer.name] = nn.Sequential(_conv(layer), nn.BatchNorm2d(layer.filters), nn.ReLU())
        self.out = _conv(self.spec.layer("out"))

    def score(self, x):
        b = self.blocks
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(f"U-Net input dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        e1 = b["enc1_conv2"](b["enc1_conv1"](x))
        e2 = b["enc2_conv2"](b["enc2_conv1"](F.max_pool2d(e1, 2)))
        m = b["mid_conv2"](b["mid_conv1"](F.max_pool2d(e2, 2)))
        d2 = torch.cat([F.interpolate(m, scale_factor=2, mode="nearest"), e2], dim=1)
        d2 = b["dec2_conv2"](b["dec2_conv1"](d2))
        d1 = torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], dim=1)
        d1 = b["dec1_conv2"](b["dec1_conv1"](d1))
        return self.out(d1)

    def forward(self, x):
        return torch.sigmoid(self.score(x))


_BUILDERS = {
    NetworkKind.GENERATOR: Generator,
    NetworkKind.DISCRIMINATOR: Discriminator,
    NetworkKind.CLOUD_UNET: CloudUNet,
}


def build_generator() -> Generator:
    return Generator()


def build_discriminator() -> Discriminator:
    return Discriminator()


def build_cloud_unet() -> CloudUNet:
    return CloudUNet()


def build(spec: NetworkSpec) -> nn.Module:
    return _BUILDERS[spec.kind](spec)


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def count_flops(net: nn.Module, shape=(1, IN_CHANNELS, 32, 32)) -> int:
    """Multiply-accumulate count of conv layers for one forward pass."""
    total = 0

    def hook(mod, inp, out):
        nonlocal total
        k = mod.kernel_size[0] * mod.kernel_size[1] * (mod.in_channels // mod.groups)
        total += out.numel() // out.shape[0] * k

    handles = [m.register_forward_hook(hook) for m in net.modules() if isinstance(m, nn.Conv2d)]
    was_training = net.training
    net.eval()
    with torch.no_grad():
        net(torch.zeros(shape))
    net.train(was_training)
    for h in handles:
        h.remove()
    return total


# --- checkpoints -------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    kind: NetworkKind
    spec: NetworkSpec
    weights: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    config: dict[str, Any] = field(default_factory=dict)

    def to_module(self) -> nn.Module:
        net = build(self.spec)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.weights.items()}
        try:
            net.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"weights do not match {self.kind.value} spec: {exc}") from exc
        net.eval()
        return net


def _spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        kind=NetworkKind(d["kind"]),
        layers=tuple(LayerSpec(**l) for l in d["layers"]),
        skips=tuple(tuple(s) for s in d["skips"]),
        in_channels=d["in_channels"],
    )


def save_checkpoint(path, net: nn.Module, step: int = 0, seed: int = 0, config: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    spec: NetworkSpec = net.spec
    state = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    np.savez(path / "weights.npz", **state)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "kind": spec.kind.value,
        "spec_hash": spec.digest(),
        "spec": spec.to_dict(),
        "step": int(step),
        "seed": int(seed),
        "config": config or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, kind: NetworkKind | None = None) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        with np.load(path / "weights.npz") as z:
            weights = {k: z[k] for k in z.files}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt or missing checkpoint at {path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    spec = _spec_from_dict(manifest["spec"])
    if spec.digest() != manifest["spec_hash"]:
        raise CheckpointError("spec hash mismatch")
    ckpt = Checkpoint(
        kind=NetworkKind(manifest["kind"]),
        spec=spec,
        weights=weights,
        step=manifest["step"],
        seed=manifest["seed"],
        config=manifest["config"],
    )
    if kind is not None and ckpt.kind != NetworkKind(kind):
        raise CheckpointError(f"expected a {NetworkKind(kind).value} checkpoint, found {ckpt.kind.value}")
    return ckpt
