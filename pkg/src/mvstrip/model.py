"""2D U-Net definition, construction, parameter accounting and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigurationError
from .volume import NormParams, Orientation

CHECKPOINT_FORMAT = "mvstrip-unet"
CHECKPOINT_VERSION = 1
INIT_SCHEME = "he-normal-fan-in"

# short names used on the command line and in sweep specs
PARAM_ALIASES = {"f": "kernel_size", "L": "depth", "F1": "base_filters", "Dl": "convs_per_level"}


@dataclass(frozen=True)
class NetworkConfig:
    """Hyperparameters that fully determine the U-Net graph.

    Attributes:
        kernel_size: odd convolution kernel edge.
        depth: number of 2x2 pooling layers; the encoder has ``depth + 1`` levels.
        base_filters: filters at the first level; each deeper level doubles it.
        convs_per_level: conv/BN/ReLU blocks at every encoder and decoder level.
    """

    kernel_size: int = 7
    depth: int = 6
    base_filters: int = 32
    convs_per_level: int = 3
    n_labels: int = 2
    in_channels: int = 1

    def __post_init__(self):
        for name in ("kernel_size", "depth", "base_filters", "convs_per_level", "in_channels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.n_labels < 2:
            raise ConfigurationError(f"n_labels must be at least 2, got {self.n_labels}")

    def filters(self, level: int) -> int:
        """Filters at 0-based ``level`` (0 is the full-resolution level)."""
        return self.base_filters * 2 ** level

    @property
    def size_multiple(self) -> int:
        return 2 ** self.depth

    def check_input_size(self, height: int, width: int) -> None:
        m = self.size_multiple
        if height % m or width % m:
            raise ConfigurationError(
                f"input size {height}x{width} is not divisible by 2**depth = {m}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = {PARAM_ALIASES.get(k, k): v for k, v in d.items()}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def _block(cin: int, cout: int, f: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, f, padding=f // 2), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


def _level(cin: int, cout: int, f: int, n: int) -> nn.Sequential:
    layers = _block(cin, cout, f)
    for _ in range(n - 1):
        layers += _block(cout, cout, f)
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Encoder/decoder with concatenating skips and a softmax head.

    Input is ``(B, in_channels, H, W)``; output is per-pixel class
    probabilities ``(B, n_labels, H, W)``.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0, orientation: Optional[Orientation] = None):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        self.orientation = Orientation(orientation) if orientation is not None else None
        f, n = config.kernel_size, config.convs_per_level

        self.encoder = nn.ModuleList()
        cin = config.in_channels
        for level in range(config.depth + 1):
            self.encoder.append(_level(cin, config.filters(level), f, n))
            cin = config.filters(level)
        self.pool = nn.MaxPool2d(2, stride=2)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        # decoder[i] serves level depth-1-i
        self.decoder = nn.ModuleList()
        for level in reversed(range(config.depth)):
            cin = config.filters(level + 1) + config.filters(level)
            self.decoder.append(_level(cin, config.filters(level), f, n))
        self.head = nn.Conv2d(config.filters(0), config.n_labels, 1)
        self.reset_parameters(self.seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """He-normal weights, std sqrt(gain / fan_in), zero biases, unit BN scale.

        gain is 2 for convolutions feeding a ReLU and 1 for the head.
        """
        gen = torch.Generator().manual_seed(int(seed))
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                gain = 1.0 if module is self.head else 2.0
                module.weight.normal_(0.0, math.sqrt(gain / fan_in), generator=gen)
                module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for level, enc in enumerate(self.encoder):
            x = enc(x)
            if level < self.config.depth:
                skips.append(x)
                x = self.pool(x)
        for dec, skip in zip(self.decoder, reversed(skips)):
            x = dec(torch.cat([self.upsample(x), skip], dim=1))
        return self.head(x)


def build(config: NetworkConfig, seed: int = 0, orientation: Optional[Orientation] = None) -> UNet:
    return UNet(config, seed=seed, orientation=orientation)


def as_batch(images, config: NetworkConfig) -> torch.Tensor:
    """Convert ``(B, H, W)`` or ``(B, H, W, C)`` arrays to a float32 NCHW tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"expected a stack of 2D slices, got array of shape {arr.shape}")
    if arr.shape[-1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channel(s), got {arr.shape[-1]}")
    config.check_input_size(arr.shape[1], arr.shape[2])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def forward(net: UNet, batch, device="cpu") -> np.ndarray:
    """Run ``net`` on a stack of slices; returns ``(B, H, W, n_labels)`` probabilities.

    Uses whatever mode (train/eval) the network is in; call ``net.eval()``
    for deterministic inference.
    """
    x = as_batch(batch, net.config).to(device)
    with torch.no_grad():
        probs = net(x)
    return probs.permute(0, 2, 3, 1).cpu().numpy()


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form number of trainable scalars of ``build(config)``."""
    f2 = config.kernel_size ** 2

    def level(cin: int, cout: int) -> int:
        total = 0
        for _ in range(config.convs_per_level):
            total += f2 * cin * cout + cout + 2 * cout  # conv weights+bias, BN scale+shift
            cin = cout
        return total

    total = 0
    cin = config.in_channels
    for lvl in range(config.depth + 1):
        total += level(cin, config.filters(lvl))
        cin = config.filters(lvl)
    for lvl in reversed(range(config.depth)):
        total += level(config.filters(lvl + 1) + config.filters(lvl), config.filters(lvl))
    total += config.filters(0) * config.n_labels + config.n_labels
    return total


def count_trainable(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def save_checkpoint(net: UNet, norm_params: Optional[NormParams], path) -> None:
    """Serialize weights, BN statistics and a JSON metadata block to one file."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "orientation": net.orientation.value if net.orientation else None,
        "seed": net.seed,
        "init": INIT_SCHEME,
        "norm": dataclasses.asdict(norm_params) if norm_params is not None else None,
    }
    payload = {"meta": json.dumps(meta, indent=2, sort_keys=True), "state_dict": net.state_dict()}
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint_meta(path) -> dict:
    return _read(path)[0]


def _read(path, mmap: bool = False) -> Tuple[dict, dict]:
    path = os.fspath(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True, mmap=mmap)
        meta = json.loads(payload["meta"])
        state = payload["state_dict"]
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no such checkpoint") from exc
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint ({exc})") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return meta, state


def load_checkpoint(
    path, orientation: Optional[Orientation] = None, mmap: bool = False
) -> Tuple[UNet, Optional[NormParams]]:
    """Rebuild a network (in eval mode) and its normalization parameters.

    The stored tensors become the network's parameters directly, so loading
    costs one copy of the weights. With ``mmap`` they stay file-backed, which
    keeps very large networks out of anonymous memory.

    Raises:
        CheckpointError: corrupt file, config/weight mismatch, or the stored
            view differs from ``orientation``.
    """
    meta, state = _read(path, mmap=mmap)
    stored = meta.get("orientation")
    if orientation is not None and stored != Orientation(orientation).value:
        raise CheckpointError(
            f"{os.fspath(path)}: checkpoint was trained for {stored} slices, not {Orientation(orientation).value}"
        )
    try:
        config = NetworkConfig.from_dict(meta["config"])
        with torch.device("meta"):
            net = UNet(config, seed=meta.get("seed", 0), orientation=stored)
        net.load_state_dict(state, strict=True, assign=True)
    except Exception as exc:
        raise CheckpointError(f"{os.fspath(path)}: checkpoint does not match its config ({exc})") from exc
    net.eval()
    norm = NormParams(**meta["norm"]) if meta.get("norm") else None
    return net, norm
