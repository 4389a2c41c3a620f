"""Soft Dice loss, learning-rate schedule, epoch sampling and training drivers."""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import ConfigurationError, TrainingError
from .inference import FusionWeights, ModelBundle
from .model import NetworkConfig, UNet, build, load_checkpoint, save_checkpoint
from .volume import (
    DEFAULT_SHAPE,
    DEFAULT_SPACING,
    LabelVolume,
    NormParams,
    Orientation,
    SlicePair,
    Volume,
    conform,
    extract_slices,
    normalize_intensity,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingHyperparams:
    batch_size: int = 16
    initial_lr: float = 1e-5
    epochs: int = 30
    slices_per_epoch: int = 3000
    plateau_patience: int = 5
    lr_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "slices_per_epoch", "plateau_patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not self.initial_lr > 0:
            raise ConfigurationError(f"initial_lr must be positive, got {self.initial_lr!r}")
        if not 0 < self.lr_factor < 1:
            raise ConfigurationError(f"lr_factor must lie in (0, 1), got {self.lr_factor!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingHyperparams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    """Bookkeeping for one training run. Epochs are numbered from 1."""

    lr: float
    epoch: int = 0
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    stagnation: int = 0
    best_train_loss: float = math.inf
    best_epoch: Optional[int] = None
    checkpoint: Optional[str] = None

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch - 1] if self.best_epoch else math.inf


# -- loss --------------------------------------------------------------------

def _sample_axes(t: torch.Tensor) -> tuple:
    return tuple(range(1, t.ndim))


def per_sample_dice_loss(y_true, y_pred):
    """``1 - 2 sum(t*p) / sum(t^2 + p^2)`` for every sample of the batch.

    Sums run over all pixels and channels, so the channel axis may sit
    anywhere after the batch axis.
    """
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: y_true {tuple(y_true.shape)} vs y_pred {tuple(y_pred.shape)}")
    axes = _sample_axes(y_pred)
    num = 2.0 * (y_true * y_pred).sum(dim=axes)
    den = (y_true * y_true + y_pred * y_pred).sum(dim=axes)
    return 1.0 - num / den


def soft_dice_loss(y_true, y_pred):
    """Batch-averaged soft Dice loss.

    Accepts torch tensors (returns a differentiable scalar tensor) or array
    likes (returns a float computed in float64).
    """
    if torch.is_tensor(y_pred):
        return per_sample_dice_loss(y_true, y_pred).mean()
    t = torch.as_tensor(np.asarray(y_true, dtype=np.float64))
    p = torch.as_tensor(np.asarray(y_pred, dtype=np.float64))
    return float(per_sample_dice_loss(t, p).mean())


def soft_dice_loss_grad(y_true, y_pred) -> np.ndarray:
    """Closed-form gradient of :func:`soft_dice_loss` with respect to ``y_pred``."""
    t = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: y_true {t.shape} vs y_pred {p.shape}")
    axes = tuple(range(1, p.ndim))
    bshape = (-1,) + (1,) * (p.ndim - 1)
    num = (t * p).sum(axis=axes).reshape(bshape)
    den = (t * t + p * p).sum(axis=axes).reshape(bshape)
    return -2.0 * (t * den - 2.0 * num * p) / (den * den) / p.shape[0]


def one_hot(labels, n_labels: int = 2) -> torch.Tensor:
    """``(B, H, W)`` integer labels to a float32 ``(B, n_labels, H, W)`` tensor."""
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    return torch.nn.functional.one_hot(lab, n_labels).permute(0, 3, 1, 2).float()


# -- schedule ----------------------------------------------------------------

def update_lr(state: TrainState, hyper: Optional[TrainingHyperparams] = None) -> float:
    """Apply the plateau rule to the most recent training loss; returns the new lr.

    An epoch that beats the best training loss so far resets the stagnation
    counter. After ``plateau_patience`` consecutive non-improving epochs the
    lr is multiplied by ``lr_factor`` and the counter restarts.
    """
    hyper = hyper or TrainingHyperparams()
    if not state.train_losses:
        raise ValueError("update_lr needs at least one completed epoch")
    loss = state.train_losses[-1]
    if loss < state.best_train_loss:
        state.best_train_loss = loss
        state.stagnation = 0
    else:
        state.stagnation += 1
        if state.stagnation >= hyper.plateau_patience:
            state.lr *= hyper.lr_factor
            state.stagnation = 0
    return state.lr


def select_best_epoch(val_losses: Sequence[float]) -> int:
    """1-based epoch of the minimum validation loss (earliest on ties)."""
    if not len(val_losses):
        raise ValueError("no validation losses recorded")
    return int(np.argmin(np.asarray(val_losses, dtype=float))) + 1


# -- sampling ----------------------------------------------------------------

def sample_epoch(
    dataset: Sequence,
    n: int,
    rng: Union[np.random.Generator, int, None] = None,
    batch_size: int = 16,
) -> list[np.ndarray]:
    """Draw ``n`` dataset indices uniformly and split them into batches.

    Sampling is without replacement when ``n <= len(dataset)``, otherwise
    with replacement.
    """
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if n < 1 or batch_size < 1:
        raise ValueError("n and batch_size must be positive")
    rng = np.random.default_rng(rng)
    idx = rng.choice(len(dataset), size=n, replace=n > len(dataset))
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


# -- data assembly -----------------------------------------------------------

def prepare_subject(
    image: Volume,
    label: Optional[LabelVolume] = None,
    target_shape=DEFAULT_SHAPE,
    target_spacing=DEFAULT_SPACING,
) -> Tuple[Volume, Optional[LabelVolume], NormParams]:
    """Conform and normalize one subject exactly as inference will."""
    vol, params = normalize_intensity(conform(image, target_shape, target_spacing))
    lab = conform(label, target_shape, target_spacing) if label is not None else None
    return vol, lab, params


def build_slice_set(
    subjects: Mapping[str, Tuple[Volume, LabelVolume]],
    target_shape=DEFAULT_SHAPE,
    target_spacing=DEFAULT_SPACING,
    orientations: Iterable[Orientation] = tuple(Orientation),
) -> list[SlicePair]:
    """Slice pairs from every subject in every requested view."""
    out: list[SlicePair] = []
    for sid, (image, label) in subjects.items():
        vol, lab, _ = prepare_subject(image, label, target_shape, target_spacing)
        for r in orientations:
            out.extend(extract_slices(vol, lab, r, subject_id=str(sid)))
    return out


def _stack(pairs: Sequence[SlicePair], idx, n_labels: int) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([pairs[i].image for i in idx]).astype(np.float32))[:, None]
    y = one_hot(np.stack([pairs[i].label for i in idx]), n_labels)
    return x, y


# -- drivers -----------------------------------------------------------------

@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Force deterministic torch kernels inside the block."""
    if not enabled:
        yield
        return
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def validation_loss(net: UNet, pairs: Sequence[SlicePair], batch_size: int = 16, device="cpu") -> float:
    """Mean per-slice loss over ``pairs`` with the network in eval mode."""
    was_training = net.training
    net.eval()
    losses = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            x, y = _stack(pairs, range(start, min(start + batch_size, len(pairs))), net.config.n_labels)
            losses.append(per_sample_dice_loss(y.to(device), net(x.to(device))).double().cpu())
    net.train(was_training)
    return float(torch.cat(losses).mean())


def _check_view(pairs: Sequence[SlicePair], r: Orientation, what: str) -> None:
    if not pairs:
        raise ValueError(f"{what} set for {r.value} is empty")
    bad = {p.orientation for p in pairs if p.orientation != r}
    if bad:
        raise ValueError(f"{what} set for {r.value} contains slices from {sorted(b.value for b in bad)}")
    if any(p.label is None for p in pairs):
        raise ValueError(f"{what} set for {r.value} contains unlabeled slices")


def train_network(
    train_set: Sequence[SlicePair],
    val_set: Sequence[SlicePair],
    config: NetworkConfig,
    hyper: TrainingHyperparams,
    r: Orientation,
    checkpoint_path=None,
    log_path=None,
    norm_params: Optional[NormParams] = None,
    device="cpu",
) -> Tuple[str, TrainState]:
    """Train one view's U-Net with Adam and keep the lowest-validation-loss weights.

    The checkpoint at ``checkpoint_path`` is rewritten whenever validation
    loss reaches a new minimum, so on return it holds the selected epoch.
    A per-epoch log (epoch, lr, train loss, val loss) is written as TSV when
    ``log_path`` is given.

    Raises:
        TrainingError: a batch loss became non-finite.
    """
    r = Orientation(r)
    _check_view(train_set, r, "training")
    _check_view(val_set, r, "validation")
    config.check_input_size(*train_set[0].image.shape)
    if checkpoint_path is None:
        checkpoint_path = os.path.join(tempfile.mkdtemp(prefix="mvstrip-"), f"{r.value}.pt")
    checkpoint_path = os.fspath(checkpoint_path)

    torch.manual_seed(hyper.seed)
    net = build(config, seed=hyper.seed, orientation=r).to(device)
    opt = torch.optim.Adam(net.parameters(), lr=hyper.initial_lr)
    rng = np.random.default_rng(hyper.seed)
    state = TrainState(lr=hyper.initial_lr, checkpoint=checkpoint_path)

    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file, delimiter="\t") if log_file else None
    if writer:
        writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
    try:
        for epoch in range(1, hyper.epochs + 1):
            net.train()
            total, count = 0.0, 0
            for idx in sample_epoch(train_set, hyper.slices_per_epoch, rng, hyper.batch_size):
                x, y = _stack(train_set, idx, config.n_labels)
                loss = soft_dice_loss(y.to(device), net(x.to(device)))
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"{r.value}: non-finite loss at epoch {epoch} (lr={state.lr:g}); training aborted"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)

            used_lr = state.lr
            state.epoch = epoch
            state.lrs.append(used_lr)
            state.train_losses.append(total / count)
            state.val_losses.append(validation_loss(net, val_set, hyper.batch_size, device))
            if state.val_losses[-1] < state.best_val_loss:
                state.best_epoch = epoch
                save_checkpoint(net, norm_params, checkpoint_path)
            for group in opt.param_groups:
                group["lr"] = update_lr(state, hyper)
            if writer:
                writer.writerow([epoch, repr(used_lr), repr(state.train_losses[-1]), repr(state.val_losses[-1])])
                log_file.flush()
            log.info("%s epoch %d lr %.3g train %.5f val %.5f", r.value, epoch, used_lr,
                     state.train_losses[-1], state.val_losses[-1])
    finally:
        if log_file:
            log_file.close()
    return checkpoint_path, state


def train_all(
    train_set: Sequence[SlicePair],
    val_set: Sequence[SlicePair],
    config: NetworkConfig,
    hyper: TrainingHyperparams,
    out_dir=None,
    target_shape=None,
    target_spacing=DEFAULT_SPACING,
    weights: Optional[FusionWeights] = None,
    norm_params: Optional[NormParams] = None,
    device="cpu",
) -> ModelBundle:
    """Train the three views independently and collect them in a bundle.

    Each view gets its own seed spawned from ``hyper.seed``. When
    ``target_shape`` is omitted the grid is taken to be a cube whose edge
    equals the slice size. The bundle is written to ``out_dir``; the
    per-view :class:`TrainState` objects are attached as ``bundle.history``.
    """
    by_view = {r: ([p for p in train_set if p.orientation == r], [p for p in val_set if p.orientation == r])
               for r in Orientation}
    for r, (tr, va) in by_view.items():
        if not tr or not va:
            raise ValueError(f"no {r.value} slices in the {'training' if not tr else 'validation'} set")
    if target_shape is None:
        h, w = train_set[0].image.shape
        if h != w:
            raise ValueError("target_shape is required for non-square slices")
        target_shape = (h, h, h)
    out_dir = os.fspath(out_dir) if out_dir is not None else tempfile.mkdtemp(prefix="mvstrip-bundle-")
    os.makedirs(out_dir, exist_ok=True)
    norm_params = (norm_params or NormParams()).convention

    seeds = np.random.SeedSequence(hyper.seed).generate_state(len(Orientation))
    networks, states, paths = {}, {}, {}
    for r, seed in zip(Orientation, seeds):
        path, state = train_network(
            *by_view[r], config, dataclasses.replace(hyper, seed=int(seed)), r,
            checkpoint_path=os.path.join(out_dir, f"{r.value}.pt"),
            log_path=os.path.join(out_dir, f"{r.value}_log.tsv"),
            norm_params=norm_params,
            device=device,
        )
        networks[r], _ = load_checkpoint(path, orientation=r)
        states[r], paths[r] = state, path

    bundle = ModelBundle(
        networks=networks,
        weights=weights or FusionWeights(),
        target_shape=tuple(target_shape),
        target_spacing=tuple(target_spacing),
        norm=norm_params,
        history=states,
    )
    bundle.save(out_dir)
    return bundle
