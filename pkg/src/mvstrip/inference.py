"""Per-view prediction, probability fusion, binarization and cleanup."""
from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy import ndimage

from .errors import CheckpointError, EmptyMaskWarning
from .model import UNet, forward, load_checkpoint, save_checkpoint
from .volume import (
    LabelVolume,
    NormParams,
    Orientation,
    Volume,
    _frozen,
    conform,
    normalize_intensity,
    reorient,
)

BUNDLE_FORMAT = "mvstrip-bundle"
BUNDLE_VERSION = 1
MANIFEST = "bundle.json"


@dataclass(frozen=True, eq=False)
class ProbabilityVolume(Volume):
    """Per-voxel class probabilities, ``data`` of shape ``(X, Y, Z, n_labels)``.

    float64 input stays float64; anything else is stored as float32.
    """

    _spatial_ndim = 4

    def _coerce(self, data) -> np.ndarray:
        arr = np.asarray(data)
        return _frozen(arr, np.float64 if arr.dtype == np.float64 else np.float32)

    @property
    def n_labels(self) -> int:
        return int(self.data.shape[-1])

    def channel(self, k: int = 1) -> Volume:
        return Volume(self.data[..., k], self.spacing, self.axis_codes, self.origin)

    def is_simplex(self, atol: float = 1e-4) -> bool:
        d = self.data
        return bool((d >= -atol).all() and (d <= 1 + atol).all() and np.allclose(d.sum(-1), 1.0, atol=atol))


@dataclass(frozen=True)
class FusionWeights:
    axial: float = 0.44
    coronal: float = 0.33
    sagittal: float = 0.23

    def __post_init__(self):
        values = self.as_tuple()
        if any(not np.isfinite(w) or w < 0 for w in values):
            raise ValueError(f"fusion weights must be nonnegative, got {values}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got {sum(values)!r}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.axial, self.coronal, self.sagittal)

    def __getitem__(self, r: Orientation) -> float:
        return getattr(self, Orientation(r).value)


@dataclass
class ModelBundle:
    """The three view networks plus everything needed to apply them."""

    networks: Dict[Orientation, UNet]
    weights: FusionWeights = field(default_factory=FusionWeights)
    target_shape: Tuple[int, int, int] = (256, 256, 256)
    target_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    norm: NormParams = field(default_factory=NormParams)
    history: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.networks = {Orientation(k): v for k, v in self.networks.items()}
        if set(self.networks) != set(Orientation):
            missing = sorted(r.value for r in set(Orientation) - set(self.networks))
            raise ValueError(f"bundle needs one network per view; missing {missing}")
        for r, net in self.networks.items():
            if net.orientation is not None and net.orientation != r:
                raise ValueError(f"network stored under {r.value} was trained for {net.orientation.value}")
        if len({net.config.n_labels for net in self.networks.values()}) != 1:
            raise ValueError("bundle networks disagree on n_labels")

    def save(self, directory) -> str:
        directory = os.fspath(directory)
        os.makedirs(directory, exist_ok=True)
        checkpoints = {}
        for r, net in self.networks.items():
            name = f"{r.value}.pt"
            save_checkpoint(net, self.norm, os.path.join(directory, name))
            checkpoints[r.value] = name
        manifest = {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "checkpoints": checkpoints,
            "fusion_weights": dataclasses.asdict(self.weights),
            "target_shape": list(self.target_shape),
            "target_spacing": list(self.target_spacing),
            "normalization": dataclasses.asdict(self.norm),
        }
        path = os.path.join(directory, MANIFEST)
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        return path

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        directory = os.fspath(directory)
        path = os.path.join(directory, MANIFEST)
        try:
            with open(path) as fh:
                manifest = json.load(fh)
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"{path}: cannot read bundle manifest ({exc})") from exc
        if manifest.get("format") != BUNDLE_FORMAT or manifest.get("version") != BUNDLE_VERSION:
            raise CheckpointError(f"{path}: not a supported bundle manifest")
        networks = {}
        for r in Orientation:
            name = manifest["checkpoints"].get(r.value)
            if name is None:
                raise CheckpointError(f"{path}: no {r.value} checkpoint listed")
            networks[r], _ = load_checkpoint(os.path.join(directory, name), orientation=r)
        return cls(
            networks=networks,
            weights=FusionWeights(**manifest["fusion_weights"]),
            target_shape=tuple(manifest["target_shape"]),
            target_spacing=tuple(manifest["target_spacing"]),
            norm=NormParams(**manifest["normalization"]),
        )


def predict_view(net: UNet, vol: Volume, r: Orientation, batch_size: int = 16, device="cpu") -> ProbabilityVolume:
    """Slice ``vol`` in view ``r``, run ``net`` on every slice, restack.

    The result is laid out in view ``r``.
    """
    r = Orientation(r)
    if net.orientation is not None and net.orientation != r:
        raise ValueError(f"network was trained on {net.orientation.value} slices, asked to predict {r.value}")
    view = reorient(vol, r)
    net.eval()
    out = np.concatenate(
        [forward(net, view.data[z:z + batch_size], device) for z in range(0, view.shape[0], batch_size)],
        axis=0,
    )
    return ProbabilityVolume(out, view.spacing, view.axis_codes, view.origin)


def fuse(
    p_ax: ProbabilityVolume,
    p_cor: ProbabilityVolume,
    p_sag: ProbabilityVolume,
    w: FusionWeights = FusionWeights(),
) -> ProbabilityVolume:
    """Voxelwise weighted sum of the three view predictions (all channels).

    Accumulates in float64 and returns the inputs' common dtype.
    """
    for name, p in (("coronal", p_cor), ("sagittal", p_sag)):
        if p.data.shape != p_ax.data.shape or not p.same_geometry(p_ax):
            raise ValueError(f"{name} probability volume does not share the axial volume's geometry")
    FusionWeights(*w.as_tuple())
    dtype = np.result_type(p_ax.data, p_cor.data, p_sag.data)
    acc = w.axial * p_ax.data.astype(np.float64)
    acc += w.coronal * p_cor.data.astype(np.float64)
    acc += w.sagittal * p_sag.data.astype(np.float64)
    return dataclasses.replace(p_ax, data=acc.astype(dtype))


def binarize(p: ProbabilityVolume) -> LabelVolume:
    """Argmax over classes; exact ties go to background."""
    labels = np.argmax(p.data, axis=-1) != 0
    return LabelVolume(labels, p.spacing, p.axis_codes, p.origin)


_STRUCTURES = {6: 1, 18: 2, 26: 3}


def largest_component(mask: LabelVolume, connectivity: int = 26) -> LabelVolume:
    """Keep only the largest foreground component.

    Equal-size components are resolved in favour of the one containing the
    smallest C-order linear index. An empty mask is returned unchanged with
    an :class:`EmptyMaskWarning`.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity!r}")
    structure = ndimage.generate_binary_structure(3, _STRUCTURES[connectivity])
    labels, n = ndimage.label(mask.data, structure=structure)
    if n == 0:
        warnings.warn("mask is empty; no connected component to keep", EmptyMaskWarning, stacklevel=2)
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    tied = np.flatnonzero(sizes == sizes.max()) + 1
    if len(tied) > 1:
        first = ndimage.minimum(np.arange(labels.size).reshape(labels.shape), labels, tied)
        keep = tied[int(np.argmin(first))]
    else:
        keep = tied[0]
    return dataclasses.replace(mask, data=labels == keep)


def skullstrip(
    bundle: ModelBundle,
    raw: Volume,
    native_grid: bool = True,
    connectivity: int = 26,
    batch_size: int = 16,
    device="cpu",
) -> Tuple[LabelVolume, ProbabilityVolume]:
    """Full prediction workflow for one head volume.

    The mask comes back in ``raw``'s axis layout, and on ``raw``'s grid when
    ``native_grid`` is set (nearest neighbour). The fused probabilities are
    returned on the conformed grid in the coronal view.
    """
    conformed = conform(raw, bundle.target_shape, bundle.target_spacing)
    normalized, _ = normalize_intensity(conformed, bundle.norm.low_pct, bundle.norm.high_pct)
    coronal = {
        r: reorient(predict_view(bundle.networks[r], normalized, r, batch_size, device), Orientation.CORONAL)
        for r in Orientation
    }
    fused = fuse(coronal[Orientation.AXIAL], coronal[Orientation.CORONAL], coronal[Orientation.SAGITTAL],
                 bundle.weights)
    mask = largest_component(binarize(fused), connectivity)
    mask = reorient(mask, raw.axis_codes)
    if native_grid:
        had_voxels = bool(mask.data.any())
        mask = conform(mask, raw.shape, raw.spacing)
        if had_voxels and not mask.data.any():
            warnings.warn("mask vanished when resampled to the native grid", EmptyMaskWarning, stacklevel=2)
    return mask, fused


def probability_to_native(fused: ProbabilityVolume, raw: Volume, label: int = 1) -> Volume:
    """One probability channel resampled onto ``raw``'s layout and grid."""
    return conform(reorient(fused.channel(label), raw.axis_codes), raw.shape, raw.spacing)


def qc_overlay(image: Volume, mask: LabelVolume, path) -> None:
    """Save mask contours over the central slice of each view as one PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 4.2))
    for ax, r in zip(axes, Orientation):
        img = reorient(image, r).data
        lab = reorient(mask, r).data
        z = img.shape[0] // 2
        ax.imshow(img[z], cmap="gray")
        if lab[z].any():
            ax.contour(lab[z], levels=[0.5], colors="r", linewidths=1)
        ax.set_title(f"{r.value} slice {z}")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
