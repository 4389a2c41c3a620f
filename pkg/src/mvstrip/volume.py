"""Volumes, NIfTI I/O, grid conformance, reorientation and slicing.

Every volume carries its voxel layout as a triple of axis codes, one letter
per array axis naming the anatomical direction in which that index grows
(``"R"``, ``"A"``, ``"S"`` and their opposites ``"L"``, ``"P"``, ``"I"``).
The canonical frame is ``("R", "A", "S")``. Each of the three views is a
signed permutation of that frame whose first array axis is the slicing axis,
so ``view.data[z]`` is slice ``z``:

=========  ===================  =====================================
view       axis codes           slice rows / columns
=========  ===================  =====================================
axial      ``("S", "P", "R")``  anterior to posterior / left to right
coronal    ``("A", "I", "R")``  superior to inferior / left to right
sagittal   ``("R", "I", "A")``  superior to inferior / posterior to anterior
=========  ===================  =====================================

Reorientation is a pure transpose/flip, so any round trip is bit-exact.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.orientations import apply_orientation, axcodes2ornt, ornt_transform
from scipy import ndimage

from .errors import DegenerateInputError, VolumeIOError

Triple = Tuple[float, float, float]
AxisCodes = Tuple[str, str, str]

CANONICAL_CODES: AxisCodes = ("R", "A", "S")
DEFAULT_SHAPE = (256, 256, 256)
DEFAULT_SPACING = (1.0, 1.0, 1.0)

# letter -> (canonical axis, direction)
_CODE_TABLE = {
    "R": (0, 1), "L": (0, -1),
    "A": (1, 1), "P": (1, -1),
    "S": (2, 1), "I": (2, -1),
}


class Orientation(str, Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis_codes(self) -> AxisCodes:
        return VIEW_CODES[self]


VIEW_CODES = {
    Orientation.AXIAL: ("S", "P", "R"),
    Orientation.CORONAL: ("A", "I", "R"),
    Orientation.SAGITTAL: ("R", "I", "A"),
}


def _validate_codes(codes) -> AxisCodes:
    codes = tuple(str(c).upper() for c in codes)
    if len(codes) != 3 or any(c not in _CODE_TABLE for c in codes):
        raise ValueError(f"axis codes must be three of RLAPSI, got {codes!r}")
    if len({_CODE_TABLE[c][0] for c in codes}) != 3:
        raise ValueError(f"axis codes {codes!r} are not a permutation")
    return codes  # type: ignore[return-value]


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    """Return a read-only array of ``dtype``; copies only caller-owned buffers."""
    out = np.asarray(arr)
    if out.dtype != dtype or out.flags.writeable:
        out = np.array(out, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image on a voxel grid.

    ``data`` is stored as read-only float32. ``origin`` is the world position
    (mm) of voxel ``(0, 0, 0)``; together with ``spacing`` and ``axis_codes``
    it defines the voxel-to-world affine.
    """

    data: np.ndarray
    spacing: Triple = DEFAULT_SPACING
    axis_codes: AxisCodes = CANONICAL_CODES
    origin: Triple = (0.0, 0.0, 0.0)

    _spatial_ndim = 3

    def __post_init__(self):
        data = self._coerce(self.data)
        if data.ndim != self._spatial_ndim or min(data.shape[:3]) < 1:
            raise ValueError(f"{type(self).__name__} needs a {self._spatial_ndim}D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing!r}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError(f"origin must have three entries, got {self.origin!r}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "axis_codes", _validate_codes(self.axis_codes))

    def _coerce(self, data) -> np.ndarray:
        return _frozen(data, np.float32)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])  # type: ignore[return-value]

    @property
    def orientation(self) -> Optional[Orientation]:
        """The view this grid is laid out in, or None for any other layout."""
        for view, codes in VIEW_CODES.items():
            if codes == self.axis_codes:
                return view
        return None

    @property
    def direction(self) -> np.ndarray:
        """3x3 signed permutation mapping array axes to canonical axes."""
        d = np.zeros((3, 3))
        for i, code in enumerate(self.axis_codes):
            axis, sign = _CODE_TABLE[code]
            d[axis, i] = sign
        return d

    @property
    def affine(self) -> np.ndarray:
        aff = np.eye(4)
        aff[:3, :3] = self.direction * np.asarray(self.spacing)
        aff[:3, 3] = self.origin
        return aff

    def same_geometry(self, other: "Volume") -> bool:
        return (
            self.shape == other.shape
            and self.axis_codes == other.axis_codes
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )


@dataclass(frozen=True, eq=False)
class LabelVolume(Volume):
    """Binary brain mask; data is uint8 with values exactly 0 or 1."""

    def _coerce(self, data) -> np.ndarray:
        arr = np.asarray(data)
        if arr.dtype != np.bool_ and not np.isin(arr, (0, 1)).all():
            raise ValueError("label volume values must be 0 or 1")
        return _frozen(arr, np.uint8)


@dataclass(frozen=True, eq=False)
class SlicePair:
    image: np.ndarray
    label: Optional[np.ndarray]
    orientation: Orientation
    index: int
    subject_id: str = ""

    def __post_init__(self):
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} slices differ in shape")


@dataclass(frozen=True)
class NormParams:
    """Intensities mapped to 0 and 1, plus the percentiles that produced them.

    With ``low``/``high`` left as None the object only records the
    convention; the percentiles are then measured on each volume.
    """

    low: Optional[float] = None
    high: Optional[float] = None
    low_pct: float = 1.0
    high_pct: float = 99.0

    @property
    def convention(self) -> "NormParams":
        return NormParams(None, None, self.low_pct, self.high_pct)


def _target_codes(target) -> AxisCodes:
    if isinstance(target, Orientation):
        return VIEW_CODES[target]
    if isinstance(target, str) and target in Orientation._value2member_map_:
        return VIEW_CODES[Orientation(target)]
    return _validate_codes(target)


def reorient(vol: Volume, target: Union[Orientation, Sequence[str]]) -> Volume:
    """Transpose/flip ``vol`` into ``target`` (a view or an explicit axis-code triple).

    No resampling happens. The result keeps the world geometry, so
    ``reorient(reorient(v, view), v.axis_codes)`` reproduces ``v`` exactly.
    Works for any volume subclass; extra trailing axes (channels) ride along.
    """
    dst = _target_codes(target)
    if dst == vol.axis_codes:
        return vol
    transform = ornt_transform(axcodes2ornt(vol.axis_codes), axcodes2ornt(dst))
    data = apply_orientation(vol.data, transform)

    spacing = [0.0, 0.0, 0.0]
    src_index_of_new_zero = np.zeros(3)
    for src_axis, (new_axis, flip) in enumerate(transform):
        spacing[int(new_axis)] = vol.spacing[src_axis]
        if flip < 0:
            src_index_of_new_zero[src_axis] = vol.shape[src_axis] - 1
    origin = vol.affine[:3, :3] @ src_index_of_new_zero + vol.affine[:3, 3]
    return dataclasses.replace(vol, data=data, spacing=tuple(spacing), axis_codes=dst, origin=tuple(origin))


def conform(
    vol: Volume,
    target_shape: Sequence[int] = DEFAULT_SHAPE,
    target_spacing: Sequence[float] = DEFAULT_SPACING,
) -> Volume:
    """Resample onto a center-aligned grid of ``target_shape`` at ``target_spacing``.

    Images use trilinear interpolation, label volumes nearest neighbour.
    Voxels outside the physical extent of the input are zero. The axis
    layout is unchanged.
    """
    target_shape = tuple(int(n) for n in target_shape)
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ValueError(f"target_shape must be three positive integers, got {target_shape!r}")
    if len(target_spacing) != 3 or min(target_spacing) <= 0:
        raise ValueError(f"target_spacing must be three positive numbers, got {target_spacing!r}")
    if vol.data.ndim != 3:
        raise ValueError("conform expects a 3D volume")
    if vol.shape == target_shape and np.array_equal(vol.spacing, target_spacing):
        return vol

    src_shape = np.asarray(vol.shape, dtype=float)
    dst_shape = np.asarray(target_shape, dtype=float)
    scale = np.asarray(target_spacing) / np.asarray(vol.spacing)
    offset = (src_shape - 1) / 2 - scale * (dst_shape - 1) / 2

    is_label = isinstance(vol, LabelVolume)
    order = 0 if is_label else 1
    out = ndimage.affine_transform(
        vol.data.astype(np.float64),
        np.diag(scale),
        offset=offset,
        output_shape=target_shape,
        order=order,
        mode="nearest",
        prefilter=False,
    )
    # zero everything whose source coordinate lies outside the input's voxel extent
    inside = np.ones(target_shape, dtype=bool)
    for axis in range(3):
        coords = scale[axis] * np.arange(target_shape[axis]) + offset[axis]
        ok = (coords >= -0.5) & (coords <= src_shape[axis] - 0.5)
        shape = [1, 1, 1]
        shape[axis] = -1
        inside &= ok.reshape(shape)
    out[~inside] = 0

    center = vol.affine[:3, :3] @ ((src_shape - 1) / 2) + vol.affine[:3, 3]
    new_linear = vol.direction * np.asarray(target_spacing)
    origin = center - new_linear @ ((dst_shape - 1) / 2)
    if is_label:
        out = np.rint(out)
    return dataclasses.replace(vol, data=out, spacing=target_spacing, origin=tuple(origin))


def apply_normalization(vol: Volume, params: NormParams) -> Volume:
    """Map ``params.low`` to 0 and ``params.high`` to 1, clamping to [0, 1]."""
    if params.low is None or params.high is None:
        return normalize_intensity(vol, params.low_pct, params.high_pct)[0]
    span = params.high - params.low
    scaled = (vol.data.astype(np.float64) - params.low) / span
    return dataclasses.replace(vol, data=np.clip(scaled, 0.0, 1.0))


def normalize_intensity(vol: Volume, low_pct: float = 1.0, high_pct: float = 99.0) -> Tuple[Volume, NormParams]:
    """Robust percentile rescale to [0, 1].

    If the two percentiles coincide on a non-constant volume (mostly-empty
    images) the minimum and maximum are used instead.

    Raises:
        DegenerateInputError: the volume is constant.
    """
    data = vol.data
    vmin, vmax = float(data.min()), float(data.max())
    if vmin == vmax:
        raise DegenerateInputError("cannot normalize a constant volume")
    low, high = (float(v) for v in np.percentile(data, [low_pct, high_pct]))
    if high <= low:
        low, high = vmin, vmax
    params = NormParams(low, high, low_pct, high_pct)
    return apply_normalization(vol, params), params


def extract_slices(
    vol: Volume,
    label: Optional[LabelVolume] = None,
    r: Orientation = Orientation.CORONAL,
    subject_id: str = "",
) -> list[SlicePair]:
    """One :class:`SlicePair` per index along the slicing axis of view ``r``."""
    if label is not None and not vol.same_geometry(label):
        raise ValueError(f"image and label geometry differ for subject {subject_id!r}")
    r = Orientation(r)
    img = reorient(vol, r).data
    lab = reorient(label, r).data if label is not None else None
    return [
        SlicePair(img[z], None if lab is None else lab[z], r, z, subject_id)
        for z in range(img.shape[0])
    ]


def _geometry_from_image(img, path) -> Tuple[Triple, AxisCodes, Triple]:
    affine = img.affine
    if affine is None or not np.all(np.isfinite(affine)):
        raise VolumeIOError(f"{path}: missing or invalid spatial geometry")
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    if len(zooms) != 3 or min(zooms) <= 0:
        raise VolumeIOError(f"{path}: invalid voxel sizes {zooms}")
    codes = nib.aff2axcodes(affine)
    if None in codes:
        raise VolumeIOError(f"{path}: affine has no usable orientation")
    return zooms, tuple(codes), tuple(float(o) for o in affine[:3, 3])  # type: ignore[return-value]


def _load(path, cls):
    path = os.fspath(path)
    try:
        img = nib.load(path)
        data = np.asanyarray(img.dataobj)
    except FileNotFoundError as exc:
        raise VolumeIOError(f"{path}: no such file") from exc
    except Exception as exc:  # nibabel raises several unrelated types
        raise VolumeIOError(f"{path}: unreadable NIfTI file ({exc})") from exc
    if data.ndim != 3:
        raise VolumeIOError(f"{path}: expected 3D volume, got {data.ndim}D data of shape {data.shape}")
    spacing, codes, origin = _geometry_from_image(img, path)
    try:
        return cls(data, spacing, codes, origin)
    except ValueError as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc


def load_volume(path) -> Volume:
    """Read a 3D NIfTI image as a float32 :class:`Volume`.

    Oblique affines are snapped to the closest signed permutation.
    """
    return _load(path, Volume)


def load_label(path) -> LabelVolume:
    """Read a binary mask; any value other than 0/1 is an error."""
    return _load(path, LabelVolume)


def save_volume(vol: Volume, path) -> None:
    """Write ``vol`` to NIfTI; masks as uint8, everything else as float32.

    Geometry is stored in the sform/qform, which NIfTI keeps in single
    precision.
    """
    path = os.fspath(path)
    dtype = np.uint8 if isinstance(vol, LabelVolume) else np.float32
    data = np.asarray(vol.data, dtype=dtype)
    img = nib.Nifti1Image(data, vol.affine)
    img.set_data_dtype(dtype)
    img.header.set_xyzt_units("mm")
    img.set_sform(vol.affine, code=1)
    img.set_qform(vol.affine, code=1)
    try:
        nib.save(img, path)
    except Exception as exc:
        raise VolumeIOError(f"{path}: cannot write NIfTI file ({exc})") from exc


def load_dataset(root, require_masks: bool = True, image_name: str = "image", mask_name: str = "mask") -> dict:
    """Read ``<root>/<subject>/{image,mask}.nii[.gz]`` into ``{subject: (Volume, LabelVolume | None)}``.

    Raises:
        VolumeIOError: ``root`` has no subjects, or a required mask is absent.
    """
    root = os.fspath(root)

    def find(d, stem):
        for ext in (".nii.gz", ".nii"):
            p = os.path.join(d, stem + ext)
            if os.path.exists(p):
                return p
        return None

    try:
        subjects = sorted(e for e in os.listdir(root) if os.path.isdir(os.path.join(root, e)))
    except OSError as exc:
        raise VolumeIOError(f"{root}: cannot list dataset directory ({exc})") from exc
    out = {}
    for sid in subjects:
        d = os.path.join(root, sid)
        img = find(d, image_name)
        if img is None:
            raise VolumeIOError(f"subject {sid}: missing {image_name}.nii[.gz] in {d}")
        msk = find(d, mask_name)
        if msk is None and require_masks:
            raise VolumeIOError(f"subject {sid}: missing {mask_name}.nii[.gz] in {d}")
        out[sid] = (load_volume(img), load_label(msk) if msk else None)
    if not out:
        raise VolumeIOError(f"{root}: no subject directories found")
    return out
