"""Distance representation of multi-label maps and label-interface surfaces."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .volumes import ImageVolume, LabelMap, SamplingGrid, load_volume, nifti_stem, save_volume

__all__ = ["DistanceMap", "distance_map", "junction_surface", "save_distance_map", "load_distance_map"]


@dataclass(frozen=True, eq=False)
class DistanceMap:
    data: np.ndarray
    grid: SamplingGrid
    gamma: float
    source_label_set: tuple[int, ...]

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)


def _inside_distance(mask: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Face distance (mm) from voxels in ``mask`` to the region boundary.

    The grid exterior counts as outside.  For each voxel the vector to the
    nearest outside voxel centre is shortened by the half-voxel extent along
    that direction.
    """
    padded = np.pad(mask, 1, constant_values=False)
    dist, inds = ndimage.distance_transform_edt(padded, sampling=spacing, return_indices=True)
    core = (slice(1, -1),) * 3
    dist = dist[core]
    here = np.indices(mask.shape) + 1
    vec = (inds[(slice(None),) + core] - here) * spacing[:, None, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.abs(vec) / np.where(dist > 0, dist, 1.0)
        half = np.min(np.where(unit > 0, 0.5 * spacing[:, None, None, None] / unit, np.inf), axis=0)
    half = np.where(np.isfinite(half), half, 0.0)
    return np.where(mask, dist - half, 0.0)


def distance_map(labels: LabelMap, gamma: float = 1.0) -> DistanceMap:
    """``D(x) = dist(x, boundary of label(x)) + gamma * label(x)``.

    Only the label containing ``x`` contributes its positive inside distance;
    labels that do not contain ``x`` are excluded from the minimum.
    """
    # gamma = 0 is accepted: it gives the plain inside distance
    if gamma < 0 or not np.isfinite(gamma):
        raise ValueError(f"gamma must be non-negative and finite, got {gamma}")
    spacing = np.asarray(labels.grid.spacing, dtype=np.float64)
    arr = labels.data
    out = np.zeros(arr.shape, dtype=np.float64)
    ids = [int(v) for v in np.unique(arr)]
    for c in ids:
        m = arr == c
        # the ring just outside the bounding box is never farther than any other outside voxel
        box = ndimage.find_objects(m.astype(np.int8))[0]
        sub = m[box]
        out[box][sub] = _inside_distance(sub, spacing)[sub]
    out += gamma * arr
    return DistanceMap(out, labels.grid, float(gamma), tuple(ids))


_SHIFTS = [(a, s) for a in range(3) for s in (-1, 1)]


def _neighbour_any(mask: np.ndarray) -> np.ndarray:
    """True where some 6-neighbour lies in ``mask`` (no wrap-around)."""
    out = np.zeros_like(mask)
    for axis, s in _SHIFTS:
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        if s > 0:
            src[axis], dst[axis] = slice(1, None), slice(None, -1)
        else:
            src[axis], dst[axis] = slice(None, -1), slice(1, None)
        out[tuple(dst)] |= mask[tuple(src)]
    return out


def junction_surface(labels: LabelMap, label_a: Iterable[int], label_b: Iterable[int]) -> np.ndarray:
    """Voxels of ``label_a`` that touch ``label_b`` through a face."""
    a, b = set(int(x) for x in label_a), set(int(x) for x in label_b)
    if not a or not b:
        raise ValueError("label sets must be non-empty")
    if a & b:
        raise ValueError(f"label sets overlap: {sorted(a & b)}")
    in_a = np.isin(labels.data, list(a))
    in_b = np.isin(labels.data, list(b))
    return in_a & _neighbour_any(in_b)


def save_distance_map(dm: DistanceMap, path: str | Path) -> Path:
    """NIfTI plus a ``.dist.json`` sidecar with gamma and the label set."""
    path = Path(path)
    save_volume(ImageVolume(dm.data, dm.grid), path)
    meta = {"gamma": dm.gamma, "labels": list(dm.source_label_set)}
    _sidecar(path).write_text(json.dumps(meta))
    return path


def load_distance_map(path: str | Path) -> DistanceMap:
    path = Path(path)
    vol = load_volume(path, "intensity")
    meta = json.loads(_sidecar(path).read_text())
    return DistanceMap(vol.data, vol.grid, float(meta["gamma"]), tuple(meta["labels"]))


def _sidecar(path: Path) -> Path:
    return path.with_name(nifti_stem(path) + ".dist.json")
