"""Overlap, surface-distance and deformation-plausibility metrics."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .distmaps import _neighbour_any
from .field import DisplacementField, fraction_of_foldings, jacobian_determinant
from .volumes import AffineTransform, LabelMap, compose_chain, sample

__all__ = [
    "CaseMetrics",
    "EmptyMaskWarning",
    "dsc",
    "hd",
    "assd",
    "surface",
    "tumour_volume_factor",
    "jacobian_ratio",
    "warp_labels_to_atlas",
    "case_metrics",
    "mean_dsc",
    "write_cohort_table",
]


class EmptyMaskWarning(UserWarning):
    """Both masks were empty; DSC reported as 1.0."""


def _mask_and_spacing(m, spacing):
    if isinstance(m, LabelMap):
        return np.asarray(m.data) > 0, np.asarray(m.grid.spacing, dtype=np.float64)
    return np.asarray(m, dtype=bool), np.asarray(spacing, dtype=np.float64)


def dsc(a, b) -> float:
    a, _ = _mask_and_spacing(a, (1, 1, 1))
    b, _ = _mask_and_spacing(b, (1, 1, 1))
    if a.shape != b.shape:
        raise ValueError("masks live on different grids")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        warnings.warn("both masks empty; DSC set to 1.0", EmptyMaskWarning, stacklevel=2)
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a face neighbour outside the mask (grid exterior counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    outside = ~np.pad(mask, 1, constant_values=False)
    return mask & _neighbour_any(outside)[1:-1, 1:-1, 1:-1]


def _directed(sa: np.ndarray, sb: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Distance from each surface voxel of ``sa`` to the nearest surface voxel centre of ``sb``."""
    d = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return d[sa]


def _surface_distances(a, b, spacing):
    a, spacing = _mask_and_spacing(a, spacing)
    b, _ = _mask_and_spacing(b, spacing)
    if a.shape != b.shape:
        raise ValueError("masks live on different grids")
    if not a.any() or not b.any():
        raise ValueError("surface distances need two non-empty masks")
    sa, sb = surface(a), surface(b)
    return _directed(sa, sb, spacing), _directed(sb, sa, spacing)


def hd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance (mm) between mask surfaces."""
    dab, dba = _surface_distances(a, b, spacing)
    return float(max(dab.max(), dba.max()))


def assd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance (mm)."""
    dab, dba = _surface_distances(a, b, spacing)
    return float((dab.sum() + dba.sum()) / (dab.size + dba.size))


def warp_labels_to_atlas(labels: LabelMap, T: DisplacementField, affine: AffineTransform | None = None) -> np.ndarray:
    parts = ([affine.inverse()] if affine is not None else []) + [T]
    return sample(labels, T.grid, compose_chain(parts))


def tumour_volume_factor(tumour: LabelMap, T: DisplacementField, affine: AffineTransform | None = None) -> float:
    """Tumour volume in atlas space after warping, over its native volume."""
    n0 = int((np.asarray(tumour.data) > 0).sum())
    if n0 == 0:
        raise ValueError("empty tumour mask")
    warped = warp_labels_to_atlas(tumour, T, affine) > 0
    return float(warped.sum() * T.grid.voxel_volume / (n0 * tumour.grid.voxel_volume))


def jacobian_ratio(
    tumour: LabelMap,
    T_inv: DisplacementField,
    ring_mm: float = 10.0,
    brain_mask: np.ndarray | None = None,
    affine: AffineTransform | None = None,
) -> float:
    """Mean Jacobian determinant of the subject-to-atlas field inside the tumour
    over its mean in the surrounding ``ring_mm`` shell.

    The tumour is brought into the atlas frame by the affine only, which is
    where ``T_inv`` is defined.  ``brain_mask`` (same grid) clips the ring.
    """
    g = T_inv.grid
    chain = compose_chain([affine.inverse()]) if affine is not None else None
    if chain is None and tumour.grid == g:
        t = np.asarray(tumour.data) > 0
    else:
        t = sample(tumour, g, chain) > 0
    if not t.any():
        raise ValueError("empty tumour mask")
    dist = ndimage.distance_transform_edt(~t, sampling=g.spacing)
    ring = (dist <= ring_mm) & ~t
    if brain_mask is not None:
        ring &= np.asarray(brain_mask, dtype=bool)
    if not ring.any():
        raise ValueError("empty peritumoral ring")
    with torch.no_grad():
        j = jacobian_determinant(T_inv).numpy()
    return float(j[t].mean() / j[ring].mean())


@dataclass
class CaseMetrics:
    case_id: str
    dsc_per_label: dict[int, float]
    hd_per_label: dict[int, float]
    assd_per_label: dict[int, float]
    fof: float
    tumour_volume_factor: float | None = None
    jacobian_ratio: float | None = None
    stage: str = ""
    flags: list[str] = field(default_factory=list)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(list(self.dsc_per_label.values())))

    @property
    def mean_hd(self) -> float:
        vals = [v for v in self.hd_per_label.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_assd(self) -> float:
        vals = [v for v in self.assd_per_label.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self, **extra) -> str:
        rec = asdict(self)
        rec.update(mean_dsc=self.mean_dsc, mean_hd=self.mean_hd, mean_assd=self.mean_assd)
        rec.update(extra)
        return json.dumps(rec, sort_keys=True)


def mean_dsc(warped: np.ndarray, atlas: LabelMap, labels: Iterable[int] | None = None) -> float:
    ids = [l for l in (labels or atlas.labels) if l != 0]
    a = np.asarray(atlas.data)
    return float(np.mean([dsc(warped == l, a == l) for l in ids]))


def case_metrics(
    case_id: str,
    atlas: LabelMap,
    subject: LabelMap,
    T: DisplacementField,
    T_inv: DisplacementField | None = None,
    affine: AffineTransform | None = None,
    tumour: LabelMap | None = None,
    stage: str = "",
    ring_mm: float = 10.0,
) -> CaseMetrics:
    """All per-case metrics, evaluated in atlas space over the atlas foreground labels."""
    warped = warp_labels_to_atlas(subject, T, affine)
    a = np.asarray(atlas.data)
    sp = atlas.grid.spacing
    d, h, s, flags = {}, {}, {}, []
    for l in atlas.labels:
        if l == 0:
            continue
        ma, mb = warped == l, a == l
        d[l] = dsc(ma, mb)
        if ma.any() and mb.any():
            h[l], s[l] = hd(ma, mb, sp), assd(ma, mb, sp)
        else:
            h[l] = s[l] = float("nan")
            flags.append(f"label {l} missing after warping")
    tvf = jr = None
    if tumour is not None and np.asarray(tumour.data).any():
        tvf = tumour_volume_factor(tumour, T, affine)
        if T_inv is not None:
            pre = compose_chain([affine.inverse()]) if affine is not None else None
            brain = (sample(subject, T_inv.grid, pre) > 0) | (sample(tumour, T_inv.grid, pre) > 0)
            try:
                jr = jacobian_ratio(tumour, T_inv, ring_mm, brain, affine)
            except ValueError as exc:
                flags.append(str(exc))
    return CaseMetrics(case_id, d, h, s, fraction_of_foldings(T), tvf, jr, stage, flags)


TABLE_COLUMNS = ("model", "n", "dsc", "hd_mm", "assd_mm", "tumour_volume_factor", "jacobian_ratio", "fof")


def _pm(vals: Sequence[float | None]) -> str:
    v = np.asarray([x for x in vals if x is not None and np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return "--"
    return f"{v.mean():.2f}±{v.std(ddof=1) if v.size > 1 else 0.0:.2f}"


def write_cohort_table(groups: dict[str, list[CaseMetrics]], path: str | Path, header: str = "") -> Path:
    """Delimited table with one mean±sd row per model, mirroring the published layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for name, ms in groups.items():
            w.writerow(
                [
                    name,
                    len(ms),
                    _pm([m.mean_dsc for m in ms]),
                    _pm([m.mean_hd for m in ms]),
                    _pm([m.mean_assd for m in ms]),
                    _pm([m.tumour_volume_factor for m in ms]),
                    _pm([m.jacobian_ratio for m in ms]),
                    _pm([m.fof for m in ms]),
                ]
            )
    return path
