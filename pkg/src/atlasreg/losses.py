"""Similarity, smoothness and volume-preservation terms and the two objectives.

All terms are torch functions of the displacement fields, so gradients reach
the velocity field (and through it the network) by autograd.

Label maps enter the similarity through their distance maps.  The fixed
operand's distance map is used directly; the moving operand's precomputed
distance map is pulled through the transform chain.  Exact recomputation of
the distance transform after warping is not differentiable and is left to
reporting code.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch

from .distmaps import DistanceMap, distance_map
from .field import DisplacementField, jacobian_determinant
from .volumes import AffineTransform, LabelMap, compose_chain, sample_tensor

log = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "LossReport",
    "CaseTransform",
    "DegenerateInputWarning",
    "sim_loss",
    "reg_loss",
    "vol_loss",
    "vol_loss_from_jacobian",
    "general_loss",
    "overfit_loss",
    "atlas_space_distance",
    "subject_space_atlas_distance",
]

JACOBIAN_FLOOR = 1e-6


class DegenerateInputWarning(UserWarning):
    """An input had zero variance; the similarity was reported as 0."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.098
    lambda2: float = 1e-7
    lambda3: float = 0.045
    lambda4: float = 0.098
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class LossReport:
    """Unweighted components; ``total`` is their weighted sum.

    ``loss`` holds the differentiable total and is dropped from serialisation.
    """

    total: float
    sim: float
    reg: float
    pairwise_sim: float
    vol: float
    mode: str
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def to_json(self, **extra) -> str:
        rec = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "loss"}
        rec.update(extra)
        return json.dumps(rec, sort_keys=True)


@dataclass(frozen=True, eq=False)
class CaseTransform:
    """One subject with its current transform pair.

    ``labels`` may be a label map or its precomputed distance map.  ``affine``
    maps subject world to atlas world; ``T`` and ``T_inv`` live on the atlas grid.
    """

    labels: LabelMap | DistanceMap
    T: DisplacementField
    T_inv: DisplacementField
    affine: AffineTransform | None = None
    tumour: LabelMap | None = None


def _dist(x: LabelMap | DistanceMap, gamma: float) -> DistanceMap:
    if isinstance(x, DistanceMap):
        return x
    return distance_map(x, gamma)


def _flat(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64).reshape(-1)
    return torch.tensor(np.asarray(x, dtype=np.float64)).reshape(-1)


def sim_loss(a, b) -> torch.Tensor:
    """Negative global normalised cross-correlation of two arrays."""
    a = _flat(a)
    b = _flat(b)
    if a.shape != b.shape:
        raise ValueError("sim_loss inputs must have the same number of voxels")
    da = a - a.mean()
    db = b - b.mean()
    sa = torch.sqrt((da * da).mean())
    sb = torch.sqrt((db * db).mean())
    if float(sa.detach()) == 0.0 or float(sb.detach()) == 0.0:
        warnings.warn("zero-variance input to sim_loss", DegenerateInputWarning, stacklevel=2)
        return (a * 0).sum()
    return -(da * db).mean() / (sa * sb)


def reg_loss(T: DisplacementField) -> torch.Tensor:
    """Sum of squared forward differences of ``u`` (per mm) over voxels, components and axes."""
    u = T.u
    total = u.new_zeros(())
    for k, s in enumerate(T.grid.spacing):
        if u.shape[k + 1] < 2:
            continue
        d = torch.diff(u, dim=k + 1) / s
        total = total + (d * d).sum()
    return total


def vol_loss_from_jacobian(labels, jac) -> torch.Tensor:
    """Volume-preservation penalty given per-voxel Jacobian determinants."""
    lab = torch.tensor(np.asarray(labels.data if isinstance(labels, LabelMap) else labels)).reshape(-1).long()
    if lab.numel() == 0:
        raise ValueError("empty label map")
    j = _flat(jac)
    if j.shape != lab.shape:
        raise ValueError("labels and Jacobian must have the same shape")
    j = torch.clamp(j, min=JACOBIAN_FLOOR)
    ids, inverse = torch.unique(lab, return_inverse=True)
    sums = torch.zeros(len(ids), dtype=j.dtype).index_add(0, inverse, j)
    counts = torch.zeros(len(ids), dtype=j.dtype).index_add(0, inverse, torch.ones_like(j))
    jbar = (sums / counts)[inverse]
    ratio = torch.maximum(j / jbar, jbar / j)
    return torch.sigmoid(5.0 * (ratio - 1.5)).mean()


def vol_loss(atlas_labels: LabelMap, T: DisplacementField) -> torch.Tensor:
    if atlas_labels.grid != T.grid:
        raise ValueError("atlas labels and transform must share a grid")
    return vol_loss_from_jacobian(atlas_labels, jacobian_determinant(T))


def atlas_space_distance(dist: DistanceMap, T: DisplacementField, affine: AffineTransform | None = None) -> torch.Tensor:
    """Subject distance map pulled onto the atlas grid through ``[affine^-1, T]``."""
    parts = [affine.inverse()] if affine is not None else []
    chain = compose_chain(parts + [T])
    src = torch.tensor(dist.data)
    return sample_tensor(src, dist.grid, T.grid, chain, fill=0.0)[0]


def subject_space_atlas_distance(
    atlas_dist: DistanceMap, T_inv: DisplacementField, subject_grid, affine: AffineTransform | None = None
) -> torch.Tensor:
    """Atlas distance map pulled onto a subject grid through ``[T_inv, affine]``."""
    parts = [T_inv] + ([affine] if affine is not None else [])
    chain = compose_chain(parts)
    src = torch.tensor(atlas_dist.data)
    return sample_tensor(src, atlas_dist.grid, subject_grid, chain, fill=0.0)[0]


def _report(mode, w: LossWeights, sim, reg, pair, vol) -> LossReport:
    total = w.lambda1 * sim + w.lambda2 * reg + w.lambda3 * pair + w.lambda4 * vol
    as_float = lambda t: float(t.detach()) if isinstance(t, torch.Tensor) else float(t)  # noqa: E731
    return LossReport(
        total=as_float(total),
        sim=as_float(sim),
        reg=as_float(reg),
        pairwise_sim=as_float(pair),
        vol=as_float(vol),
        mode=mode,
        loss=total if isinstance(total, torch.Tensor) else torch.tensor(total, dtype=torch.float64),
    )


def general_loss(
    cases: Sequence[CaseTransform], atlas: LabelMap | DistanceMap, w: LossWeights = LossWeights()
) -> LossReport:
    """Forward-model objective summed over a batch.

    Per case: similarity between the subject's labels and the atlas pulled
    into subject space, plus smoothness of ``T``.  Pairs of cases are also
    compared on the atlas grid after pulling both into atlas space.
    """
    if not cases:
        raise ValueError("general_loss needs at least one case")
    atlas_dist = _dist(atlas, w.gamma)
    sim = reg = pair = torch.zeros((), dtype=torch.float64)
    in_atlas = []
    for c in cases:
        d = _dist(c.labels, w.gamma)
        fixed = torch.tensor(d.data)
        moved = subject_space_atlas_distance(atlas_dist, c.T_inv, d.grid, c.affine)
        sim = sim + sim_loss(fixed, moved)
        reg = reg + reg_loss(c.T)
        if len(cases) > 1 and w.lambda3 > 0:
            in_atlas.append(atlas_space_distance(d, c.T, c.affine))
    if len(cases) == 1:
        log.info("batch of one case: pairwise similarity term is zero")
    for i in range(len(in_atlas)):
        for j in range(len(in_atlas)):
            if i != j:
                pair = pair + sim_loss(in_atlas[i], in_atlas[j])
    return _report("general", w, sim, reg, pair, 0.0)


def overfit_loss(
    case: CaseTransform, atlas: LabelMap | DistanceMap, w: LossWeights = LossWeights(), atlas_labels: LabelMap | None = None
) -> LossReport:
    """Backward-model objective for a single case, evaluated on the atlas grid.

    The volume term needs atlas labels; pass them as ``atlas_labels`` when
    ``atlas`` is a precomputed distance map.
    """
    atlas_dist = _dist(atlas, w.gamma)
    if atlas_labels is None:
        if not isinstance(atlas, LabelMap):
            raise ValueError("overfit_loss needs atlas labels for the volume term")
        atlas_labels = atlas
    d = _dist(case.labels, w.gamma)
    moved = atlas_space_distance(d, case.T, case.affine)
    sim = sim_loss(moved, torch.tensor(atlas_dist.data))
    reg = reg_loss(case.T)
    vol = vol_loss(atlas_labels, case.T) if w.lambda4 > 0 else torch.zeros((), dtype=torch.float64)
    return _report("overfit", w, sim, reg, 0.0, vol)
