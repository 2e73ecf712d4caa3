"""Cohort-level general training and per-case one-shot over-fitting."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .distmaps import DistanceMap, distance_map
from .field import DisplacementField, VelocityField, integrate_svf, upsample_velocity
from .losses import CaseTransform, LossReport, LossWeights, general_loss, overfit_loss
from .metrics import mean_dsc, warp_labels_to_atlas
from .network import VelocityNet, network_inputs, prediction_grid, predict_velocity, save_model
from .volumes import AffineTransform, ImageVolume, LabelMap

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Case",
    "Atlas",
    "PreparedCase",
    "TrainResult",
    "OverfitResult",
    "prepare_case",
    "register",
    "train_general",
    "overfit_case",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs_general: int = 350
    epochs_overfit: int = 1500
    batch_size: int = 2
    learning_rate: float = 1e-3
    overfit_learning_rate: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    steps: int | str = "auto"
    net: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs_general < 0 or self.epochs_overfit < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.overfit_learning_rate <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["weights"] = vars(self.weights).copy()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Case:
    case_id: str
    image: ImageVolume
    labels: LabelMap
    affine: AffineTransform = field(default_factory=AffineTransform.identity)
    tumour: LabelMap | None = None


@dataclass(frozen=True, eq=False)
class Atlas:
    image: ImageVolume
    labels: LabelMap

    @property
    def grid(self):
        return self.labels.grid


@dataclass(eq=False)
class PreparedCase:
    case: Case
    inputs: torch.Tensor
    dist: DistanceMap


class TrainResult(NamedTuple):
    net: VelocityNet
    history: list[LossReport]
    diverged: bool


class OverfitResult(NamedTuple):
    net: VelocityNet
    T: DisplacementField
    T_inv: DisplacementField
    history: list[LossReport]
    dsc_before: float
    dsc_after: float
    diverged: bool


def prepare_case(case: Case, atlas: Atlas, gamma: float, factor: int = 2) -> PreparedCase:
    grid = prediction_grid(atlas.grid, factor)
    return PreparedCase(case, network_inputs(case.image, atlas.image, grid, case.affine), distance_map(case.labels, gamma))


def register(
    net: VelocityNet, prepared: PreparedCase, atlas_grid, steps: int | str = "auto", factor: int = 2
) -> tuple[VelocityField, DisplacementField, DisplacementField]:
    """Predict the velocity for one case and integrate it on the atlas grid."""
    pgrid = prediction_grid(atlas_grid, factor)
    v = predict_velocity(net, prepared.inputs, grid=pgrid)
    v_full = upsample_velocity(v, atlas_grid)
    T, T_inv = integrate_svf(v_full, steps)
    return v_full, T, T_inv


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _mean_report(reports: Sequence[LossReport], mode: str) -> LossReport:
    f = lambda k: float(np.mean([getattr(r, k) for r in reports]))  # noqa: E731
    return LossReport(f("total"), f("sim"), f("reg"), f("pairwise_sim"), f("vol"), mode)


def _log_epoch(fh, epoch: int, rep: LossReport, **extra) -> None:
    if fh is not None:
        fh.write(rep.to_json(epoch=epoch, **extra) + "\n")
        fh.flush()


def train_general(
    cases: Sequence[Case],
    atlas: Atlas,
    cfg: TrainConfig = TrainConfig(),
    log_path: str | Path | None = None,
    checkpoint: str | Path | None = None,
    prepared: Sequence[PreparedCase] | None = None,
) -> TrainResult:
    """Optimise a fresh network on the forward-model objective over the cohort.

    Mini-batches are drawn from a seeded permutation each epoch; the pairwise
    term only compares cases within a batch.
    """
    if len(cases) < 2:
        raise ValueError("general training needs at least two cases")
    _seed_all(cfg.seed)
    factor = int(cfg.net.get("grid_factor", 2))
    w = cfg.weights
    net = VelocityNet(cfg.net)
    net.train()
    prepared = list(prepared) if prepared is not None else [prepare_case(c, atlas, w.gamma, factor) for c in cases]
    atlas_dist = distance_map(atlas.labels, w.gamma)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    history: list[LossReport] = []
    last_good = copy.deepcopy(net.state_dict())
    diverged = False
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs_general):
            order = rng.permutation(len(prepared))
            reports = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [prepared[i] for i in order[start : start + cfg.batch_size]]
                opt.zero_grad()
                items = []
                for p in batch:
                    _, T, T_inv = register(net, p, atlas.grid, cfg.steps, factor)
                    items.append(CaseTransform(p.dist, T, T_inv, p.case.affine))
                rep = general_loss(items, atlas_dist, w)
                if not math.isfinite(rep.total):
                    diverged = True
                    break
                rep.loss.backward()
                opt.step()
                reports.append(rep)
            if diverged:
                log.warning("non-finite loss at epoch %d; rolling back to the last finite state", epoch)
                net.load_state_dict(last_good)
                break
            last_good = copy.deepcopy(net.state_dict())
            ep = _mean_report(reports, "general")
            history.append(ep)
            _log_epoch(fh, epoch, ep)
            log.debug("epoch %d total %.6f", epoch, ep.total)
    finally:
        if fh is not None:
            fh.close()
    net.eval()
    if checkpoint is not None:
        save_model(net, checkpoint, stage="general", train_config=cfg.to_dict())
    return TrainResult(net, history, diverged)


def _case_dsc(case: Case, atlas: Atlas, T: DisplacementField) -> float:
    return mean_dsc(warp_labels_to_atlas(case.labels, T, case.affine), atlas.labels)


def overfit_case(
    base: VelocityNet,
    case: Case | PreparedCase,
    atlas: Atlas,
    cfg: TrainConfig = TrainConfig(),
    log_path: str | Path | None = None,
) -> OverfitResult:
    """One-shot optimisation of a copy of ``base`` on a single case (backward model).

    ``base`` itself is never modified.  If the loss turns non-finite the
    best transform seen so far is returned with ``diverged`` set.
    """
    _seed_all(cfg.seed)
    factor = int(base.config.get("grid_factor", 2))
    w = cfg.weights
    p = case if isinstance(case, PreparedCase) else prepare_case(case, atlas, w.gamma, factor)
    net = copy.deepcopy(base)
    net.train()
    atlas_dist = distance_map(atlas.labels, w.gamma)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.overfit_learning_rate)

    with torch.no_grad():
        _, T0, T0_inv = register(net, p, atlas.grid, cfg.steps, factor)
    dsc_before = _case_dsc(p.case, atlas, T0)
    best = (math.inf, T0, T0_inv)
    history: list[LossReport] = []
    diverged = False
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs_overfit):
            opt.zero_grad()
            _, T, T_inv = register(net, p, atlas.grid, cfg.steps, factor)
            rep = overfit_loss(CaseTransform(p.dist, T, T_inv, p.case.affine), atlas_dist, w, atlas_labels=atlas.labels)
            if not math.isfinite(rep.total):
                diverged = True
                log.warning("case %s: non-finite loss at epoch %d", p.case.case_id, epoch)
                break
            if rep.total < best[0]:
                best = (rep.total, T.detach(), T_inv.detach())
            rep.loss.backward()
            opt.step()
            history.append(rep)
            _log_epoch(fh, epoch, rep, case_id=p.case.case_id)
    finally:
        if fh is not None:
            fh.close()
    net.eval()
    if diverged:
        T_out, T_inv_out = best[1], best[2]
    else:
        with torch.no_grad():
            _, T_out, T_inv_out = register(net, p, atlas.grid, cfg.steps, factor)
    return OverfitResult(net, T_out, T_inv_out, history, dsc_before, _case_dsc(p.case, atlas, T_out), diverged)
