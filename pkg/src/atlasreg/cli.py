"""Command-line pipeline: phantom-gen, prealign, train-general, overfit, warp, metrics, cohort-analyze, report.

Every subcommand reads one YAML config.  Relative paths in it are resolved
against the config file's directory.  Outputs go under ``paths.output`` and
each file carries the config hash and package version: as a ``#`` comment
line in delimited text, in the NIfTI header description, or as JSON keys.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import click
import numpy as np
import torch
import yaml

from . import __version__
from . import cohort as co
from .field import DisplacementField, load_field, save_field
from .metrics import CaseMetrics, case_metrics, mean_dsc, write_cohort_table
from .network import load_model, save_model
from .phantom import PhantomSpec, make_atlas, make_subject
from .training import Atlas, Case, TrainConfig, overfit_case, prepare_case, register, train_general
from .volumes import (
    AffineTransform,
    ImageVolume,
    LabelMap,
    ManifestRow,
    SamplingGrid,
    compose_chain,
    load_volume,
    moment_affine_init,
    read_affine,
    read_manifest,
    sample,
    save_volume,
    uncommented,
    write_affine,
    write_manifest,
)

log = logging.getLogger("atlasreg")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "paths": {
        "output": "out",
        "atlas_image": None,
        "atlas_labels": None,
        "arterial_labels": None,
        "perfusion": None,
        "manifest": None,
    },
    "train": TrainConfig().to_dict(),
    "analysis": {
        "stage": "overfit",
        "alpha": 0.01,
        "min_expected": 5.0,
        "jitter_n": 100,
        "jitter_mean": 1.0,
        "jitter_sd": 0.5,
        "emd_random_sets": 100,
        "hist_bins": 20,
        "junction_a": [3, 42],
        "junction_b": [2, 41],
        "cortex": [3, 42],
        "arterial_groups": None,
    },
    "phantom": {
        "size": 48,
        "n_labels": 3,
        "n_cases": 6,
        "deform_amplitude": 4.0,
        "deform_smoothness": 8.0,
        "tumour_radius": 4.0,
    },
}

MAX_AFFINE_CONDITION = 1e8


class MissingInputError(FileNotFoundError):
    def __init__(self, path: Path, hint: str = ""):
        self.path = Path(path)
        super().__init__(f"missing input {self.path}" + (f" ({hint})" if hint else ""))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class PipelineConfig:
    data: dict
    root: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path: str | Path | None, seed: int | None = None) -> "PipelineConfig":
        raw: dict = {}
        root = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise MissingInputError(path, "config file")
            raw = yaml.safe_load(path.read_text()) or {}
            root = path.resolve().parent
        unknown = set(raw) - set(DEFAULT_CONFIG)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        data = _merge(DEFAULT_CONFIG, raw)
        if seed is not None:
            data["seed"] = int(seed)
        data["train"]["seed"] = data["seed"]
        TrainConfig.from_dict(data["train"])  # validate early
        return cls(data, root)

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True, default=str).encode()).hexdigest()[:16]

    @property
    def provenance(self) -> str:
        return f"atlasreg {__version__} config {self.hash}"

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.hash, "version": __version__}

    def path(self, key: str) -> Path | None:
        p = self.data["paths"].get(key)
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    @property
    def out(self) -> Path:
        return self.path("output")

    def input_path(self, key: str, default: Path | None = None) -> Path:
        p = self.path(key) or default
        if p is None:
            raise ValueError(f"paths.{key} is not set in the config")
        if not p.exists():
            raise MissingInputError(p, f"paths.{key}")
        return p

    def atlas(self) -> Atlas:
        ph = self.out / "phantom" / "atlas"
        img = load_volume(self.input_path("atlas_image", ph / "image.nii.gz"), "intensity")
        lab = load_volume(self.input_path("atlas_labels", ph / "labels.nii.gz"), "label")
        return Atlas(img, lab)

    def manifest(self) -> Path:
        return self.input_path("manifest", self.out / "phantom" / "manifest.tsv")

    def optional_input(self, key: str, default: Path) -> Path | None:
        p = self.path(key) or default
        return p if p.exists() else None

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.data["train"])


# ---------------------------------------------------------------- helpers


@contextmanager
def atomic_path(path: Path) -> Iterator[Path]:
    """Yield a temporary sibling path; rename it onto ``path`` only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix="".join(path.suffixes), dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_json(path: Path, obj: dict, cfg: PipelineConfig) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps({**obj, **cfg.stamp}, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], cfg: PipelineConfig) -> Path:
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as fh:
            fh.write(f"# {cfg.provenance}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise MissingInputError(path)
    with open(path, newline="") as fh:
        return list(csv.DictReader(uncommented(fh)))


def _fmt(x: float, digits: int = 6) -> str:
    return f"{x:.{digits}f}"


def _select(rows: Sequence[ManifestRow], case_id: str | None) -> list[ManifestRow]:
    if case_id is None:
        return list(rows)
    sel = [r for r in rows if r.case_id == case_id]
    if not sel:
        raise ValueError(f"case {case_id!r} not in manifest")
    return sel


def _run_cases(fn: Callable, jobs: list[tuple], workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _prealigned_manifest(cfg: PipelineConfig) -> Path:
    p = cfg.out / "prealign" / "manifest.tsv"
    if not p.exists():
        raise MissingInputError(p, "run prealign first")
    return p


def _load_case(row: ManifestRow, need_tumour: bool = False) -> Case:
    for p in (row.image, row.labels):
        if not p.exists():
            raise MissingInputError(p, f"case {row.case_id}")
    tumour = None
    if row.tumour is not None:
        if not row.tumour.exists():
            raise MissingInputError(row.tumour, f"case {row.case_id} tumour")
        tumour = load_volume(row.tumour, "label")
    elif need_tumour:
        raise ValueError(f"case {row.case_id} has no tumour mask")
    aff = read_affine(row.affines[0]) if row.affines else AffineTransform.identity()
    return Case(row.case_id, load_volume(row.image, "intensity"), load_volume(row.labels, "label"), aff, tumour)


def _field_paths(cfg: PipelineConfig, stage: str, case_id: str) -> tuple[Path, Path]:
    d = cfg.out / "fields" / stage
    return d / f"{case_id}.T.nii.gz", d / f"{case_id}.T_inv.nii.gz"


def _load_fields(cfg: PipelineConfig, stage: str, case_id: str, grid: SamplingGrid) -> tuple[DisplacementField, DisplacementField]:
    if stage == "affine":
        ident = DisplacementField.identity(grid)
        return ident, ident
    out = []
    for p in _field_paths(cfg, stage, case_id):
        if not p.exists():
            raise MissingInputError(p, f"fields for stage {stage}")
        out.append(load_field(p))
    return out[0], out[1]


def _setup_torch() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------- CLI


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Atlas registration pipeline."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    _setup_torch()


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML config file.")(f)
    f = click.option("--seed", type=int, default=None, help="Override the config seed.")(f)
    return f


def _case_opt(f):
    return click.option("--case-id", default=None, help="Restrict to one case.")(f)


def _workers_opt(f):
    return click.option("--workers", type=int, default=1, show_default=True, help="Parallel per-case workers.")(f)


@main.command("phantom-gen")
@_common
def phantom_gen(config_path, seed):
    """Write a synthetic atlas and tumour-bearing subject cohort with a manifest."""
    cfg = PipelineConfig.load(config_path, seed)
    ph = cfg.data["phantom"]
    n = int(ph["size"])
    base = PhantomSpec(
        grid=SamplingGrid((n, n, n)),
        n_labels=int(ph["n_labels"]),
        deform_amplitude=float(ph["deform_amplitude"]),
        deform_smoothness=float(ph["deform_smoothness"]),
        tumour_radius=ph["tumour_radius"],
        seed=cfg.data["seed"],
    )
    root = cfg.out / "phantom"
    img, lab = make_atlas(base)
    save_volume(img, root / "atlas" / "image.nii.gz", cfg.provenance)
    save_volume(lab, root / "atlas" / "labels.nii.gz", cfg.provenance)
    art, perf = phantom_territories(lab)
    save_volume(art, root / "atlas" / "arterial.nii.gz", cfg.provenance)
    save_volume(perf, root / "atlas" / "perfusion.nii.gz", cfg.provenance)
    rows = []
    ident = root / "identity.affine.txt"
    _write_affine(AffineTransform.identity(), ident, cfg)
    for k in range(int(ph["n_cases"])):
        cid = f"case{k + 1:03d}"
        spec = PhantomSpec(
            base.grid, base.n_labels, base.deform_amplitude, base.deform_smoothness, base.tumour_radius,
            seed=cfg.data["seed"] * 1000 + k + 1,
        )
        sub = make_subject((img, lab), spec)
        d = root / "cases" / cid
        save_volume(sub.image, d / "image.nii.gz", cfg.provenance)
        save_volume(sub.labels, d / "labels.nii.gz", cfg.provenance)
        tum = None
        if sub.tumour is not None:
            tum = save_volume(sub.tumour, d / "tumour.nii.gz", cfg.provenance)
        save_field(sub.ground_truth[0], d / "gt.T.nii.gz", cfg.provenance)
        save_field(sub.ground_truth[1], d / "gt.T_inv.nii.gz", cfg.provenance)
        rows.append(ManifestRow(cid, d / "image.nii.gz", d / "labels.nii.gz", tum, (ident,)))
    man = root / "manifest.tsv"
    with atomic_path(man) as tmp:
        write_manifest(rows, tmp, cfg.provenance)
    _rebase_manifest(man, rows, cfg)
    click.echo(str(man))


def _rebase_manifest(path: Path, rows: list[ManifestRow], cfg: PipelineConfig) -> None:
    # relative entries must be relative to the final location, not the temp file
    with atomic_path(path) as tmp:
        tmp.unlink()
        tmp.parent.mkdir(parents=True, exist_ok=True)
        write_manifest(rows, path.parent / tmp.name, cfg.provenance)


def phantom_territories(labels: LabelMap) -> tuple[LabelMap, ImageVolume]:
    """Four-territory arterial map (anterior/posterior by left/right) and a smooth perfusion ramp."""
    g = labels.grid
    idx = g.index_grid().numpy()
    centre = (np.asarray(g.shape, dtype=np.float64) - 1) / 2
    left = idx[..., 0] < centre[0]
    anterior = idx[..., 1] >= centre[1]
    fg = np.asarray(labels.data) > 0
    # ids follow the arterial table: 1/2 anterior cerebral, 17/18 temporal posterior cerebral
    art = np.where(anterior, np.where(left, 1, 2), np.where(left, 17, 18)) * fg
    names = {i: co.SEGART_LABELS[i] for i in (0, 1, 2, 17, 18)}
    ramp = 0.3 + 0.5 * idx[..., 1] / max(g.shape[1] - 1, 1)
    return LabelMap(art.astype(np.int32), g, names, id="arterial"), ImageVolume(ramp * fg, g, id="perfusion")


def _write_affine(aff: AffineTransform, path: Path, cfg: PipelineConfig) -> Path:
    with atomic_path(path) as tmp:
        write_affine(aff, tmp)
        body = tmp.read_text()
        tmp.write_text(f"# {cfg.provenance}\n{body}")
    return path


def _affine_dsc(labels: LabelMap, atlas: LabelMap, aff: AffineTransform) -> float:
    return mean_dsc(sample(labels, atlas.grid, compose_chain([aff.inverse()])), atlas)


@main.command()
@_common
@_case_opt
def prealign(config_path, seed, case_id):
    """Validate supplied affine matrices (keeping the best by mean DSC) or initialise from moments."""
    cfg = PipelineConfig.load(config_path, seed)
    atlas = cfg.atlas()
    rows = _select(read_manifest(cfg.manifest()), case_id)
    out = cfg.out / "prealign"
    new_rows, summary = [], {}
    for r in rows:
        if not r.labels.exists():
            raise MissingInputError(r.labels, f"case {r.case_id}")
        labels = load_volume(r.labels, "label")
        cands = []
        for p in r.affines:
            if not p.exists():
                raise MissingInputError(p, f"case {r.case_id} affine")
            aff = read_affine(p)
            cond = np.linalg.cond(aff.matrix)
            if not np.isfinite(cond) or cond > MAX_AFFINE_CONDITION:
                raise ValueError(f"{p}: affine matrix is not invertible (condition number {cond:.3g})")
            cands.append((str(p), aff, _affine_dsc(labels, atlas.labels, aff)))
        if not cands:
            aff = moment_affine_init(labels, atlas.labels)
            cands.append(("moment-init", aff, _affine_dsc(labels, atlas.labels, aff)))
        best = max(cands, key=lambda c: c[2])
        dest = _write_affine(best[1], out / f"{r.case_id}.affine.txt", cfg)
        new_rows.append(ManifestRow(r.case_id, r.image, r.labels, r.tumour, (dest,)))
        summary[r.case_id] = {"selected": best[0], "candidates": {c[0]: c[2] for c in cands}}
    man = out / "manifest.tsv"
    if case_id is not None and man.exists():
        keep = [r for r in read_manifest(man) if r.case_id != case_id]
        new_rows = sorted(keep + new_rows, key=lambda r: r.case_id)
    _rebase_manifest(man, new_rows, cfg)
    write_json(out / ("summary.json" if case_id is None else f"summary.{case_id}.json"), {"cases": summary}, cfg)
    click.echo(str(man))


@main.command("train-general")
@_common
def train_general_cmd(config_path, seed):
    """Train the cohort-level model on all prealigned cases."""
    cfg = PipelineConfig.load(config_path, seed)
    atlas = cfg.atlas()
    cases = [_load_case(r) for r in read_manifest(_prealigned_manifest(cfg))]
    tc = cfg.train_config()
    log_path = cfg.out / "logs" / "general.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with atomic_path(log_path) as tmp_log:
        res = train_general(cases, atlas, tc, log_path=tmp_log)
    ckpt = cfg.out / "models" / "general.pt"
    save_model(res.net, ckpt, stage="general", train_config=tc.to_dict(), **cfg.stamp)
    write_json(
        cfg.out / "models" / "general.json",
        {"epochs": len(res.history), "diverged": res.diverged, "final_loss": res.history[-1].total if res.history else None},
        cfg,
    )
    click.echo(str(ckpt))


def _overfit_one(cfg_data: dict, root: str, row: ManifestRow, tag: str) -> dict:
    _setup_torch()
    cfg = PipelineConfig(cfg_data, Path(root))
    atlas = cfg.atlas()
    case = _load_case(row)
    ckpt = cfg.out / "models" / "general.pt"
    if not ckpt.exists():
        raise MissingInputError(ckpt, "run train-general first")
    base = load_model(ckpt)
    tc = cfg.train_config()
    log_path = cfg.out / "logs" / tag / f"{row.case_id}.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with atomic_path(log_path) as tmp_log:
        res = overfit_case(base, case, atlas, tc, log_path=tmp_log)
    pT, pTi = _field_paths(cfg, tag, row.case_id)
    for f, p in ((res.T, pT), (res.T_inv, pTi)):
        p.parent.mkdir(parents=True, exist_ok=True)
        with atomic_path(p) as tmp:
            save_field(f, tmp, cfg.provenance)
            side = tmp.with_name(tmp.name.replace(".nii.gz", ".field.json"))
            os.replace(side, p.with_name(p.name.replace(".nii.gz", ".field.json")))
    return {"case_id": row.case_id, "dsc_before": res.dsc_before, "dsc_after": res.dsc_after, "diverged": res.diverged}


@main.command()
@_common
@_case_opt
@_workers_opt
@click.option("--tag", default="overfit", show_default=True, help="Output name for this run (e.g. an ablation).")
def overfit(config_path, seed, case_id, workers, tag):
    """Per-case one-shot optimisation starting from the general model."""
    cfg = PipelineConfig.load(config_path, seed)
    rows = _select(read_manifest(_prealigned_manifest(cfg)), case_id)
    results = _run_cases(_overfit_one, [(cfg.data, str(cfg.root), r, tag) for r in rows], workers)
    name = "summary.json" if case_id is None else f"summary.{case_id}.json"
    write_json(cfg.out / "fields" / tag / name, {"cases": results}, cfg)
    for r in results:
        click.echo(f"{r['case_id']}\tDSC {r['dsc_before']:.4f} -> {r['dsc_after']:.4f}")


@main.command()
@_common
@_case_opt
@click.option("--stage", default="general", show_default=True, help="affine, general, or an overfit tag.")
def warp(config_path, seed, case_id, stage):
    """Write transforms (general stage) and atlas-space warped labels for a stage."""
    cfg = PipelineConfig.load(config_path, seed)
    atlas = cfg.atlas()
    rows = _select(read_manifest(_prealigned_manifest(cfg)), case_id)
    tc = cfg.train_config()
    net = None
    if stage == "general":
        ckpt = cfg.out / "models" / "general.pt"
        if not ckpt.exists():
            raise MissingInputError(ckpt, "run train-general first")
        net = load_model(ckpt)
    factor = int(tc.net.get("grid_factor", 2))
    for r in rows:
        case = _load_case(r)
        if net is not None:
            p = prepare_case(case, atlas, tc.weights.gamma, factor)
            with torch.no_grad():
                _, T, T_inv = register(net, p, atlas.grid, tc.steps, factor)
            for f, path in zip((T, T_inv), _field_paths(cfg, stage, r.case_id)):
                path.parent.mkdir(parents=True, exist_ok=True)
                save_field(f, path, cfg.provenance)
        T, _ = _load_fields(cfg, stage, r.case_id, atlas.grid)
        warped = sample(case.labels, atlas.grid, compose_chain([case.affine.inverse(), T]))
        out = cfg.out / "warped" / stage / f"{r.case_id}.labels.nii.gz"
        out.parent.mkdir(parents=True, exist_ok=True)
        save_volume(LabelMap(warped, atlas.grid, case.labels.label_names, id=r.case_id), out, cfg.provenance)
        click.echo(str(out))


def _metrics_one(cfg_data: dict, root: str, row: ManifestRow, stage: str) -> str:
    _setup_torch()
    cfg = PipelineConfig(cfg_data, Path(root))
    atlas = cfg.atlas()
    case = _load_case(row)
    T, T_inv = _load_fields(cfg, stage, row.case_id, atlas.grid)
    m = case_metrics(row.case_id, atlas.labels, case.labels, T, T_inv, case.affine, case.tumour, stage=stage)
    return m.to_json(**cfg.stamp)


@main.command()
@_common
@_case_opt
@_workers_opt
@click.option("--stage", "stages", multiple=True, default=("affine", "general", "overfit"), show_default=True)
def metrics(config_path, seed, case_id, workers, stages):
    """Per-case overlap, surface-distance and plausibility metrics for each stage."""
    cfg = PipelineConfig.load(config_path, seed)
    rows = _select(read_manifest(_prealigned_manifest(cfg)), case_id)
    for stage in stages:
        lines = _run_cases(_metrics_one, [(cfg.data, str(cfg.root), r, stage) for r in rows], workers)
        out = cfg.out / "metrics" / (f"{stage}.jsonl" if case_id is None else f"{stage}.{case_id}.jsonl")
        with atomic_path(out) as tmp:
            tmp.write_text("".join(l + "\n" for l in lines))
        click.echo(str(out))


def _lesions_one(cfg_data: dict, root: str, row: ManifestRow, stage: str) -> list[co.MetastasisRecord]:
    _setup_torch()
    cfg = PipelineConfig(cfg_data, Path(root))
    atlas = cfg.atlas()
    case = _load_case(row, need_tumour=True)
    T, _ = _load_fields(cfg, stage, row.case_id, atlas.grid)
    ph = cfg.out / "phantom" / "atlas"
    art_p = cfg.optional_input("arterial_labels", ph / "arterial.nii.gz")
    perf_p = cfg.optional_input("perfusion", ph / "perfusion.nii.gz")
    art = load_volume(art_p, "label") if art_p else None
    perf = load_volume(perf_p, "intensity") if perf_p else None
    return co.map_lesions(row.case_id, case.tumour, T, atlas.labels, art, perf, case.affine)


def _stats_rows(stats_: Sequence[co.RegionStats]) -> list[list]:
    return [
        [
            s.region,
            " ".join(map(str, s.labels)),
            s.measured,
            _fmt(s.expected, 4),
            "" if s.p_value is None else f"{s.p_value:.6g}",
            int(s.tested),
            int(s.significant),
            "" if s.ci_low is None else s.ci_low,
            "" if s.ci_high is None else s.ci_high,
        ]
        for s in stats_
    ]


STATS_HEADER = ["region", "labels", "measured", "expected", "p_value", "tested", "significant", "ci_low", "ci_high"]


@main.command("cohort-analyze")
@_common
@_workers_opt
def cohort_analyze(config_path, seed, workers):
    """Map lesions into the atlas and run the region, territory and interface statistics."""
    cfg = PipelineConfig.load(config_path, seed)
    an = cfg.data["analysis"]
    stage = an["stage"]
    atlas = cfg.atlas()
    rows = [r for r in read_manifest(_prealigned_manifest(cfg)) if r.tumour is not None]
    if not rows:
        raise ValueError("no case in the manifest has a tumour mask")
    per_case = _run_cases(_lesions_one, [(cfg.data, str(cfg.root), r, stage) for r in rows], workers)
    records = [rec for recs in per_case for rec in recs]
    out = cfg.out / "cohort"
    with atomic_path(out / "records.tsv") as tmp:
        co.write_records(records, tmp, cfg.provenance)
    if not any(not r.flagged for r in records):
        raise ValueError("every lesion was flagged; nothing to analyse")

    seed_ = cfg.data["seed"]
    regions = co.chi_square_regions(co.region_frequencies(records, atlas.labels), an["alpha"], an["min_expected"])
    ci = co.jitter_ci(records, atlas.labels, an["jitter_n"], an["jitter_mean"], an["jitter_sd"], seed_)
    regions = co.attach_ci(regions, ci)
    write_csv(out / "regions.csv", STATS_HEADER, _stats_rows(regions), cfg)

    summary: dict[str, Any] = {
        "n_lesions": len(records),
        "n_flagged": sum(r.flagged for r in records),
        "stage": stage,
        "hemisphere_p": co.hemisphere_symmetry_test(records, atlas.labels),
        "perfusion": co.perfusion_summary(records),
    }
    art_p = cfg.optional_input("arterial_labels", cfg.out / "phantom" / "atlas" / "arterial.nii.gz")
    if art_p is not None:
        art = load_volume(art_p, "label")
        groups = an["arterial_groups"] or co.ARTERIAL_GROUPS
        terr, pooled = co.arterial_frequencies(records, art, groups)
        terr = co.chi_square_regions(terr, an["alpha"], an["min_expected"])
        pooled = co.chi_square_regions(pooled, an["alpha"], an["min_expected"])
        write_csv(out / "arterial.csv", STATS_HEADER, _stats_rows(terr), cfg)
        write_csv(out / "arterial_pooled.csv", STATS_HEADER, _stats_rows(pooled), cfg)

    interfaces = {
        "junction": co.junction_surface(atlas.labels, an["junction_a"], an["junction_b"]),
        "corticomeningeal": co.junction_surface(atlas.labels, an["cortex"], [0]),
    }
    for k, (name, mask) in enumerate(interfaces.items()):
        if not mask.any():
            log.warning("interface %s is empty in this atlas; skipped", name)
            continue
        res = co.junction_analysis(
            records, mask, atlas.labels, None, an["emd_random_sets"], None, seed_ + k, an["hist_bins"], name
        )
        summary[name] = {"p": res.p, "mean_emd_tumour": float(np.mean(res.emd_tumour)), "mean_emd_random": float(np.mean(res.emd_rand))}
        rows_h = [[_fmt(a, 4), _fmt(b, 4), _fmt(c), _fmt(d)] for a, b, c, d in res.histogram_rows()]
        write_csv(out / f"{name}_hist.csv", ["bin_low", "bin_high", "tumour_density", "random_density"], rows_h, cfg)
    write_json(out / "summary.json", summary, cfg)
    click.echo(str(out))


def _metrics_from_json(line: str) -> CaseMetrics:
    d = json.loads(line)
    keys = CaseMetrics.__dataclass_fields__
    d = {k: v for k, v in d.items() if k in keys}
    for k in ("dsc_per_label", "hd_per_label", "assd_per_label"):
        d[k] = {int(a): b for a, b in d[k].items()}
    return CaseMetrics(**d)


@main.command()
@_common
def report(config_path, seed):
    """Tables and plot data (CSV) plus static figures from persisted artifacts only."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = PipelineConfig.load(config_path, seed)
    rep = cfg.out / "report"
    groups = {}
    mdir = cfg.out / "metrics"
    for stage in ("affine", "general", "overfit") + tuple(
        sorted(p.stem for p in mdir.glob("*.jsonl") if p.stem not in ("affine", "general", "overfit") and "." not in p.stem)
    ):
        p = mdir / f"{stage}.jsonl"
        if p.exists():
            groups[stage] = [_metrics_from_json(l) for l in p.read_text().splitlines() if l.strip()]
    if not groups:
        raise MissingInputError(mdir / "overfit.jsonl", "run metrics first")
    with atomic_path(rep / "registration_table.csv") as tmp:
        write_cohort_table(groups, tmp, cfg.provenance)

    regions = read_csv(cfg.out / "cohort" / "regions.csv")
    write_csv(
        rep / "region_counts.csv",
        ["region", "measured", "expected", "ci_low", "ci_high", "significant"],
        [[r["region"], r["measured"], r["expected"], r["ci_low"], r["ci_high"], r["significant"]] for r in regions],
        cfg,
    )
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(regions))
    meas = np.array([float(r["measured"]) for r in regions])
    exp_ = np.array([float(r["expected"]) for r in regions])
    ax.bar(x - 0.2, exp_, 0.4, color="tab:green", label="expected")
    ax.bar(x + 0.2, meas, 0.4, color="tab:red", label="measured")
    for i, r in enumerate(regions):
        if r["ci_low"] != "":
            ax.plot([i + 0.2, i + 0.2], [float(r["ci_low"]), float(r["ci_high"])], color="k", lw=1)
        if r["significant"] == "1":
            ax.text(i, max(meas[i], exp_[i]) * 1.05 + 0.5, "*", ha="center")
    ax.axhline(cfg.data["analysis"]["min_expected"], ls="--", color="grey", lw=1)
    ax.set_xticks(x, [r["region"] for r in regions], rotation=45, ha="right")
    ax.set_ylabel("lesion count")
    ax.legend()
    fig.tight_layout()
    _save_fig(fig, rep / "region_counts.png")

    for name in ("junction", "corticomeningeal"):
        p = cfg.out / "cohort" / f"{name}_hist.csv"
        if not p.exists():
            continue
        h = read_csv(p)
        write_csv(rep / f"{name}_histogram.csv", list(h[0].keys()), [list(r.values()) for r in h], cfg)
        mid = [(float(r["bin_low"]) + float(r["bin_high"])) / 2 for r in h]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(mid, [float(r["tumour_density"]) for r in h], color="tab:red", label="lesion barycentres")
        ax.plot(mid, [float(r["random_density"]) for r in h], color="tab:blue", label="random points")
        ax.set_xlabel(f"distance to {name} interface (mm)")
        ax.set_ylabel("density")
        ax.legend()
        fig.tight_layout()
        _save_fig(fig, rep / f"{name}_histogram.png")
        plt.close(fig)
    click.echo(str(rep))


def _save_fig(fig, path: Path) -> None:
    import matplotlib.pyplot as plt

    with atomic_path(path) as tmp:
        fig.savefig(tmp, dpi=120, metadata={"Software": None})
    plt.close(fig)


def run(argv: Sequence[str] | None = None) -> int:
    """Entry point: machine-readable JSON error on stderr and a nonzero exit code on failure."""
    try:
        main.main(args=list(argv) if argv is not None else None, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        sys.stderr.write(json.dumps({"error": "usage", "message": exc.format_message()}) + "\n")
        return 2
    except click.exceptions.Abort:
        sys.stderr.write(json.dumps({"error": "aborted"}) + "\n")
        return 1
    except MissingInputError as exc:
        sys.stderr.write(json.dumps({"error": "missing_input", "path": str(exc.path), "message": str(exc)}) + "\n")
        return 3
    except Exception as exc:  # noqa: BLE001  the CLI boundary reports every failure as JSON
        log.debug("failure", exc_info=True)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
