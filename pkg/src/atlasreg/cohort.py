"""Atlas-space lesion statistics: region frequencies, jitter intervals, junction proximity."""
from __future__ import annotations

import csv
import logging
import re
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy import ndimage, stats

from .distmaps import junction_surface
from .field import DisplacementField
from .volumes import AffineTransform, ImageVolume, LabelMap, compose_chain, sample, trilinear, uncommented

log = logging.getLogger(__name__)

__all__ = [
    "MetastasisRecord",
    "RegionStats",
    "JunctionResult",
    "SEGANAT_LABELS",
    "SEGART_LABELS",
    "ARTERIAL_GROUPS",
    "region_key",
    "map_lesions",
    "region_frequencies",
    "chi_square_regions",
    "jitter_ci",
    "attach_ci",
    "emd_1d",
    "junction_analysis",
    "grey_white_junction",
    "corticomeningeal_interface",
    "hemisphere_symmetry_test",
    "arterial_frequencies",
    "perfusion_summary",
    "write_records",
    "read_records",
    "write_region_table",
]

# FreeSurfer lookup-table ids for the anatomical structure set.
SEGANAT_LABELS: dict[int, str] = {
    0: "Background",
    2: "Cerebral White Matter Left",
    3: "Cerebral Cortex Left",
    4: "Lateral Ventricle Left",
    5: "Inferior Lateral Ventricle Left",
    7: "Cerebellum White Matter Left",
    8: "Cerebellum Cortex Left",
    10: "Thalamus Left",
    11: "Caudate Left",
    12: "Putamen Left",
    13: "Pallidum Left",
    14: "3rd Ventricle",
    15: "4th Ventricle",
    16: "Brain Stem",
    17: "Hippocampus Left",
    18: "Amygdala Left",
    26: "Accumbens Area Left",
    28: "Ventral Diencephalon Left",
    30: "Vessel Left",
    31: "Choroid Plexus Left",
    41: "Cerebral White Matter Right",
    42: "Cerebral Cortex Right",
    43: "Lateral Ventricle Right",
    44: "Inferior Lateral Ventricle Right",
    46: "Cerebellum White Matter Right",
    47: "Cerebellum Cortex Right",
    49: "Thalamus Right",
    50: "Caudate Right",
    51: "Putamen Right",
    52: "Pallidum Right",
    53: "Hippocampus Right",
    54: "Amygdala Right",
    58: "Accumbens Area Right",
    60: "Ventral Diencephalon Right",
    62: "Vessel Right",
    63: "Choroid Plexus Right",
}

_ARTERIAL_TERRITORIES = [
    ("Anterior Cerebral Artery", "anterior"),
    ("Medial Lenticulostriate", "anterior"),
    ("Lateral Lenticulostriate", "anterior"),
    ("Frontal Pars of Middle Cerebral Artery", "anterior"),
    ("Parietal Pars of Middle Cerebral Artery", "anterior"),
    ("Temporal Pars of Middle Cerebral Artery", "anterior"),
    ("Occipital Pars of Middle Cerebral Artery", "anterior"),
    ("Insular Pars of Middle Cerebral Artery", "anterior"),
    ("Temporal Pars of Posterior Cerebral Artery", "posterior"),
    ("Occipital Pars of Posterior Cerebral Artery", "posterior"),
    ("Posterior Choroidal and Thalamoperfurators", "posterior"),
    ("Anterior Choroidal and Thalamoperfurators", "anterior"),
    ("Basilar", "posterior"),
    ("Superior Cerebellar", "posterior"),
    ("Inferior Cerebellar", "posterior"),
    ("Lateral Ventricle", None),  # not a vascular territory; left out of the pooling
]

# Left/Right pairs numbered consecutively in table order: left = 2k+1, right = 2k+2.
SEGART_LABELS: dict[int, str] = {0: "Background"}
ARTERIAL_GROUPS: dict[str, frozenset[int]] = {}
_groups: dict[str, set[int]] = {"anterior": set(), "posterior": set()}
for _k, (_name, _grp) in enumerate(_ARTERIAL_TERRITORIES):
    SEGART_LABELS[2 * _k + 1] = f"{_name} Left"
    SEGART_LABELS[2 * _k + 2] = f"{_name} Right"
    if _grp is not None:
        _groups[_grp] |= {2 * _k + 1, 2 * _k + 2}
ARTERIAL_GROUPS = {k: frozenset(v) for k, v in _groups.items()}
del _k, _name, _grp, _groups

_SIDE = re.compile(r"^(?:(?P<pre>left|right)[\s_-]+)?(?P<base>.*?)(?:[\s_-]+(?P<post>left|right))?$", re.I)


def region_key(name: str) -> tuple[str, str | None]:
    """Strip a leading or trailing Left/Right token: ``"Putamen Left" -> ("Putamen", "left")``."""
    m = _SIDE.match(name.strip())
    side = m.group("pre") or m.group("post")
    return m.group("base"), side.lower() if side else None


@dataclass(frozen=True)
class MetastasisRecord:
    case_id: str
    lesion_id: int
    barycentre_atlas: tuple[float, float, float]
    volume_mm3: float
    region_label: int
    arterial_label: int = 0
    perfusion_median: float = float("nan")
    perfusion_min: float = float("nan")
    perfusion_max: float = float("nan")
    flagged: bool = False


@dataclass(frozen=True)
class RegionStats:
    region: str
    labels: tuple[int, ...]
    measured: int
    expected: float
    p_value: float | None = None
    significant: bool = False
    tested: bool = False
    ci_low: int | None = None
    ci_high: int | None = None


def _label_at(labels: LabelMap, points: np.ndarray) -> np.ndarray:
    """Label of the voxel containing each world point; 0 outside the grid."""
    idx = np.rint(labels.grid.world_to_index(torch.tensor(np.asarray(points, dtype=np.float64))).numpy()).astype(np.int64)
    shape = np.asarray(labels.grid.shape)
    inside = np.all((idx >= 0) & (idx < shape), axis=-1)
    out = np.zeros(idx.shape[:-1], dtype=np.int64)
    i = idx[inside]
    out[inside] = np.asarray(labels.data)[i[:, 0], i[:, 1], i[:, 2]]
    return out


def map_lesions(
    case_id: str,
    tumour: LabelMap,
    T: DisplacementField,
    atlas_labels: LabelMap,
    arterial_labels: LabelMap | None = None,
    perfusion: ImageVolume | None = None,
    affine: AffineTransform | None = None,
) -> list[MetastasisRecord]:
    """One record per 26-connected lesion, located in atlas space.

    All lesions are warped together as one component-id map, so each voxel is
    interpolated once.  Lesions that vanish after warping, or whose barycentre
    lands on atlas background, come back ``flagged``.
    """
    if atlas_labels.grid != T.grid:
        raise ValueError("atlas labels and transform must share a grid")
    comp, n = ndimage.label(np.asarray(tumour.data) > 0, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return []
    comp_map = LabelMap(comp.astype(np.int32), tumour.grid, id=f"{case_id}-lesions")
    parts = ([affine.inverse()] if affine is not None else []) + [T]
    warped = sample(comp_map, T.grid, compose_chain(parts))
    pts = T.grid.world_points().numpy()
    perf = None
    if perfusion is not None:
        perf = np.asarray(perfusion.data) if perfusion.grid == T.grid else sample(perfusion, T.grid)
    counts = np.bincount(comp.ravel(), minlength=n + 1)
    records = []
    for k in range(1, n + 1):
        m = warped == k
        vol = float(counts[k] * tumour.grid.voxel_volume)
        if not m.any():
            log.warning("case %s lesion %d vanished after warping", case_id, k)
            records.append(MetastasisRecord(case_id, k, (np.nan,) * 3, vol, 0, 0, flagged=True))
            continue
        c = pts[m].mean(axis=0)
        region = int(_label_at(atlas_labels, c))
        art = int(_label_at(arterial_labels, c)) if arterial_labels is not None else 0
        pv = perf[m] if perf is not None else np.array([np.nan])
        records.append(
            MetastasisRecord(
                case_id,
                k,
                tuple(float(x) for x in c),
                vol,
                region,
                art,
                float(np.median(pv)),
                float(pv.min()),
                float(pv.max()),
                flagged=region == 0,
            )
        )
    return records


def _pooled_groups(labels: LabelMap) -> dict[str, tuple[int, ...]]:
    groups: dict[str, list[int]] = {}
    for l in labels.labels:
        if l == 0:
            continue
        key, _ = region_key(labels.label_names.get(l, str(l)))
        groups.setdefault(key, []).append(l)
    return {k: tuple(sorted(v)) for k, v in groups.items()}


def _frequencies(label_ids: np.ndarray, labels: LabelMap, groups: Mapping[str, Iterable[int]]) -> list[RegionStats]:
    data = np.asarray(labels.data)
    vox = np.bincount(data[data > 0].ravel()) if (data > 0).any() else np.zeros(1)
    vol = lambda ids: float(sum(vox[i] for i in ids if 0 < i < len(vox)))  # noqa: E731
    groups = {k: tuple(sorted(int(i) for i in v)) for k, v in groups.items()}
    total_vol = sum(vol(ids) for ids in groups.values())
    counted = label_ids[np.isin(label_ids, [i for ids in groups.values() for i in ids])]
    n = len(counted)
    out = []
    for name, ids in groups.items():
        measured = int(np.isin(counted, ids).sum())
        expected = n * vol(ids) / total_vol if total_vol > 0 else 0.0
        out.append(RegionStats(name, ids, measured, expected))
    return out


def region_frequencies(
    records: Sequence[MetastasisRecord],
    atlas_labels: LabelMap,
    groups: Mapping[str, Iterable[int]] | None = None,
    attribute: str = "region_label",
) -> list[RegionStats]:
    """Measured barycentre counts per region against volume-proportional expectations.

    Left and right structures are pooled by name unless ``groups`` is given.
    Flagged records and records outside every region are not counted, so the
    expected counts sum to the measured total.
    """
    if not records:
        raise ValueError("no records")
    ids = np.asarray([getattr(r, attribute) for r in records if not r.flagged], dtype=np.int64)
    return _frequencies(ids, atlas_labels, groups if groups is not None else _pooled_groups(atlas_labels))


def chi_square_regions(stats_: Sequence[RegionStats], alpha: float = 0.01, min_expected: float = 5.0) -> list[RegionStats]:
    """Region-versus-rest 1-df goodness-of-fit test per region, Bonferroni-corrected.

    Regions whose expected count is below ``min_expected`` are not tested and
    do not count toward the correction divisor.
    """
    n = sum(s.measured for s in stats_)
    tested = [s.expected >= min_expected and n - s.expected > 0 for s in stats_]
    m = max(sum(tested), 1)
    out = []
    for s, t in zip(stats_, tested):
        if not t:
            out.append(replace(s, p_value=None, significant=False, tested=False))
            continue
        d2 = (s.measured - s.expected) ** 2
        chi2 = d2 / s.expected + d2 / (n - s.expected)
        p = float(stats.chi2.sf(chi2, df=1))
        out.append(replace(s, p_value=p, significant=p < alpha / m, tested=True))
    return out


def jitter_ci(
    records: Sequence[MetastasisRecord],
    atlas_labels: LabelMap,
    n: int = 100,
    shift_mean: float = 1.0,
    shift_sd: float = 0.5,
    seed: int = 0,
    groups: Mapping[str, Iterable[int]] | None = None,
) -> dict[str, tuple[int, int]]:
    """Per-region 2.5/97.5 percentile counts over randomly shifted barycentres.

    Each replicate moves every barycentre in a uniform random direction by a
    magnitude drawn from Normal(shift_mean, shift_sd), clamped at zero.
    """
    pts = np.asarray([r.barycentre_atlas for r in records if not r.flagged], dtype=np.float64).reshape(-1, 3)
    groups = groups if groups is not None else _pooled_groups(atlas_labels)
    counts = {k: [] for k in groups}
    for ss in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(ss)
        d = rng.standard_normal(pts.shape)
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        mag = np.maximum(rng.normal(shift_mean, shift_sd, size=(len(pts), 1)), 0.0)
        lab = _label_at(atlas_labels, pts + mag * d) if len(pts) else np.zeros(0, dtype=np.int64)
        for k, ids in groups.items():
            counts[k].append(int(np.isin(lab, list(ids)).sum()))
    return {
        k: (int(np.percentile(v, 2.5, method="lower")), int(np.percentile(v, 97.5, method="higher")))
        for k, v in counts.items()
    }


def attach_ci(stats_: Sequence[RegionStats], ci: Mapping[str, tuple[int, int]]) -> list[RegionStats]:
    return [replace(s, ci_low=ci[s.region][0], ci_high=ci[s.region][1]) if s.region in ci else s for s in stats_]


def emd_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """Earth mover's distance between two equally weighted 1-D samples.

    Integrates the absolute difference of the empirical CDFs over the merged
    support.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("EMD needs two non-empty samples")
    xs = np.concatenate([a, b])
    xs.sort(kind="mergesort")
    widths = np.diff(xs)
    fa = np.searchsorted(a, xs[:-1], side="right") / a.size
    fb = np.searchsorted(b, xs[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


@dataclass
class JunctionResult:
    emd_tumour: list[float]
    emd_rand: list[float]
    p: float
    tumour_distances: np.ndarray
    random_distances: np.ndarray
    bin_edges: np.ndarray
    tumour_density: np.ndarray
    random_density: np.ndarray
    interface: str = "junction"

    def histogram_rows(self) -> list[tuple[float, float, float, float]]:
        e = self.bin_edges
        return [(e[i], e[i + 1], self.tumour_density[i], self.random_density[i]) for i in range(len(e) - 1)]


def _distance_at(dist: np.ndarray, grid, points: np.ndarray) -> np.ndarray:
    idx = grid.world_to_index(torch.tensor(np.asarray(points, dtype=np.float64)))
    return trilinear(torch.from_numpy(np.ascontiguousarray(dist)), idx)[0].numpy()


def _random_points(mask_idx: np.ndarray, grid, k: int, rng) -> np.ndarray:
    pick = mask_idx[rng.integers(len(mask_idx), size=k)].astype(np.float64)
    pick += rng.uniform(-0.5, 0.5, size=pick.shape)  # uniform within the voxel
    return grid.index_to_world(pick)


def junction_analysis(
    points: np.ndarray | Sequence[MetastasisRecord],
    junction: np.ndarray,
    atlas_labels: LabelMap,
    brain_mask: np.ndarray | None = None,
    n_random_sets: int = 100,
    set_size: int | None = None,
    seed: int = 0,
    bins: int | Sequence[float] = 20,
    interface: str = "junction",
) -> JunctionResult:
    """Compare distance-to-interface distributions of lesion barycentres and uniform random points.

    ``emd_tumour[k]`` is the EMD between the lesion distances and random set
    ``k``; ``emd_rand[k]`` is the EMD between two independent random sets.
    ``p`` is the rank of mean(emd_tumour) among ``emd_rand``, counting ties
    as exceedances and including the observation itself.
    """
    if isinstance(points, np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    else:
        pts = np.asarray([r.barycentre_atlas for r in points if not r.flagged], dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no lesion points")
    junction = np.asarray(junction, dtype=bool)
    if not junction.any():
        raise ValueError("empty interface mask")
    if n_random_sets < 100:
        warnings.warn(f"{n_random_sets} random sets give an unstable p-value; use at least 100", stacklevel=2)
    g = atlas_labels.grid
    mask = np.asarray(brain_mask, dtype=bool) if brain_mask is not None else np.asarray(atlas_labels.data) > 0
    mask_idx = np.argwhere(mask)
    if len(mask_idx) == 0:
        raise ValueError("empty brain mask")
    size = set_size or len(pts)
    dist = ndimage.distance_transform_edt(~junction, sampling=g.spacing)
    d_t = _distance_at(dist, g, pts)
    rng = np.random.default_rng(seed)
    emd_t, emd_r, pooled = [], [], []
    for _ in range(n_random_sets):
        d_a = _distance_at(dist, g, _random_points(mask_idx, g, size, rng))
        d_b = _distance_at(dist, g, _random_points(mask_idx, g, size, rng))
        emd_t.append(emd_1d(d_t, d_a))
        emd_r.append(emd_1d(d_a, d_b))
        pooled.append(d_a)
    stat = float(np.mean(emd_t))
    p = (1 + int(np.sum(np.asarray(emd_r) >= stat))) / (1 + n_random_sets)
    d_r = np.concatenate(pooled)
    edges = np.histogram_bin_edges(np.concatenate([d_t, d_r]), bins=bins)
    h_t, _ = np.histogram(d_t, bins=edges, density=True)
    h_r, _ = np.histogram(d_r, bins=edges, density=True)
    return JunctionResult(emd_t, emd_r, p, d_t, d_r, edges, h_t, h_r, interface)


def grey_white_junction(labels: LabelMap, cortex: Iterable[int] = (3, 42), white: Iterable[int] = (2, 41)) -> np.ndarray:
    return junction_surface(labels, cortex, white)


def corticomeningeal_interface(labels: LabelMap, cortex: Iterable[int] = (3, 42)) -> np.ndarray:
    """Cortex voxels touching background."""
    return junction_surface(labels, cortex, [0])


def hemisphere_symmetry_test(records: Sequence[MetastasisRecord], atlas_labels: LabelMap) -> dict[str, float]:
    """Two-sided binomial test per left/right pair against the volume-weighted left fraction."""
    data = np.asarray(atlas_labels.data)
    sides: dict[str, dict[str, list[int]]] = {}
    for l in atlas_labels.labels:
        key, side = region_key(atlas_labels.label_names.get(l, str(l)))
        if side is not None:
            sides.setdefault(key, {"left": [], "right": []})[side].append(l)
    ids = np.asarray([r.region_label for r in records if not r.flagged], dtype=np.int64)
    out = {}
    for key, s in sides.items():
        if not s["left"] or not s["right"]:
            continue
        vl, vr = float(np.isin(data, s["left"]).sum()), float(np.isin(data, s["right"]).sum())
        nl, nr = int(np.isin(ids, s["left"]).sum()), int(np.isin(ids, s["right"]).sum())
        if nl + nr == 0 or vl + vr == 0:
            out[key] = 1.0
            continue
        out[key] = float(stats.binomtest(nl, nl + nr, vl / (vl + vr)).pvalue)
    return out


def arterial_frequencies(
    records: Sequence[MetastasisRecord],
    arterial_labels: LabelMap,
    pooling: Mapping[str, Iterable[int]] = ARTERIAL_GROUPS,
) -> tuple[list[RegionStats], list[RegionStats]]:
    """Per-territory statistics (hemispheres pooled) and the two-group pooled variant."""
    per_territory = region_frequencies(records, arterial_labels, attribute="arterial_label")
    present = set(arterial_labels.labels)
    groups = {k: [i for i in v if i in present] for k, v in pooling.items()}
    pooled = region_frequencies(records, arterial_labels, groups=groups, attribute="arterial_label")
    return per_territory, pooled


def perfusion_summary(records: Sequence[MetastasisRecord]) -> dict[str, float]:
    """Cohort averages of the per-lesion perfusion median, minimum and maximum."""
    ok = [r for r in records if not r.flagged and np.isfinite(r.perfusion_median)]
    if not ok:
        return {"median": float("nan"), "min": float("nan"), "max": float("nan")}
    return {
        "median": float(np.mean([r.perfusion_median for r in ok])),
        "min": float(np.mean([r.perfusion_min for r in ok])),
        "max": float(np.mean([r.perfusion_max for r in ok])),
    }


_RECORD_FIELDS = [
    "case_id",
    "lesion_id",
    "x",
    "y",
    "z",
    "volume_mm3",
    "region_label",
    "arterial_label",
    "perfusion_median",
    "perfusion_min",
    "perfusion_max",
    "flagged",
]


def write_records(records: Sequence[MetastasisRecord], path: str | Path, header: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(_RECORD_FIELDS)
        for r in records:
            d = asdict(r)
            x, y, z = d.pop("barycentre_atlas")
            d.update(x=x, y=y, z=z, flagged=int(r.flagged))
            w.writerow([_fmt(d[k]) for k in _RECORD_FIELDS])
    return path


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_records(path: str | Path) -> list[MetastasisRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(uncommented(fh), delimiter="\t"))
    return [
        MetastasisRecord(
            r["case_id"],
            int(r["lesion_id"]),
            (float(r["x"]), float(r["y"]), float(r["z"])),
            float(r["volume_mm3"]),
            int(r["region_label"]),
            int(r["arterial_label"]),
            float(r["perfusion_median"]),
            float(r["perfusion_min"]),
            float(r["perfusion_max"]),
            bool(int(r["flagged"])),
        )
        for r in rows
    ]


def write_region_table(stats_: Sequence[RegionStats], path: str | Path, header: str = "") -> Path:
    """Delimited measured/expected table, one row per region."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "labels", "measured", "expected", "p_value", "tested", "significant", "ci_low", "ci_high"])
        for s in stats_:
            w.writerow(
                [
                    s.region,
                    " ".join(map(str, s.labels)),
                    s.measured,
                    f"{s.expected:.4f}",
                    "" if s.p_value is None else f"{s.p_value:.6g}",
                    int(s.tested),
                    int(s.significant),
                    "" if s.ci_low is None else s.ci_low,
                    "" if s.ci_high is None else s.ci_high,
                ]
            )
    return path
