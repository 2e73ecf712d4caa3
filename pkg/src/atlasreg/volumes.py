"""Images, label maps, sampling grids and the lazy sampling wrapper.

Stored voxel data is never resampled in place.  Every warp is expressed as a
chain of world-space point mappings evaluated on the *target* grid, and the
original data is interpolated exactly once at the mapped points.
"""
from __future__ import annotations

import csv
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, Union

import nibabel as nib
import numpy as np
import torch

__all__ = [
    "SamplingGrid",
    "ImageVolume",
    "LabelMap",
    "AffineTransform",
    "TransformChain",
    "ManifestRow",
    "load_volume",
    "save_volume",
    "sample",
    "sample_tensor",
    "trilinear",
    "compose_chain",
    "moment_affine_init",
    "read_affine",
    "write_affine",
    "read_manifest",
    "write_manifest",
    "interpolation_count",
]

_SNAP_TOL = 1e-9
_ORTHO_TOL = 1e-6
_GRID_TOL = 1e-6  # NIfTI headers store geometry in float32

_counter_lock = threading.Lock()
_interpolations = 0


def interpolation_count() -> int:
    """Number of interpolations of stored volume data performed so far."""
    return _interpolations


def _count_interpolation() -> None:
    global _interpolations
    with _counter_lock:
        _interpolations += 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SamplingGrid:
    """Voxel lattice placed in world space (mm).

    ``world = direction @ diag(spacing) @ index + origin``
    """

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        direction = np.asarray(self.direction, dtype=np.float64)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"grid shape must be three positive ints, got {self.shape}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if direction.shape != (3, 3):
            raise ValueError("direction must be a 3x3 matrix")
        if not np.allclose(direction.T @ direction, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("direction columns must be orthonormal")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", _readonly(direction))

    @classmethod
    def from_affine(cls, shape: Sequence[int], affine: np.ndarray) -> "SamplingGrid":
        affine = np.asarray(affine, dtype=np.float64)
        lin = affine[:3, :3]
        if abs(np.linalg.det(lin)) < 1e-12:
            raise ValueError("header geometry is not invertible")
        spacing = np.linalg.norm(lin, axis=0)
        direction = lin / spacing
        # float32 headers are orthonormal only to ~1e-7; project onto the nearest rotation
        if not np.allclose(direction.T @ direction, np.eye(3), atol=1e-4):
            raise ValueError("header direction cosines are not orthonormal (sheared geometry)")
        uu, _, vt = np.linalg.svd(direction)
        return cls(tuple(shape[:3]), tuple(spacing), uu @ vt, tuple(affine[:3, 3]))

    @property
    def affine(self) -> np.ndarray:
        """4x4 voxel-index to world matrix."""
        a = np.eye(4)
        a[:3, :3] = self.direction @ np.diag(self.spacing)
        a[:3, 3] = self.origin
        return a

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SamplingGrid):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=_GRID_TOL)
            and np.allclose(self.origin, other.origin, rtol=0, atol=_GRID_TOL)
            and np.allclose(self.direction, other.direction, rtol=0, atol=_GRID_TOL)
        )

    def __hash__(self):
        return hash((self.shape, tuple(np.round(self.spacing, 9)), tuple(np.round(self.origin, 9))))

    def index_grid(self, dtype=torch.float64) -> torch.Tensor:
        """All voxel indices, shape (X, Y, Z, 3)."""
        axes = [torch.arange(n, dtype=dtype) for n in self.shape]
        return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)

    def world_points(self, dtype=torch.float64) -> torch.Tensor:
        """World coordinates of every voxel centre, shape (X, Y, Z, 3)."""
        return self.index_to_world(self.index_grid(dtype))

    def index_to_world(self, idx):
        a = self.affine
        if isinstance(idx, torch.Tensor):
            m = torch.tensor(a[:3, :3], dtype=idx.dtype)
            t = torch.tensor(a[:3, 3], dtype=idx.dtype)
            return idx @ m.T + t
        idx = np.asarray(idx, dtype=np.float64)
        return idx @ a[:3, :3].T + a[:3, 3]

    def world_to_index(self, pts):
        inv = np.linalg.inv(self.affine)
        if isinstance(pts, torch.Tensor):
            m = torch.tensor(inv[:3, :3], dtype=pts.dtype)
            t = torch.tensor(inv[:3, 3], dtype=pts.dtype)
            return pts @ m.T + t
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ inv[:3, :3].T + inv[:3, 3]

    def downsample(self, factor: int = 2) -> "SamplingGrid":
        """Coarser grid sharing the origin; coarse index i sits on fine index factor*i."""
        shape = tuple((n - 1) // factor + 1 for n in self.shape)
        spacing = tuple(s * factor for s in self.spacing)
        return SamplingGrid(shape, spacing, self.direction, self.origin)

    def extent(self) -> np.ndarray:
        """Physical extent (mm) of the voxel box along each grid axis."""
        return np.asarray(self.shape) * np.asarray(self.spacing)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "direction": self.direction.tolist(),
            "origin": list(self.origin),
        }


@dataclass(frozen=True, eq=False)
class ImageVolume:
    data: np.ndarray
    grid: SamplingGrid
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"image data must be 3D, got shape {data.shape}")
        if tuple(data.shape) != self.grid.shape:
            raise ValueError(f"data shape {data.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "data", _readonly(data.astype(np.float64, copy=False)))


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    grid: SamplingGrid
    label_names: Mapping[int, str] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if tuple(data.shape) != self.grid.shape:
            raise ValueError(f"data shape {data.shape} does not match grid {self.grid.shape}")
        if data.dtype.kind == "f":
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise ValueError("label data must be integral")
        data = data.astype(np.int32)
        present = {int(v) for v in np.unique(data)}
        names = {int(k): str(v) for k, v in dict(self.label_names).items()}
        if not names:
            names = {v: ("Background" if v == 0 else f"label_{v}") for v in present}
        names.setdefault(0, "Background")
        missing = present - set(names)
        if missing:
            raise ValueError(f"labels {sorted(missing)} have no name")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "label_names", names)

    @property
    def labels(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.data))

    def mask(self, ids: int | Iterable[int]) -> np.ndarray:
        ids = [ids] if np.isscalar(ids) else list(ids)
        return np.isin(self.data, ids)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """World-to-world affine, subject space (mm) to atlas space (mm)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("last affine row must be [0, 0, 0, 1]")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("affine linear part is singular")
        object.__setattr__(self, "matrix", _readonly(m))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def translation(cls, t: Sequence[float]) -> "AffineTransform":
        m = np.eye(4)
        m[:3, 3] = t
        return cls(m)

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return AffineTransform(self.matrix @ other.matrix)

    def __call__(self, pts):
        m = self.matrix
        if isinstance(pts, torch.Tensor):
            lin = torch.tensor(m[:3, :3], dtype=pts.dtype)
            t = torch.tensor(m[:3, 3], dtype=pts.dtype)
            return pts @ lin.T + t
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ m[:3, :3].T + m[:3, 3]

    def is_identity(self, tol: float = 1e-12) -> bool:
        return bool(np.allclose(self.matrix, np.eye(4), rtol=0, atol=tol))


Part = Union[AffineTransform, Callable]


class TransformChain:
    """Ordered composition of point mappings; ``chain(x) = p0(p1(...pn(x)))``.

    Parts are applied right to left, like function composition.  Affine
    neighbours are folded into one matrix so the chain stays cheap.
    """

    def __init__(self, parts: Sequence[Part]):
        folded: list[Part] = []
        for p in parts:
            if isinstance(p, TransformChain):
                items = p.parts
            else:
                items = [p]
            for q in items:
                if isinstance(q, AffineTransform) and folded and isinstance(folded[-1], AffineTransform):
                    folded[-1] = folded[-1] @ q
                else:
                    folded.append(q)
        self.parts: list[Part] = [p for p in folded if not (isinstance(p, AffineTransform) and p.is_identity())]

    def __call__(self, pts):
        as_numpy = not isinstance(pts, torch.Tensor)
        x = torch.tensor(np.asarray(pts, dtype=np.float64)) if as_numpy else pts
        for p in reversed(self.parts):
            x = p(x)
        return x.detach().numpy() if as_numpy else x

    def __len__(self):
        return len(self.parts)

    def is_identity(self) -> bool:
        return not self.parts

    def __repr__(self):
        return f"TransformChain({[type(p).__name__ for p in self.parts]})"


def compose_chain(parts: Sequence[Part]) -> TransformChain:
    """Chain the given mappings; the first element is applied last."""
    if not parts:
        raise ValueError("compose_chain needs at least one part")
    return TransformChain(parts)


def _snap(idx: torch.Tensor) -> torch.Tensor:
    # exact integer positions keep identity sampling bitwise; gradient passes straight through
    r = torch.round(idx)
    near = (idx - r).abs() < _SNAP_TOL
    return idx + torch.where(near, r - idx, torch.zeros_like(idx)).detach()


def trilinear(data: torch.Tensor, idx: torch.Tensor, fill: float | None = None) -> torch.Tensor:
    """Trilinear lookup of ``data`` (C, X, Y, Z) at voxel coordinates ``idx`` (..., 3).

    With ``fill=None`` coordinates are clamped to the edge.  Otherwise points
    outside the voxel box ``[-0.5, n - 0.5]`` receive ``fill``; points inside
    the box but beyond the outermost centres use edge values.
    Returns (C, ...).
    """
    if data.dim() == 3:
        data = data[None]
    c = data.shape[0]
    dims = data.shape[1:]
    lead = idx.shape[:-1]
    idx = _snap(idx.reshape(-1, 3))
    if data.dtype != idx.dtype:
        idx = idx.to(data.dtype)
    hi = torch.tensor([n - 1 for n in dims], dtype=idx.dtype)
    outside = None
    if fill is not None:
        outside = ((idx < -0.5) | (idx > hi + 0.5)).any(dim=1)
    q = torch.minimum(torch.clamp(idx, min=0.0), hi)
    q0 = torch.floor(q)
    w1 = q - q0
    w0 = 1.0 - w1
    i0 = q0.long()
    i1 = torch.minimum(i0 + 1, hi.long())
    flat = data.reshape(c, -1)
    sy, sz = dims[1] * dims[2], dims[2]
    out = 0.0
    for cx, wx in ((i0[:, 0], w0[:, 0]), (i1[:, 0], w1[:, 0])):
        for cy, wy in ((i0[:, 1], w0[:, 1]), (i1[:, 1], w1[:, 1])):
            for cz, wz in ((i0[:, 2], w0[:, 2]), (i1[:, 2], w1[:, 2])):
                lin = cx * sy + cy * sz + cz
                out = out + flat[:, lin] * (wx * wy * wz)
    if outside is not None:
        out = torch.where(outside[None], torch.full_like(out, fill), out)
    return out.reshape(c, *lead)


def _nearest(data: np.ndarray, idx: np.ndarray, fill) -> np.ndarray:
    idx = np.where(np.abs(idx - np.round(idx)) < _SNAP_TOL, np.round(idx), idx)
    r = np.floor(idx + 0.5).astype(np.int64)
    hi = np.asarray(data.shape) - 1
    outside = np.any((idx < -0.5) | (idx > hi + 0.5), axis=-1)
    r = np.clip(r, 0, hi)
    out = data[r[..., 0], r[..., 1], r[..., 2]]
    return np.where(outside, fill, out)


def _world_box(grid: SamplingGrid) -> tuple[np.ndarray, np.ndarray]:
    corners = np.array(np.meshgrid(*[[-0.5, n - 0.5] for n in grid.shape], indexing="ij")).reshape(3, -1).T
    w = grid.index_to_world(corners)
    return w.min(axis=0), w.max(axis=0)


def _boxes_overlap(a: SamplingGrid, b: SamplingGrid) -> bool:
    lo_a, hi_a = _world_box(a)
    lo_b, hi_b = _world_box(b)
    return bool(np.all(lo_a <= hi_b) and np.all(lo_b <= hi_a))


def _mapped_index(source_grid: SamplingGrid, target_grid: SamplingGrid, transform) -> torch.Tensor:
    pts = target_grid.world_points()
    if transform is not None:
        pts = transform(pts)
    return source_grid.world_to_index(pts)


def sample(source: ImageVolume | LabelMap, target_grid: SamplingGrid, transform=None) -> np.ndarray:
    """Resample ``source`` on ``target_grid`` through a single interpolation.

    ``transform`` maps target world points into source world space (pull-back).
    Intensities use trilinear interpolation with zero fill, labels use nearest
    neighbour with background fill.
    """
    if transform is None or (isinstance(transform, TransformChain) and transform.is_identity()):
        if not _boxes_overlap(source.grid, target_grid):
            raise ValueError("empty transform chain between grids that do not overlap in world space")
    with torch.no_grad():
        idx = _mapped_index(source.grid, target_grid, transform)
    _count_interpolation()
    if isinstance(source, LabelMap):
        return _nearest(source.data, idx.numpy(), 0).astype(np.int32)
    out = trilinear(torch.tensor(source.data), idx, fill=0.0)
    return out[0].numpy()


def sample_tensor(
    data: torch.Tensor,
    source_grid: SamplingGrid,
    target_grid: SamplingGrid,
    transform=None,
    fill: float | None = 0.0,
) -> torch.Tensor:
    """Differentiable trilinear counterpart of :func:`sample` for (C, X, Y, Z) data."""
    idx = _mapped_index(source_grid, target_grid, transform)
    _count_interpolation()
    return trilinear(data, idx, fill=fill)


def load_volume(path: str | Path, kind: str = "intensity", label_names: Mapping[int, str] | None = None):
    """Read a NIfTI-1 file as an :class:`ImageVolume` or :class:`LabelMap`."""
    path = Path(path)
    if kind not in ("intensity", "label"):
        raise ValueError(f"kind must be 'intensity' or 'label', got {kind!r}")
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types for bad files
        raise ValueError(f"cannot read volume {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise ValueError(f"{path} is not a 3D volume (shape {data.shape})")
    grid = SamplingGrid.from_affine(data.shape, img.affine)
    case_id = path.name.split(".")[0]
    if kind == "label":
        names = label_names
        if names is None:
            names = _read_label_sidecar(path)
        return LabelMap(np.rint(data).astype(np.int32), grid, names or {}, id=case_id)
    return ImageVolume(np.asarray(data, dtype=np.float64), grid, id=case_id)


def nifti_stem(path: Path) -> str:
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return name


def _label_sidecar(path: Path) -> Path:
    return path.with_name(nifti_stem(path) + ".labels.tsv")


def save_nifti(img: nib.Nifti1Image, path: Path, description: str = "") -> None:
    """Atomic NIfTI write; ``description`` lands in the 80-byte header text field."""
    if description:
        img.header["descrip"] = description.encode()[:79]
    tmp = path.with_name(".tmp-" + path.name)
    nib.save(img, str(tmp))
    os.replace(tmp, path)


def _read_label_sidecar(path: Path) -> dict[int, str] | None:
    side = _label_sidecar(path)
    if not side.exists():
        return None
    names = {}
    with open(side, newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row and not row[0].startswith("#"):
                names[int(row[0])] = row[1]
    return names


def save_volume(vol: ImageVolume | LabelMap, path: str | Path, description: str = "") -> Path:
    """Write a volume as NIfTI-1; label maps also get a ``.labels.tsv`` name sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(vol, LabelMap):
        img = nib.Nifti1Image(np.asarray(vol.data, dtype=np.int32), vol.grid.affine)
        with open(_label_sidecar(path), "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for k in sorted(vol.label_names):
                w.writerow([k, vol.label_names[k]])
    else:
        img = nib.Nifti1Image(np.asarray(vol.data, dtype=np.float64), vol.grid.affine)
    img.header.set_qform(vol.grid.affine, code=1)
    img.header.set_sform(vol.grid.affine, code=1)
    save_nifti(img, path, description)
    return path


def read_affine(path: str | Path) -> AffineTransform:
    """4x4 row-major plain-text matrix, one row per line."""
    m = np.loadtxt(path, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"{path}: expected a 4x4 matrix, got shape {m.shape}")
    return AffineTransform(m)


def write_affine(aff: AffineTransform, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, aff.matrix, fmt="%.17g")
    return path


def moment_affine_init(subject: LabelMap, atlas: LabelMap) -> AffineTransform:
    """Affine (subject world -> atlas world) matching foreground centroids and second moments.

    The principal axes of each foreground are paired by rank of their
    variance, with axis signs chosen to keep the pairing closest to identity.
    """

    def moments(lm: LabelMap):
        fg = np.argwhere(lm.data > 0)
        if fg.size == 0:
            raise ValueError(f"label map {lm.id or ''} has an empty foreground")
        pts = lm.grid.index_to_world(fg.astype(np.float64))
        mu = pts.mean(axis=0)
        cov = np.cov((pts - mu).T, bias=True) + np.eye(3) * lm.grid.voxel_volume ** (2 / 3) / 12.0
        evals, evecs = np.linalg.eigh(cov)
        return mu, evals, evecs

    mu_s, ev_s, vec_s = moments(subject)
    mu_a, ev_a, vec_a = moments(atlas)
    # orient atlas axes toward subject axes so near-identity inputs give identity
    for k in range(3):
        if vec_a[:, k] @ vec_s[:, k] < 0:
            vec_a[:, k] = -vec_a[:, k]
    scale = np.sqrt(ev_a / ev_s)
    lin = vec_a @ np.diag(scale) @ vec_s.T
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = mu_a - lin @ mu_s
    return AffineTransform(m)


@dataclass(frozen=True)
class ManifestRow:
    case_id: str
    image: Path
    labels: Path
    tumour: Path | None
    affines: tuple[Path, ...]


MANIFEST_COLUMNS = ("case_id", "image", "labels", "tumour", "affine")


def uncommented(lines: Iterable[str]) -> Iterable[str]:
    """Skip ``#`` provenance lines in delimited text files."""
    return (ln for ln in lines if not ln.startswith("#"))


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """Tab-separated case table; several affine files may be joined with ``;``."""
    path = Path(path)
    base = path.parent
    rows = []

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    with open(path, newline="") as fh:
        for rec in csv.DictReader(uncommented(fh), delimiter="\t"):
            missing = [c for c in MANIFEST_COLUMNS if c not in rec]
            if missing:
                raise ValueError(f"{path}: manifest lacks columns {missing}")
            tumour = rec["tumour"].strip()
            aff = [a for a in rec["affine"].split(";") if a.strip()]
            rows.append(
                ManifestRow(
                    rec["case_id"],
                    resolve(rec["image"]),
                    resolve(rec["labels"]),
                    resolve(tumour) if tumour else None,
                    tuple(resolve(a.strip()) for a in aff),
                )
            )
    return rows


def write_manifest(rows: Iterable[ManifestRow], path: str | Path, header: str = "") -> Path:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path | None) -> str:
        if p is None:
            return ""
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.case_id, rel(r.image), rel(r.labels), rel(r.tumour), ";".join(rel(a) for a in r.affines)])
    return path
