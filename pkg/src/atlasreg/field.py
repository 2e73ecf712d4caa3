"""Stationary velocity fields and the dense transforms they generate.

Vectors are stored channel-first, shape (3, X, Y, Z), in world millimetres.
A displacement field ``u`` on grid ``g`` represents the point mapping
``x -> x + u(x)`` for world points ``x``; off-grid lookups are trilinear with
edge clamping.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import nibabel as nib
import numpy as np
import torch

from .volumes import SamplingGrid, nifti_stem, save_nifti, trilinear

__all__ = [
    "VelocityField",
    "DisplacementField",
    "integrate_svf",
    "auto_steps",
    "compose",
    "jacobian_determinant",
    "fraction_of_foldings",
    "upsample_velocity",
    "save_field",
    "load_field",
]

MAX_STEPS = 8


def _as_vector_tensor(values, grid: SamplingGrid) -> torch.Tensor:
    t = values if isinstance(values, torch.Tensor) else torch.tensor(np.asarray(values))
    if t.dtype != torch.float64:
        t = t.to(torch.float64)
    if tuple(t.shape) != (3, *grid.shape):
        raise ValueError(f"vector field shape {tuple(t.shape)} does not match (3, {grid.shape})")
    return t


@dataclass(frozen=True, eq=False)
class VelocityField:
    v: torch.Tensor
    grid: SamplingGrid

    def __post_init__(self):
        object.__setattr__(self, "v", _as_vector_tensor(self.v, self.grid))

    def __neg__(self) -> "VelocityField":
        return VelocityField(-self.v, self.grid)

    def scaled(self, factor: float) -> "VelocityField":
        return VelocityField(self.v * factor, self.grid)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    u: torch.Tensor
    grid: SamplingGrid

    def __post_init__(self):
        object.__setattr__(self, "u", _as_vector_tensor(self.u, self.grid))

    @classmethod
    def identity(cls, grid: SamplingGrid) -> "DisplacementField":
        return cls(torch.zeros((3, *grid.shape), dtype=torch.float64), grid)

    def lookup(self, pts: torch.Tensor) -> torch.Tensor:
        """Displacement at world points ``pts`` (..., 3) -> (..., 3)."""
        idx = self.grid.world_to_index(pts)
        d = trilinear(self.u, idx, fill=None)
        return torch.movedim(d, 0, -1)

    def __call__(self, pts):
        as_numpy = not isinstance(pts, torch.Tensor)
        x = torch.tensor(np.asarray(pts, dtype=np.float64)) if as_numpy else pts
        y = x + self.lookup(x)
        return y.detach().numpy() if as_numpy else y

    def detach(self) -> "DisplacementField":
        return DisplacementField(self.u.detach(), self.grid)

    def numpy(self) -> np.ndarray:
        return self.u.detach().numpy()


def auto_steps(v: VelocityField) -> int:
    """Smallest K with max|v| / 2**K below half the finest spacing, capped at 8."""
    vmax = float(torch.linalg.vector_norm(v.v.detach(), dim=0).max())
    if not math.isfinite(vmax):
        raise ValueError("velocity field contains non-finite values")
    limit = 0.5 * min(v.grid.spacing)
    if vmax < limit:
        return 0
    return min(MAX_STEPS, int(math.floor(math.log2(vmax / limit))) + 1)


def _exp(v: VelocityField, steps: int) -> DisplacementField:
    u = DisplacementField(v.v / (2.0**steps), v.grid)
    for _ in range(steps):
        u = compose(u, u)
    return u


def integrate_svf(v: VelocityField, steps: int | str = "auto") -> tuple[DisplacementField, DisplacementField]:
    """Exponentiate ``v`` and ``-v`` by scaling and squaring.

    Returns the forward and inverse displacement fields; both stay on the
    autograd graph of ``v``.
    """
    if not torch.isfinite(v.v).all():
        raise ValueError("velocity field contains non-finite values")
    k = auto_steps(v) if steps == "auto" else int(steps)
    if k < 0:
        raise ValueError("steps must be non-negative")
    return _exp(v, k), _exp(-v, k)


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Displacement of ``outer o inner``: ``inner(x) + outer(x + inner(x))``."""
    if outer.grid != inner.grid:
        raise ValueError("cannot compose fields on different grids")
    g = inner.grid
    idx = g.index_grid()
    step = torch.movedim(inner.u, 0, -1)
    inv = torch.tensor(np.linalg.inv(g.affine)[:3, :3], dtype=step.dtype)
    moved = trilinear(outer.u, idx + step @ inv.T, fill=None)
    return DisplacementField(inner.u + moved, g)


def _spatial_jacobian(u: torch.Tensor, grid: SamplingGrid) -> torch.Tensor:
    """Full Jacobian I + du/dx, shape (X, Y, Z, 3, 3), central differences inside."""
    grads = []
    for k in range(3):
        if u.shape[k + 1] < 2:
            grads.append(torch.zeros_like(u))
        else:
            grads.append(torch.gradient(u, dim=k + 1, edge_order=1)[0])
    g_idx = torch.stack(grads, dim=-1)  # (3, X, Y, Z, 3): d u_i / d idx_k
    g_idx = torch.movedim(g_idx, 0, -2)  # (X, Y, Z, 3, 3)
    inv = torch.tensor(np.linalg.inv(grid.affine[:3, :3]), dtype=u.dtype)
    return torch.eye(3, dtype=u.dtype) + g_idx @ inv


def jacobian_determinant(T: DisplacementField) -> torch.Tensor:
    j = _spatial_jacobian(T.u, T.grid)
    a, b, c = j[..., 0, 0], j[..., 0, 1], j[..., 0, 2]
    d, e, f = j[..., 1, 0], j[..., 1, 1], j[..., 1, 2]
    g, h, i = j[..., 2, 0], j[..., 2, 1], j[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def fraction_of_foldings(T: DisplacementField) -> float:
    """Share of voxels with a non-positive Jacobian determinant."""
    with torch.no_grad():
        det = jacobian_determinant(T)
    return float((det <= 0).double().mean())


def upsample_velocity(v: VelocityField, grid: SamplingGrid) -> VelocityField:
    """Trilinear resampling of a (coarse) velocity field onto ``grid``."""
    if v.grid == grid:
        return v
    idx = v.grid.world_to_index(grid.world_points())
    return VelocityField(trilinear(v.v, idx, fill=None), grid)


def save_field(f: VelocityField | DisplacementField, path: str | Path, description: str = "") -> Path:
    """4D NIfTI (X, Y, Z, 3) in world millimetres plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = (f.v if isinstance(f, VelocityField) else f.u).detach().numpy()
    img = nib.Nifti1Image(np.ascontiguousarray(np.moveaxis(data, 0, -1)), f.grid.affine)
    img.header.set_intent("vector")
    save_nifti(img, path, description)
    side = {
        "kind": "velocity" if isinstance(f, VelocityField) else "displacement",
        "units": "mm",
        "frame": "world",
        "convention": "point x maps to x + u(x)",
    }
    path.with_name(nifti_stem(path) + ".field.json").write_text(json.dumps(side, indent=2))
    return path


def load_field(path: str | Path) -> VelocityField | DisplacementField:
    path = Path(path)
    img = nib.load(str(path))
    data = np.asarray(img.dataobj, dtype=np.float64)
    if data.ndim != 4 or data.shape[3] != 3:
        raise ValueError(f"{path} is not a 3-component vector field")
    grid = SamplingGrid.from_affine(data.shape[:3], img.affine)
    vec = torch.from_numpy(np.ascontiguousarray(np.moveaxis(data, -1, 0)))
    side = path.with_name(nifti_stem(path) + ".field.json")
    kind = json.loads(side.read_text())["kind"] if side.exists() else "displacement"
    return VelocityField(vec, grid) if kind == "velocity" else DisplacementField(vec, grid)
