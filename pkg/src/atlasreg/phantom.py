"""Synthetic atlas/subject phantoms with known ground-truth transforms."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from scipy import ndimage

from .field import DisplacementField, VelocityField, fraction_of_foldings, integrate_svf
from .volumes import ImageVolume, LabelMap, SamplingGrid, trilinear

__all__ = [
    "PhantomSpec",
    "PhantomSubject",
    "CollapseToy",
    "make_atlas",
    "make_subject",
    "make_collapse_toy",
    "phantom_label_names",
    "TUMOUR_INTENSITY",
]

TUMOUR_INTENSITY = 1.6
_MIN_SHELL_VOXELS = 2.0
_NOISE_STD = 0.03


@dataclass(frozen=True)
class PhantomSpec:
    grid: SamplingGrid = field(default_factory=lambda: SamplingGrid((48, 48, 48)))
    n_labels: int = 3
    deform_amplitude: float = 4.0
    deform_smoothness: float = 8.0
    tumour_radius: float | None = None
    seed: int = 0


class PhantomSubject(NamedTuple):
    image: ImageVolume
    labels: LabelMap
    tumour: LabelMap | None
    ground_truth: tuple[DisplacementField, DisplacementField]


def phantom_label_names(n_labels: int) -> dict[int, str]:
    base = {0: "Background", 1: "Cortex", 2: "White Matter", 3: "Ventricle"}
    return {k: base.get(k, f"Shell {k}") for k in range(n_labels + 1)}


def _label_intensity(n_labels: int) -> np.ndarray:
    vals = [0.0, 0.6, 1.0, 0.25]
    vals += [0.4 + 0.5 * ((k * 0.618) % 1.0) for k in range(4, n_labels + 1)]
    return np.asarray(vals[: n_labels + 1])


def _shell_fractions(n: int) -> np.ndarray:
    # outer radii with strictly decreasing shell volumes toward the centre
    return np.sqrt(1.0 - np.arange(n) / n)


def _geometry(grid: SamplingGrid):
    ext = grid.extent()
    semi = 0.42 * ext * np.array([1.0, 0.92, 0.85])
    centre = grid.index_to_world((np.asarray(grid.shape) - 1) / 2.0)
    return centre, semi


def _label_fn(spec: PhantomSpec, pts: np.ndarray) -> np.ndarray:
    """Continuous nested-shell label function evaluated at world points (..., 3)."""
    centre, semi = _geometry(spec.grid)
    d = (pts - centre) @ spec.grid.direction  # grid-aligned frame
    q = d / semi
    rho = np.linalg.norm(q, axis=-1)
    az = np.arctan2(q[..., 1], q[..., 0])
    pol = np.arccos(np.clip(q[..., 2] / np.maximum(rho, 1e-12), -1, 1))
    rho_mod = rho / (1.0 + 0.06 * np.sin(4 * az) * np.sin(3 * pol))
    fr = _shell_fractions(spec.n_labels)
    lab = np.zeros(rho.shape, dtype=np.int32)
    for k, f in enumerate(fr, start=1):
        lab[rho_mod < f] = k
    return lab


def _check_spec(spec: PhantomSpec) -> None:
    if spec.n_labels < 2:
        raise ValueError("a phantom needs at least two labels")
    _, semi = _geometry(spec.grid)
    fr = np.append(_shell_fractions(spec.n_labels), 0.0)
    thick = np.diff(-fr).min() * semi.min() * 0.94  # modulation narrows shells by up to ~6%
    if thick < _MIN_SHELL_VOXELS * max(spec.grid.spacing):
        raise ValueError(f"grid {spec.grid.shape} too small for {spec.n_labels} shells")


def _smooth_noise(shape, sigma_vox, rng, std) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_vox, mode="nearest")
    return n * (std / max(n.std(), 1e-12))


def make_atlas(spec: PhantomSpec) -> tuple[ImageVolume, LabelMap]:
    """Nested ellipsoidal shells (label 1 outermost) with smooth intensity texture."""
    _check_spec(spec)
    g = spec.grid
    labels = _label_fn(spec, g.world_points().numpy())
    rng = np.random.default_rng([spec.seed, 0])
    noise = _smooth_noise(g.shape, 2.0, rng, _NOISE_STD) * (labels > 0)
    img = _label_intensity(spec.n_labels)[labels] + noise
    return (
        ImageVolume(img, g, id="atlas"),
        LabelMap(labels, g, phantom_label_names(spec.n_labels), id="atlas"),
    )


def _face_taper(grid: SamplingGrid, margin: float) -> np.ndarray:
    """Smooth window: 0 on the outermost voxels, 1 beyond ``margin`` mm from every face."""
    w = np.ones(grid.shape)
    for k, (n, s) in enumerate(zip(grid.shape, grid.spacing)):
        i = np.arange(n, dtype=np.float64)
        t = np.clip(np.minimum(i, n - 1 - i) * s / margin, 0.0, 1.0)
        shape = [1, 1, 1]
        shape[k] = n
        w = w * (t * t * (3 - 2 * t)).reshape(shape)
    return w


def random_velocity(grid: SamplingGrid, amplitude: float, smoothness: float, rng) -> VelocityField:
    """Band-limited random SVF scaled to a maximum vector length of ``amplitude`` mm.

    The field fades to zero at the grid faces so the field of view itself
    does not move; otherwise background distances, which are measured to the
    grid faces, would disagree between atlas and subject.
    """
    if amplitude == 0:
        return VelocityField(torch.zeros((3, *grid.shape), dtype=torch.float64), grid)
    sigma = [smoothness / s for s in grid.spacing]
    comps = [ndimage.gaussian_filter(rng.standard_normal(grid.shape), sigma, mode="wrap") for _ in range(3)]
    v = np.stack(comps) * _face_taper(grid, smoothness)
    v *= amplitude / np.linalg.norm(v, axis=0).max()
    return VelocityField(torch.from_numpy(v), grid)


def make_subject(atlas: tuple[ImageVolume, LabelMap], spec: PhantomSpec) -> PhantomSubject:
    """Deform the atlas by a random diffeomorphism and optionally insert a tumour.

    ``ground_truth = (T, T_inv)`` follows the registration convention: the
    subject pulled back through ``T`` reproduces the atlas.
    """
    atlas_img, atlas_lab = atlas
    g = atlas_lab.grid
    if g != spec.grid:
        raise ValueError("atlas grid does not match the phantom spec")
    rng = np.random.default_rng([spec.seed, 1])
    v = random_velocity(g, spec.deform_amplitude, spec.deform_smoothness, rng)
    with torch.no_grad():
        T, T_inv = integrate_svf(v)
    if fraction_of_foldings(T) > 0 or fraction_of_foldings(T_inv) > 0:
        raise ValueError("generated deformation folds; lower the amplitude or raise the smoothness")
    pts = g.world_points()
    src = T_inv(pts)  # subject voxel -> atlas point
    labels = _label_fn(spec, src.numpy())
    noise = np.asarray(atlas_img.data) - _label_intensity(spec.n_labels)[np.asarray(atlas_lab.data)]
    noise_w = trilinear(torch.from_numpy(noise), g.world_to_index(src), fill=0.0)[0].numpy()
    img = _label_intensity(spec.n_labels)[labels] + noise_w * (labels > 0)

    tumour = None
    if spec.tumour_radius:
        mask = _place_tumour(spec, labels, rng)
        labels = np.where(mask, 0, labels)
        img = np.where(mask, TUMOUR_INTENSITY, img)
        tumour = LabelMap(mask.astype(np.int32), g, {0: "Background", 1: "Tumour"}, id=f"s{spec.seed}")
    return PhantomSubject(
        ImageVolume(img, g, id=f"s{spec.seed}"),
        LabelMap(labels, g, atlas_lab.label_names, id=f"s{spec.seed}"),
        tumour,
        (T, T_inv),
    )


def _place_tumour(spec: PhantomSpec, labels: np.ndarray, rng) -> np.ndarray:
    g = spec.grid
    _, semi = _geometry(g)
    inner = _shell_fractions(spec.n_labels)[-1] * semi.min()
    r = float(spec.tumour_radius)
    if r > inner:
        raise ValueError(f"tumour radius {r} mm exceeds the innermost shell ({inner:.1f} mm)")
    fg = labels > 0
    # voxels whose ball of radius r+1 stays inside the foreground
    depth = ndimage.distance_transform_edt(np.pad(fg, 1), sampling=g.spacing)[1:-1, 1:-1, 1:-1]
    ok = np.argwhere(depth > r + max(g.spacing))
    if len(ok) == 0:
        raise ValueError("no room for a tumour of this radius")
    centre_idx = ok[rng.integers(len(ok))]
    centre = g.index_to_world(centre_idx.astype(np.float64))
    dist = np.linalg.norm(g.world_points().numpy() - centre, axis=-1)
    return dist <= r


@dataclass(frozen=True, eq=False)
class CollapseToy:
    atlas: LabelMap
    subject: LabelMap
    tumour: LabelMap
    preserve: tuple[DisplacementField, DisplacementField]
    collapse: tuple[DisplacementField, DisplacementField]


def _radial_bump(r: np.ndarray, strength: float, support: float) -> np.ndarray:
    t = np.clip(r / support, 0.0, 1.0) ** 2
    return r * (1.0 + strength * (1.0 - t) ** 2)


def _invert_radial(s: np.ndarray, strength: float, support: float) -> np.ndarray:
    lo = np.zeros_like(s)
    hi = np.array(s, copy=True)  # the map only expands, so the preimage radius is <= s
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        too_far = _radial_bump(mid, strength, support) > s
        hi = np.where(too_far, mid, hi)
        lo = np.where(too_far, lo, mid)
    return 0.5 * (lo + hi)


def make_collapse_toy(
    size: int = 40, tumour_radius: float = 3.0, strength: float = 1.2, support: float = 5.0
) -> CollapseToy:
    """Two-label scene with a tumour absent from the atlas and two candidate transforms.

    The preserving pair is the identity.  The collapsing pair pulls a small
    atlas ball onto the whole subject tumour via a compact radial expansion,
    so the tumour occupies little atlas volume after registration.
    """
    if strength >= 1.25:
        raise ValueError("strength >= 1.25 makes the radial map fold")
    g = SamplingGrid((size, size, size))
    pts = g.world_points().numpy()
    c = np.full(3, (size - 1) / 2.0)
    r_c = np.linalg.norm(pts - c, axis=-1)
    outer, inner = 0.45 * size, 0.125 * size
    atlas = np.where(r_c < outer, 1, 0)
    atlas = np.where(r_c < inner, 2, atlas)
    names = {0: "Background", 1: "Outer", 2: "Inner"}
    tc = c + np.array([0.5 * (outer + inner), 0.0, 0.0])
    d = pts - tc
    r_t = np.linalg.norm(d, axis=-1)
    tumour = r_t <= tumour_radius
    subject = np.where(tumour, 0, atlas)

    with np.errstate(invalid="ignore", divide="ignore"):
        fwd = np.where(r_t[..., None] > 0, d * (_radial_bump(r_t, strength, support) / np.maximum(r_t, 1e-12) - 1.0)[..., None], 0.0)
        pre = _invert_radial(r_t, strength, support)
        inv = np.where(r_t[..., None] > 0, d * (pre / np.maximum(r_t, 1e-12) - 1.0)[..., None], 0.0)
    to_field = lambda a: DisplacementField(torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, -1, 0))), g)  # noqa: E731
    ident = DisplacementField.identity(g)
    return CollapseToy(
        atlas=LabelMap(atlas, g, names, id="toy-atlas"),
        subject=LabelMap(subject, g, names, id="toy-subject"),
        tumour=LabelMap(tumour.astype(np.int32), g, {0: "Background", 1: "Tumour"}, id="toy-tumour"),
        preserve=(ident, ident),
        collapse=(to_field(fwd), to_field(inv)),
    )
