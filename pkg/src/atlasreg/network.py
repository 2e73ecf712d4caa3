"""U-Net that maps a (subject, atlas) image pair to a stationary velocity field."""
from __future__ import annotations

import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .field import VelocityField
from .volumes import AffineTransform, ImageVolume, SamplingGrid, compose_chain, sample

__all__ = [
    "VelocityNet",
    "CheckpointError",
    "CheckpointVersionError",
    "CHECKPOINT_VERSION",
    "DEFAULT_NET_CONFIG",
    "prediction_grid",
    "network_inputs",
    "predict_velocity",
    "save_model",
    "load_model",
    "param_checksum",
    "config_hash",
]

CHECKPOINT_VERSION = 1
DEFAULT_NET_CONFIG = {"widths": [16, 32, 64], "kernel": 3, "negative_slope": 0.2, "grid_factor": 2}


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _block(cin: int, cout: int, k: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, k, padding=k // 2),
        nn.LeakyReLU(slope),
        nn.Conv3d(cout, cout, k, padding=k // 2),
        nn.LeakyReLU(slope),
    )


class VelocityNet(nn.Module):
    """Two-level U-Net: average-pool down, transposed-conv up, skips by summation.

    The output convolution starts at zero so an untrained net predicts the
    identity transform.
    """

    def __init__(self, config: dict | None = None):
        super().__init__()
        cfg = dict(DEFAULT_NET_CONFIG)
        cfg.update(config or {})
        self.config = cfg
        w0, w1, w2 = cfg["widths"]
        k, slope = cfg["kernel"], cfg["negative_slope"]
        self.enc0 = _block(2, w0, k, slope)
        self.enc1 = _block(w0, w1, k, slope)
        self.bottom = _block(w1, w2, k, slope)
        self.pool = nn.AvgPool3d(2)
        self.up1 = nn.ConvTranspose3d(w2, w1, 2, stride=2)
        self.dec1 = _block(w1, w1, k, slope)
        self.up0 = nn.ConvTranspose3d(w1, w0, 2, stride=2)
        self.dec0 = _block(w0, w0, k, slope)
        self.head = nn.Conv3d(w0, 3, k, padding=k // 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape[2:]
        pad = []
        for n in reversed(shape):
            extra = (-n) % 4
            pad += [extra // 2, extra - extra // 2]
        if any(pad):
            x = F.pad(x, pad, mode="replicate")
        e0 = self.enc0(x)
        e1 = self.enc1(self.pool(e0))
        b = self.bottom(self.pool(e1))
        d1 = self.dec1(self.up1(b) + e1)
        d0 = self.dec0(self.up0(d1) + e0)
        out = self.head(d0)
        if any(pad):
            lo = pad[::2][::-1]
            out = out[:, :, lo[0] : lo[0] + shape[0], lo[1] : lo[1] + shape[1], lo[2] : lo[2] + shape[2]]
        return out


def prediction_grid(atlas_grid: SamplingGrid, factor: int | None = None) -> SamplingGrid:
    return atlas_grid.downsample(factor or DEFAULT_NET_CONFIG["grid_factor"])


def _standardise(a: np.ndarray) -> np.ndarray:
    sd = a.std()
    return (a - a.mean()) / (sd if sd > 0 else 1.0)


def network_inputs(
    subject: ImageVolume, atlas: ImageVolume, grid: SamplingGrid, affine: AffineTransform | None = None
) -> torch.Tensor:
    """Two-channel input on ``grid``: subject pulled through the inverse affine, then atlas.

    Each channel is standardised to zero mean and unit variance here, at the
    network boundary; stored volumes are left untouched.
    """
    chain = compose_chain([affine.inverse()]) if affine is not None else None
    s = sample(subject, grid, chain)
    a = sample(atlas, grid, None)
    x = np.stack([_standardise(s), _standardise(a)])[None]
    return torch.from_numpy(x.astype(np.float32))


def predict_velocity(
    net: VelocityNet,
    subject: ImageVolume | torch.Tensor,
    atlas: ImageVolume | None = None,
    grid: SamplingGrid | None = None,
    affine: AffineTransform | None = None,
) -> VelocityField:
    """Velocity field (mm) on the prediction grid.

    ``subject`` may be a prepared input tensor from :func:`network_inputs`, in
    which case ``atlas`` is ignored and ``grid`` must be given.
    """
    if grid is None:
        raise ValueError("a prediction grid is required")
    x = subject if isinstance(subject, torch.Tensor) else network_inputs(subject, atlas, grid, affine)
    if tuple(x.shape[2:]) != grid.shape:
        raise ValueError(f"input shape {tuple(x.shape[2:])} does not match grid {grid.shape}")
    v = net(x)[0].to(torch.float64)
    return VelocityField(v, grid)


def param_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for k, t in sorted(net.state_dict().items()):
        h.update(k.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_model(net: VelocityNet, path: str | Path, **meta) -> Path:
    """Atomic checkpoint write (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "atlasreg.VelocityNet",
        "version": CHECKPOINT_VERSION,
        "config": net.config,
        "config_hash": config_hash(net.config),
        "checksum": param_checksum(net),
        "state_dict": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "meta": meta,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_model(path: str | Path) -> VelocityNet:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "atlasreg.VelocityNet":
        raise CheckpointError(f"{path} is not a VelocityNet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path} has checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    net = VelocityNet(payload["config"])
    net.load_state_dict(payload["state_dict"])
    if param_checksum(net) != payload["checksum"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    net.eval()
    return net
