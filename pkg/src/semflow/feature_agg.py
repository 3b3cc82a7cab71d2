"""Image encoders, projection, bilinear sampling and flow-feature assembly.

A pixel coordinate ``u`` maps to feature coordinate ``(u + 0.5) / stride - 0.5``
on a map of the given stride, so that texel centers line up with the pixel
footprint they summarize.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .diffcore import ParamBlock, ShapeError, _uniform, embed_dim, sinusoidal_embed

ENCODER_CHANNELS = (16, 32, 32)
DISP_MODES = ("delta", "absolute", "both")


@dataclass
class FrameStack:
    """Frames and cameras of one scene as tensors."""

    images: torch.Tensor      # (N, 3, H, W)
    R: torch.Tensor           # (N, 3, 3)
    T: torch.Tensor           # (N, 3)
    K: torch.Tensor           # (N, 4): fx, fy, cx, cy
    box_min: torch.Tensor
    box_max: torch.Tensor

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    @classmethod
    def from_scene(cls, scene, dtype=torch.float32) -> "FrameStack":
        imgs = torch.from_numpy(np.ascontiguousarray(scene.frames.transpose(0, 3, 1, 2))).to(dtype)
        R = torch.tensor(np.stack([p.rotation for p in scene.poses]), dtype=dtype)
        T = torch.tensor(np.stack([p.translation for p in scene.poses]), dtype=dtype)
        K = torch.tensor([[p.fx, p.fy, p.cx, p.cy] for p in scene.poses], dtype=dtype)
        return cls(imgs, R, T, K, torch.tensor(scene.box_min, dtype=dtype), torch.tensor(scene.box_max, dtype=dtype))

    def project(self, frame: torch.Tensor, x: torch.Tensor):
        """Project points ``x (..., 3)`` with the camera of ``frame`` (broadcast to ``x.shape[:-1]``)."""
        # index cameras with the unexpanded frame tensor and let broadcasting do the rest
        return project(self.R[frame], self.T[frame], self.K[frame], x)

    def normalize_position(self, x: torch.Tensor) -> torch.Tensor:
        center = (self.box_min + self.box_max) / 2
        half = (self.box_max - self.box_min) / 2
        return (x - center) / half

    def normalize_time(self, t: torch.Tensor) -> torch.Tensor:
        n = max(self.n_frames - 1, 1)
        return t.to(self.images.dtype) / n * 2.0 - 1.0

    def clamp_to_box(self, x: torch.Tensor):
        inside = ((x >= self.box_min) & (x <= self.box_max)).all(-1)
        return torch.maximum(torch.minimum(x, self.box_max), self.box_min), ~inside


def project(R: torch.Tensor, T: torch.Tensor, K: torch.Tensor, x: torch.Tensor, eps: float = 1e-6):
    """Pinhole projection.

    Returns ``(uv, z, in_front)``; ``uv`` is computed with ``z`` clamped to
    ``eps`` so behind-camera points stay finite and must be masked by the
    caller via ``in_front``.
    """
    xc = (R * x.unsqueeze(-2)).sum(-1) + T
    z = xc[..., 2]
    in_front = z > eps
    zs = torch.where(in_front, z, torch.full_like(z, eps))
    u = K[..., 0] * xc[..., 0] / zs + K[..., 2]
    v = K[..., 1] * xc[..., 1] / zs + K[..., 3]
    return torch.stack([u, v], -1), z, in_front


def unproject(R, T, K, uv, z):
    xc = torch.stack([(uv[..., 0] - K[..., 2]) / K[..., 0] * z, (uv[..., 1] - K[..., 3]) / K[..., 1] * z, z], -1)
    return (R.transpose(-1, -2) @ (xc - T).unsqueeze(-1)).squeeze(-1)


def _bilinear_taps(uv, stride, h, w):
    """Flat texel offsets ``(..., 4)`` and blend weights ``(..., 4)`` on an ``h x w`` grid."""
    x = ((uv[..., 0] + 0.5) / stride - 0.5).clamp(0, w - 1)
    y = ((uv[..., 1] + 0.5) / stride - 0.5).clamp(0, h - 1)
    x0 = torch.floor(x.detach()).clamp(0, max(w - 2, 0))
    y0 = torch.floor(y.detach()).clamp(0, max(h - 2, 0))
    wx, wy = x - x0, y - y0
    x0 = x0.long(); y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1); y1 = (y0 + 1).clamp(max=h - 1)
    idx = torch.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], -1)
    wts = torch.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], -1)
    return idx, wts


def bilinear_sample(fmap: torch.Tensor, uv: torch.Tensor, stride: float = 1.0,
                    frame: torch.Tensor | None = None) -> torch.Tensor:
    """Sample ``fmap`` at pixel coordinates ``uv (..., 2)``.

    ``fmap`` is ``(C, h, w)`` or ``(N, C, h, w)`` with ``frame`` selecting the
    map per point. Coordinates outside the map clamp to the border.
    """
    if fmap.dim() == 3:
        fmap = fmap.unsqueeze(0)
        frame = None
    N, C, h, w = fmap.shape
    if frame is None:
        frame = torch.zeros(uv.shape[:-1], dtype=torch.long)
    idx, wts = _bilinear_taps(uv, stride, h, w)
    flat = fmap.permute(0, 2, 3, 1).reshape(N * h * w, C)
    taps = flat[idx + (frame * (h * w)).unsqueeze(-1)]
    return (wts.unsqueeze(-1) * taps).sum(-2)


# --------------------------------------------------------------------------- encoders

def make_encoder(name: str, feature_dim: int, gen: torch.Generator, channels=ENCODER_CHANNELS) -> ParamBlock:
    """Three stride-2 3x3 conv layers plus one affine fusing all levels."""
    p = ParamBlock(name)
    c_in = 3
    for k, c in enumerate(channels):
        bound = 1.0 / np.sqrt(c_in * 9)
        p.add(f"conv{k}.W", _uniform((c, c_in, 3, 3), bound, gen))
        p.add(f"conv{k}.b", _uniform((c,), bound, gen))
        c_in = c
    total = sum(channels)
    bound = 1.0 / np.sqrt(total)
    p.add("fuse.W", _uniform((total, feature_dim), bound, gen))
    p.add("fuse.b", _uniform((feature_dim,), bound, gen))
    return p


@dataclass
class FeatureMaps:
    """Fused per-frame feature map ``(N, D, h, w)`` at a fixed stride."""

    fused: torch.Tensor
    stride: float

    def __post_init__(self):
        N, D, h, w = self.fused.shape
        self.table = self.fused.permute(0, 2, 3, 1).reshape(N * h * w, D)

    def sample(self, frame: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
        h, w = self.fused.shape[-2:]
        idx, wts = _bilinear_taps(uv, self.stride, h, w)
        taps = self.table[idx + (frame * (h * w)).unsqueeze(-1)]
        return (wts.unsqueeze(-1) * taps).sum(-2)


def encode(params: ParamBlock, images: torch.Tensor) -> FeatureMaps:
    """Run the encoder over ``images (N, 3, H, W)``.

    Level ``k`` has stride ``2**(k+1)``. Every level is projected by its
    slice of the fusing affine, the coarser ones are bilinearly upsampled to
    the stride-2 grid, and the sum plus bias forms a single map. Lookups then
    read 4 texels instead of 4 per level.
    """
    x = images * 2.0 - 1.0
    W = params["fuse.W"]
    fused, offset, k = None, 0, 0
    while f"conv{k}.W" in params:
        x = torch.relu(F.conv2d(x, params[f"conv{k}.W"], params[f"conv{k}.b"], stride=2, padding=1))
        c = x.shape[1]
        level = torch.einsum("nchw,cd->ndhw", x, W[offset:offset + c])
        if fused is None:
            fused = level
        else:
            fused = fused + F.interpolate(level, size=fused.shape[-2:], mode="bilinear", align_corners=False)
        offset += c
        k += 1
    if offset != W.shape[0]:
        raise ShapeError(f"{params.name}: fuse layer expects {W.shape[0]} channels, encoder produced {offset}")
    return FeatureMaps(fused + params["fuse.b"].view(1, -1, 1, 1), 2.0)


def point_features(maps: FeatureMaps, stack: FrameStack, frame: torch.Tensor, x: torch.Tensor):
    """Project ``x`` into ``frame`` and sample its feature; returns (features, in_front)."""
    uv, _, ok = stack.project(frame, x)
    return maps.sample(frame, uv), ok


# --------------------------------------------------------------------------- flow features

def displacement_dim(mode: str, disp_freqs: int = 4, pos_freqs: int = 10) -> int:
    if mode not in DISP_MODES:
        raise ValueError(f"unknown displacement mode {mode!r}")
    d = embed_dim(4, disp_freqs) if mode in ("delta", "both") else 0
    a = embed_dim(4, pos_freqs) if mode in ("absolute", "both") else 0
    return d + a


def embed_displacement(positions: torch.Tensor, times: torch.Tensor, anchor_index: int, stack: FrameStack,
                       mode: str, disp_scale: float, disp_freqs: int = 4, pos_freqs: int = 10) -> torch.Tensor:
    """Embedding of trajectory rows.

    ``delta``: ``gamma((Phi_tau - Phi_t) / disp_scale, tau - t)``;
    ``absolute``: ``gamma(normalized Phi_tau, normalized tau)``;
    ``both``: the two concatenated.
    """
    parts = []
    if mode in ("delta", "both"):
        dx = (positions - positions[..., anchor_index:anchor_index + 1, :]) / disp_scale
        dt = (times - times[..., anchor_index:anchor_index + 1]).to(positions.dtype).unsqueeze(-1)
        parts.append(sinusoidal_embed(torch.cat([dx, dt], -1), disp_freqs))
    if mode in ("absolute", "both"):
        xa = stack.normalize_position(positions)
        ta = stack.normalize_time(times).unsqueeze(-1)
        parts.append(sinusoidal_embed(torch.cat([xa, ta], -1), pos_freqs))
    if not parts:
        raise ValueError(f"unknown displacement mode {mode!r}")
    return torch.cat(parts, -1)


def assemble_flow_features(row_features: torch.Tensor, positions: torch.Tensor, times: torch.Tensor,
                           valid: torch.Tensor, anchor_index: int, stack: FrameStack, mode: str,
                           disp_scale: float, disp_freqs: int = 4, pos_freqs: int = 10) -> torch.Tensor:
    """Rows ``[point feature at (Phi_tau, tau), gamma(displacement)]``; invalid rows are zero."""
    emb = embed_displacement(positions, times, anchor_index, stack, mode, disp_scale, disp_freqs, pos_freqs)
    F_rows = torch.cat([row_features, emb], -1)
    return F_rows * valid.unsqueeze(-1).to(F_rows.dtype)


# --------------------------------------------------------------------------- static features

def choose_static_frames(n_frames: int, exclude: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniformly pick one frame per entry of ``exclude``, never the excluded one when n > 1."""
    exclude = torch.as_tensor(exclude, dtype=torch.long)
    if n_frames == 1:
        return torch.zeros_like(exclude)
    r = torch.randint(0, n_frames - 1, exclude.shape, generator=generator)
    return r + (r >= exclude).long()


def sample_static_feature(maps: FeatureMaps, stack: FrameStack, x: torch.Tensor, exclude: torch.Tensor,
                          generator: torch.Generator | None = None, frames: torch.Tensor | None = None):
    """Feature of each point from one randomly chosen frame per ray.

    ``x`` is ``(B, M, 3)`` and ``exclude`` ``(B,)``. Returns
    ``(features (B, M, D), chosen frames (B,), in_front (B, M))``.
    """
    if frames is None:
        frames = choose_static_frames(stack.n_frames, exclude, generator)
    feats, ok = point_features(maps, stack, frames.view(-1, *([1] * (x.dim() - 2))), x)
    return feats, frames, ok
