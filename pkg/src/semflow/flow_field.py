"""Implicit flow field: per-point motion, trajectory chaining and flow rendering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .diffcore import ParamBlock, embed_dim, make_residual_mlp, residual_mlp, sinusoidal_embed
from .feature_agg import FrameStack


@dataclass
class FlowConfig:
    width: int = 128
    blocks: int = 4
    max_step: float = 0.1
    pos_freqs: int = 10
    time_freqs: int = 4
    normalize_weights: bool = True


def flow_input_dim(feature_dim: int, cfg: FlowConfig) -> int:
    return feature_dim + embed_dim(3, cfg.pos_freqs) + embed_dim(1, cfg.time_freqs)


def make_flow_field(feature_dim: int, cfg: FlowConfig, gen: torch.Generator) -> ParamBlock:
    return make_residual_mlp("flow", flow_input_dim(feature_dim, cfg), cfg.width, cfg.blocks, 6, gen)


def flow_step(params: ParamBlock, feature: torch.Tensor, x: torch.Tensor, t: torch.Tensor,
              stack: FrameStack, cfg: FlowConfig, x_embed: torch.Tensor | None = None,
              t_embed: torch.Tensor | None = None):
    """Positions one frame back and one frame ahead of ``x`` at time ``t``.

    The network outputs displacements, squashed by ``tanh`` and scaled by
    ``cfg.max_step``; zero weights therefore give the identity motion.
    """
    if not torch.isfinite(x).all():
        raise FloatingPointError("non-finite position passed to flow_step")
    if x_embed is None:
        x_embed = sinusoidal_embed(stack.normalize_position(x), cfg.pos_freqs)
    if t_embed is None:
        t_embed = sinusoidal_embed(stack.normalize_time(t).unsqueeze(-1), cfg.time_freqs)
    t_embed = t_embed.expand(*x.shape[:-1], t_embed.shape[-1])
    raw = residual_mlp(params, torch.cat([feature, x_embed, t_embed], -1), cfg.width, cfg.blocks)
    offsets = torch.tanh(raw) * cfg.max_step
    return x + offsets[..., :3], x + offsets[..., 3:]


@dataclass
class Trajectory:
    """Positions of one point (batched) over frames ``t-W .. t+W``.

    ``positions[..., W, :]`` is the query point itself. Rows whose frame falls
    outside the video are marked invalid; their positions are carried along
    but must not be used.
    """

    positions: torch.Tensor   # (..., 2W+1, 3)
    times: torch.Tensor       # (..., 2W+1) long
    valid: torch.Tensor       # (..., 2W+1) bool
    features: torch.Tensor    # (..., 2W+1, D) point features sampled at each row
    in_front: torch.Tensor    # (..., 2W+1) bool, projection succeeded
    out_of_box: torch.Tensor  # (...) bool, chain was clamped
    window: int

    @property
    def anchor_index(self) -> int:
        return self.window

    @property
    def anchor_time(self) -> torch.Tensor:
        return self.times[..., self.window]

    def row(self, offset: int) -> torch.Tensor:
        return self.positions[..., self.window + offset, :]


FeatureFn = Callable[[torch.Tensor, torch.Tensor], tuple]


def build_trajectory(params: ParamBlock, features_fn: FeatureFn, x: torch.Tensor, t: torch.Tensor,
                     window: int, stack: FrameStack, cfg: FlowConfig,
                     anchor_feature: torch.Tensor | None = None, x_embed: torch.Tensor | None = None,
                     anchor_ok: torch.Tensor | None = None) -> Trajectory:
    """Chain :func:`flow_step` outward from ``(x, t)`` for ``window`` frames each way.

    ``features_fn(points, frames)`` returns ``(features, in_front)`` for
    points observed in the given frames; it is re-queried at every predicted
    position. ``t`` broadcasts against ``x.shape[:-1]``.
    """
    if window < 0:
        raise ValueError("window must be >= 0")
    t = t.expand(x.shape[:-1])
    N = stack.n_frames
    if anchor_feature is None:
        anchor_feature, anchor_ok = features_fn(x, t)
    elif anchor_ok is None:
        anchor_ok = torch.ones(x.shape[:-1], dtype=torch.bool)
    pos = {0: x}
    feat = {0: anchor_feature}
    ok = {0: anchor_ok}
    oob = torch.zeros(x.shape[:-1], dtype=torch.bool)
    if window > 0:
        prev, nxt = flow_step(params, anchor_feature, x, t, stack, cfg, x_embed=x_embed)
        for r, p in ((-1, prev), (1, nxt)):
            pos[r], flag = stack.clamp_to_box(p)
            oob |= flag
        for direction in (-1, 1):
            for r in range(1, window + 1):
                off = direction * r
                if r > 1:
                    src = off - direction
                    src_t = (t + src).clamp(0, N - 1)
                    back, ahead = flow_step(params, feat[src], pos[src], src_t, stack, cfg)
                    pos[off], flag = stack.clamp_to_box(ahead if direction > 0 else back)
                    oob |= flag
                feat[off], ok[off] = features_fn(pos[off], (t + off).clamp(0, N - 1))
    offsets = range(-window, window + 1)
    times = torch.stack([t + o for o in offsets], -1)
    valid = (times >= 0) & (times < N)
    return Trajectory(
        positions=torch.stack([pos[o] for o in offsets], -2),
        times=times,
        valid=valid,
        features=torch.stack([feat[o] for o in offsets], -2),
        in_front=torch.stack([ok[o] for o in offsets], -1),
        out_of_box=oob,
        window=window,
    )


def integrate_displacement(weights: torch.Tensor, positions: torch.Tensor, frame: torch.Tensor,
                           pixel: torch.Tensor, stack: FrameStack, normalize: bool = True):
    """Density-weighted pixel displacement of ray samples moved to ``frame``.

    ``weights`` and ``positions`` are ``(B, M)`` / ``(B, M, 3)``; ``frame`` and
    ``pixel`` are per ray. Samples that land behind the camera get zero weight.
    Returns ``(flow (B, 2), any_excluded (B,))``.
    """
    uv, _, ok = stack.project(frame.view(-1, 1), positions)
    disp = uv - pixel.unsqueeze(-2)
    w = weights * ok.to(weights.dtype)
    flow = (w.unsqueeze(-1) * disp).sum(-2)
    if normalize:
        flow = flow / (w.sum(-1, keepdim=True) + 1e-8)
    return flow, (~ok).any(-1)


def render_optical_flow(weights: torch.Tensor, traj: Trajectory, pixel: torch.Tensor, stack: FrameStack,
                        normalize: bool = True):
    """Forward and backward optical flow of each ray from its trajectories.

    ``traj`` holds per-sample trajectories of shape ``(B, M, 2W+1, ...)``
    anchored at each ray's frame. Returns ``(fwd, bwd)`` each ``(B, 2)``.
    """
    if traj.window < 1:
        raise ValueError("optical flow needs a trajectory window of at least 1")
    t = traj.anchor_time[:, 0]
    N = stack.n_frames
    fwd, _ = integrate_displacement(weights, traj.row(1), (t + 1).clamp(max=N - 1), pixel, stack, normalize)
    bwd, _ = integrate_displacement(weights, traj.row(-1), (t - 1).clamp(min=0), pixel, stack, normalize)
    return fwd, bwd


def warp_ray(traj: Trajectory, tau: torch.Tensor) -> torch.Tensor:
    """Positions ``Phi_tau`` of every sample, with ``tau`` given per ray.

    ``traj`` is batched as ``(B, M, 2W+1, ...)`` and ``tau`` is ``(B,)``.
    """
    offset = tau.view(-1, 1) - traj.anchor_time
    if (offset.abs() > traj.window).any():
        raise ValueError(f"tau outside the materialized window of +-{traj.window} frames")
    idx = (offset + traj.window).unsqueeze(-1).unsqueeze(-1).expand(*offset.shape, 1, 3)
    return traj.positions.gather(-2, idx).squeeze(-2)
