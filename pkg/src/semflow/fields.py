"""The assembled static + dynamic semantic field and its render passes."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields as dc_fields

import torch

from . import renderer as rnd
from .diffcore import ParamBlock, ShapeError, sinusoidal_embed
from .feature_agg import (FeatureMaps, FrameStack, assemble_flow_features, displacement_dim, encode, make_encoder,
                          point_features, sample_static_feature)
from .flow_field import (FlowConfig, Trajectory, build_trajectory, make_flow_field, render_optical_flow, warp_ray)
from .semantic_heads import (FieldSample, HeadConfig, flow_semantic_logits, geo_forward, make_heads,
                             static_semantic_logits)

STATIC_BLOCKS = ("enc_st", "geo_st", "sem_st")
DYNAMIC_BLOCKS = ("enc_dy", "flow", "geo_dy", "attn", "psi_o", "sem_dy")


@dataclass
class ModelConfig:
    num_classes: int = 4
    feature_dim: int = 32
    width: int = 128
    blocks: int = 4
    channels: int = 64
    heads: int = 4
    sem_hidden: int = 64
    pos_freqs: int = 10
    time_freqs: int = 4
    disp_freqs: int = 4
    window: int = 1
    disp_mode: str = "delta"
    max_step: float = 0.1
    normalize_flow_weights: bool = True
    use_attention: bool = True
    samples: int = 64

    def __post_init__(self):
        if self.samples < 2:
            raise ShapeError("need at least two samples per ray")
        self.head_config()

    def flow_config(self) -> FlowConfig:
        return FlowConfig(self.width, self.blocks, self.max_step, self.pos_freqs, self.time_freqs,
                          self.normalize_flow_weights)

    def head_config(self) -> HeadConfig:
        row = self.feature_dim + displacement_dim(self.disp_mode, self.disp_freqs, self.pos_freqs)
        return HeadConfig(self.num_classes, self.feature_dim, row, self.channels, self.heads, self.sem_hidden,
                          self.width, self.blocks, self.pos_freqs, self.time_freqs, self.use_attention)

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in dc_fields(cls)}


@dataclass
class SceneContext:
    stack: FrameStack
    dy_maps: FeatureMaps
    st_maps: FeatureMaps
    near: float
    far: float


@dataclass
class RayBatch:
    origins: torch.Tensor   # (B, 3)
    dirs: torch.Tensor      # (B, 3)
    pixel: torch.Tensor     # (B, 2) u, v
    frame: torch.Tensor     # (B,) long

    def __len__(self):
        return self.frame.shape[0]

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.pixel[idx], self.frame[idx])


def pixel_rays(stack: FrameStack, frame: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor,
               R: torch.Tensor | None = None, T: torch.Tensor | None = None,
               K: torch.Tensor | None = None) -> RayBatch:
    """Rays through pixel centers; camera defaults to the frame's own pose."""
    R = stack.R[frame] if R is None else R
    T = stack.T[frame] if T is None else T
    K = stack.K[frame] if K is None else K
    u = cols.to(R.dtype)
    v = rows.to(R.dtype)
    d_cam = torch.stack([(u - K[..., 2]) / K[..., 0], (v - K[..., 3]) / K[..., 1], torch.ones_like(u)], -1)
    Rt = R.transpose(-1, -2)
    dirs = (Rt @ d_cam.unsqueeze(-1)).squeeze(-1)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = -(Rt @ T.unsqueeze(-1)).squeeze(-1)
    return RayBatch(origins, dirs, torch.stack([u, v], -1), frame)


@dataclass
class DynamicSamples:
    geo: FieldSample
    traj: Trajectory
    logits: torch.Tensor | None


@dataclass
class RenderOutput:
    rgb_st: torch.Tensor | None = None
    sem_st: torch.Tensor | None = None
    rgb_dy: torch.Tensor | None = None
    sem_dy: torch.Tensor | None = None
    rgb_full: torch.Tensor | None = None
    sem_full: torch.Tensor | None = None
    flow_fwd: torch.Tensor | None = None
    flow_bwd: torch.Tensor | None = None
    depth_full: torch.Tensor | None = None
    depth_st: torch.Tensor | None = None
    sem_consist: torch.Tensor | None = None
    consist_idx: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


class SemanticFlowModel:
    """Parameter blocks for every network plus the functional forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        self.cfg = cfg
        self.flow_cfg = cfg.flow_config()
        self.head_cfg = cfg.head_config()
        gen = torch.Generator().manual_seed(seed)
        blocks = {
            "enc_dy": make_encoder("enc_dy", cfg.feature_dim, gen),
            "enc_st": make_encoder("enc_st", cfg.feature_dim, gen),
            "flow": make_flow_field(cfg.feature_dim, self.flow_cfg, gen),
        }
        blocks.update(make_heads(self.head_cfg, gen))
        if dtype != torch.float32:
            blocks = {k: b.to(dtype) for k, b in blocks.items()}
        self.blocks: dict[str, ParamBlock] = blocks

    @property
    def dtype(self):
        return self.blocks["flow"]["in.W"].dtype

    def param_blocks(self, names=None) -> list[ParamBlock]:
        names = names or list(self.blocks)
        return [self.blocks[n] for n in names]

    def set_blocks(self, blocks: list[ParamBlock]) -> None:
        for b in blocks:
            self.blocks[b.name] = b

    # ------------------------------------------------------------------ context

    def context(self, stack: FrameStack, near: float, far: float, static_only: bool = False) -> SceneContext:
        st = encode(self.blocks["enc_st"], stack.images)
        dy = None if static_only else encode(self.blocks["enc_dy"], stack.images)
        return SceneContext(stack, dy, st, near, far)

    # ------------------------------------------------------------------ per-sample fields

    def x_embed(self, stack: FrameStack, pts: torch.Tensor) -> torch.Tensor:
        return sinusoidal_embed(stack.normalize_position(pts), self.cfg.pos_freqs)

    def static_samples(self, ctx: SceneContext, pts, x_emb, exclude, generator=None, frames=None):
        feats, chosen, ok = sample_static_feature(ctx.st_maps, ctx.stack, pts, exclude, generator, frames)
        feats = feats * ok.unsqueeze(-1).to(feats.dtype)
        geo = geo_forward(self.blocks, feats, x_emb, None, "static", self.head_cfg)
        geo.logits = static_semantic_logits(self.blocks, feats, x_emb)
        return geo, chosen

    def dynamic_samples(self, ctx: SceneContext, pts: torch.Tensor, t: torch.Tensor,
                        x_emb: torch.Tensor | None = None, need_logits: bool = True) -> DynamicSamples:
        """Density, color, blend, trajectory and flow semantic logits at ``(pts, t)``.

        ``pts`` is ``(B, M, 3)``; ``t`` holds one frame per ray ``(B,)``.
        """
        stack = ctx.stack
        if x_emb is None:
            x_emb = self.x_embed(stack, pts)
        t_col = t.view(-1, *([1] * (pts.dim() - 2)))

        def feats_fn(p, f):
            return point_features(ctx.dy_maps, stack, f, p)

        f_t, ok = feats_fn(pts, t_col)
        traj = build_trajectory(self.blocks["flow"], feats_fn, pts, t_col, self.cfg.window, stack, self.flow_cfg,
                                anchor_feature=f_t, x_embed=x_emb, anchor_ok=ok)
        t_emb = sinusoidal_embed(stack.normalize_time(t_col).unsqueeze(-1), self.cfg.time_freqs)
        geo = geo_forward(self.blocks, f_t, x_emb, t_emb, "dynamic", self.head_cfg)
        logits = None
        if need_logits:
            valid = traj.valid & traj.in_front
            rows = assemble_flow_features(traj.features, traj.positions, traj.times, valid, traj.anchor_index,
                                          stack, self.cfg.disp_mode, self.cfg.max_step, self.cfg.disp_freqs,
                                          self.cfg.pos_freqs)
            logits = flow_semantic_logits(self.blocks, rows, valid, self.head_cfg)
        geo.logits = logits
        return DynamicSamples(geo, traj, logits)

    # ------------------------------------------------------------------ rendering

    def sample_depths(self, ctx: SceneContext, n_rays: int, jitter: bool, generator=None, samples=None):
        M = samples or self.cfg.samples
        u = rnd.sample_ray(ctx.near, ctx.far, M, jitter=jitter, generator=generator, batch=n_rays, dtype=self.dtype)
        return u, (ctx.far - ctx.near) / M

    def render_static(self, ctx: SceneContext, rays: RayBatch, jitter=False, generator=None,
                      static_frames=None) -> RenderOutput:
        u, last = self.sample_depths(ctx, len(rays), jitter, generator)
        pts = rays.origins[:, None, :] + u[..., None] * rays.dirs[:, None, :]
        x_emb = self.x_embed(ctx.stack, pts)
        st, _ = self.static_samples(ctx, pts, x_emb, rays.frame, generator, static_frames)
        q = rnd.quadrature(u, st.sigma, last)
        return RenderOutput(rgb_st=q.integrate(st.color), sem_st=q.integrate(st.logits),
                            depth_st=q.expected_depth())

    def render(self, ctx: SceneContext, rays: RayBatch, jitter=False, generator=None, static_frames=None,
               remove_classes=(), consist_idx: torch.Tensor | None = None, tau: torch.Tensor | None = None,
               need_flow: bool = True) -> RenderOutput:
        """Full render of static, dynamic and blended fields for a ray batch.

        ``remove_classes`` zeroes the dynamic density of samples whose flow
        semantic argmax is one of the listed classes. ``consist_idx``/``tau``
        select rays re-rendered after warping their samples to frame ``tau``.
        """
        u, last = self.sample_depths(ctx, len(rays), jitter, generator)
        pts = rays.origins[:, None, :] + u[..., None] * rays.dirs[:, None, :]
        x_emb = self.x_embed(ctx.stack, pts)
        st, _ = self.static_samples(ctx, pts, x_emb, rays.frame, generator, static_frames)
        dy = self.dynamic_samples(ctx, pts, rays.frame, x_emb)
        sigma_dy = dy.geo.sigma
        if remove_classes:
            hit = torch.isin(dy.logits.argmax(-1), torch.as_tensor(list(remove_classes)))
            sigma_dy = torch.where(hit, torch.zeros_like(sigma_dy), sigma_dy)
        q_st = rnd.quadrature(u, st.sigma, last)
        q_dy = rnd.quadrature(u, sigma_dy, last)
        bq = rnd.blend_quadrature(u, st.sigma, sigma_dy, dy.geo.blend, last)
        out = RenderOutput(
            rgb_st=q_st.integrate(st.color), sem_st=q_st.integrate(st.logits), depth_st=q_st.expected_depth(),
            rgb_dy=q_dy.integrate(dy.geo.color), sem_dy=q_dy.integrate(dy.logits),
            rgb_full=bq.integrate(st.color, dy.geo.color), sem_full=bq.integrate(st.logits, dy.logits),
            depth_full=bq.integrate(u.unsqueeze(-1), u.unsqueeze(-1)).squeeze(-1),
        )
        if need_flow and self.cfg.window >= 1:
            out.flow_fwd, out.flow_bwd = render_optical_flow(q_dy.weights, dy.traj, rays.pixel, ctx.stack,
                                                             self.cfg.normalize_flow_weights)
        out.extras["weights_dy"] = q_dy.weights
        out.extras["weights_full"] = bq.weights
        out.extras["logits_dy_samples"] = dy.logits
        if consist_idx is not None and len(consist_idx):
            out.sem_consist = self.render_warped(ctx, dy.traj, u, last, consist_idx, tau)
            out.consist_idx = consist_idx
        return out

    def render_warped(self, ctx: SceneContext, traj: Trajectory, u, last, idx, tau) -> torch.Tensor:
        """Dynamic semantic rendering of rays ``idx`` after warping their samples to frame ``tau``."""
        sub = Trajectory(traj.positions[idx], traj.times[idx], traj.valid[idx], traj.features[idx],
                         traj.in_front[idx], traj.out_of_box[idx], traj.window)
        warped = warp_ray(sub, tau)
        dy = self.dynamic_samples(ctx, warped, tau)
        q = rnd.quadrature(u[idx], dy.geo.sigma, last)
        return q.integrate(dy.logits)


def config_dict(cfg) -> dict:
    return asdict(cfg)
