"""Flow attention, semantic heads and the geometry networks."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffcore import (ParamBlock, ShapeError, affine, embed_dim, init_affine, make_attention, make_mlp,
                       make_residual_mlp, mlp, multi_head_attention, residual_mlp)


@dataclass
class HeadConfig:
    num_classes: int = 4
    feature_dim: int = 32
    row_dim: int = 68            # feature_dim + displacement embedding width
    channels: int = 64
    heads: int = 4
    sem_hidden: int = 64
    geo_width: int = 128
    geo_blocks: int = 4
    pos_freqs: int = 10
    time_freqs: int = 4
    use_attention: bool = True

    def __post_init__(self):
        if self.channels % self.heads:
            raise ShapeError(f"channels {self.channels} not divisible by heads {self.heads}")


def make_heads(cfg: HeadConfig, gen: torch.Generator) -> dict[str, ParamBlock]:
    C, L = cfg.channels, cfg.num_classes
    x_dim = embed_dim(3, cfg.pos_freqs)
    t_dim = embed_dim(1, cfg.time_freqs)
    attn = make_attention("attn", C, gen)
    init_affine(attn, "in", cfg.row_dim, C, gen)
    return {
        "attn": attn,
        "psi_o": make_mlp("psi_o", [C, C, C], gen),
        "sem_dy": make_mlp("sem_dy", [C, cfg.sem_hidden, cfg.sem_hidden, L], gen),
        "sem_st": make_mlp("sem_st", [cfg.feature_dim + x_dim, cfg.sem_hidden, cfg.sem_hidden, L], gen),
        "geo_dy": make_residual_mlp("geo_dy", cfg.feature_dim + x_dim + t_dim, cfg.geo_width, cfg.geo_blocks, 5, gen),
        "geo_st": make_residual_mlp("geo_st", cfg.feature_dim + x_dim, cfg.geo_width, cfg.geo_blocks, 4, gen),
    }


def attention_rows(attn: ParamBlock, F_rows: torch.Tensor, valid: torch.Tensor, cfg: HeadConfig) -> torch.Tensor:
    """Per-row outputs of all heads, concatenated: ``(..., R, C)``."""
    if F_rows.shape[-1] != attn["in.W"].shape[0]:
        raise ShapeError(f"flow feature width {F_rows.shape[-1]} != {attn['in.W'].shape[0]}")
    X = affine(attn, "in", F_rows)
    if not cfg.use_attention:
        return X
    return multi_head_attention(attn, X, cfg.heads, mask=valid)


def flow_semantic_feature(params: dict[str, ParamBlock], F_rows: torch.Tensor, valid: torch.Tensor,
                          cfg: HeadConfig) -> torch.Tensor:
    """Attention over trajectory rows, masked mean over rows, then the output MLP."""
    A = attention_rows(params["attn"], F_rows, valid, cfg)
    w = valid.to(A.dtype).unsqueeze(-1)
    pooled = (A * w).sum(-2) / w.sum(-2).clamp(min=1.0)
    return mlp(params["psi_o"], pooled, final_activation=True)


def flow_semantic_logits(params: dict[str, ParamBlock], F_rows: torch.Tensor, valid: torch.Tensor,
                         cfg: HeadConfig) -> torch.Tensor:
    return mlp(params["sem_dy"], flow_semantic_feature(params, F_rows, valid, cfg))


def static_semantic_logits(params: dict[str, ParamBlock], static_feature: torch.Tensor,
                           x_embed: torch.Tensor) -> torch.Tensor:
    return mlp(params["sem_st"], torch.cat([static_feature, x_embed], -1))


@dataclass
class FieldSample:
    sigma: torch.Tensor
    color: torch.Tensor
    blend: torch.Tensor | None = None
    logits: torch.Tensor | None = None


def geo_forward(params: dict[str, ParamBlock], point_feature: torch.Tensor, x_embed: torch.Tensor,
                t_embed: torch.Tensor | None, branch: str, cfg: HeadConfig) -> FieldSample:
    """Density (softplus), color (sigmoid) and, for the dynamic branch, blend weight (sigmoid)."""
    if branch == "dynamic":
        if t_embed is None:
            raise ValueError("dynamic branch needs a time embedding")
        t_embed = t_embed.expand(*x_embed.shape[:-1], t_embed.shape[-1])
        raw = residual_mlp(params["geo_dy"], torch.cat([point_feature, x_embed, t_embed], -1),
                           cfg.geo_width, cfg.geo_blocks)
        return FieldSample(F.softplus(raw[..., 0]), torch.sigmoid(raw[..., 1:4]), torch.sigmoid(raw[..., 4]))
    if branch == "static":
        raw = residual_mlp(params["geo_st"], torch.cat([point_feature, x_embed], -1), cfg.geo_width, cfg.geo_blocks)
        return FieldSample(F.softplus(raw[..., 0]), torch.sigmoid(raw[..., 1:4]))
    raise ValueError(f"unknown branch {branch!r}")
