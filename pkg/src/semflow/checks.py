"""Finite-difference gradient suites over the library's differentiable pieces.

Each suite builds a small float64 problem and runs :func:`gradcheck` on it.
``model_loss_gradchecks`` covers every parameter block of the assembled model
through each loss term.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from . import renderer as rnd
from .diffcore import (GradcheckReport, ParamBlock, crossentropy, gradcheck, make_attention, make_residual_mlp,
                       multi_head_attention, residual_mlp, sinusoidal_embed)
from .feature_agg import FrameStack, bilinear_sample, encode, make_encoder, point_features
from .fields import ModelConfig, SemanticFlowModel, pixel_rays
from .flow_field import FlowConfig, build_trajectory, make_flow_field, render_optical_flow
from .scene_synth import generate_scene

D = torch.float64
H_STEP = 1e-3
TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    report: GradcheckReport
    seconds: float


def _run(name, f, params, samples=6) -> SuiteResult:
    t0 = time.perf_counter()
    rep = gradcheck(f, params, h=H_STEP, tol=TOL, samples_per_tensor=samples)
    return SuiteResult(name, rep, time.perf_counter() - t0)


def diffcore_suite() -> list[SuiteResult]:
    g = torch.Generator().manual_seed(0)
    res = make_residual_mlp("res", 5, 8, 2, 3, g).to(D)
    att = make_attention("att", 8, g).to(D)
    x = torch.randn(6, 5, generator=g, dtype=D)
    X = torch.randn(3, 4, 8, generator=g, dtype=D)
    target = torch.tensor([0, 2, 1, 1, 0, 2])
    return [
        _run("residual_mlp+crossentropy", lambda b: crossentropy(residual_mlp(b, sinusoidal_embed(x, 0), 8, 2),
                                                                 target), res),
        _run("multi_head_attention", lambda b: (multi_head_attention(b, X, 2) ** 2).sum(), att),
    ]


def renderer_suite() -> list[SuiteResult]:
    g = torch.Generator().manual_seed(1)
    u = rnd.sample_ray(1.0, 3.0, 8, jitter=True, generator=g, batch=3, dtype=D)
    p = ParamBlock("field", {"s_st": torch.randn(3, 8, generator=g, dtype=D),
                             "s_dy": torch.randn(3, 8, generator=g, dtype=D),
                             "c": torch.rand(3, 8, 3, generator=g, dtype=D),
                             "b": torch.randn(3, 8, generator=g, dtype=D)})

    def f(b):
        sp = torch.nn.functional.softplus
        out = rnd.blend(u, sp(b["s_st"]), b["c"], sp(b["s_dy"]), b["c"] ** 2, torch.sigmoid(b["b"]), 0.25)
        return (out ** 2).sum()

    return [_run("blend_quadrature", f, p, samples=10)]


def flow_field_suite() -> list[SuiteResult]:
    sc = generate_scene("balloon", 0)
    stack = FrameStack.from_scene(sc, D)
    cfg = FlowConfig(width=8, blocks=1)
    p = make_flow_field(3, cfg, torch.Generator().manual_seed(2)).to(D)
    u = rnd.sample_ray(2.0, 4.0, 4, batch=2, dtype=D)
    pts = torch.tensor([0.1, 0.0, 0.0], dtype=D) + u[..., None] * torch.tensor([0.02, 0.01, 1.0], dtype=D)
    feat = torch.randn(2, 4, 3, generator=torch.Generator().manual_seed(3), dtype=D)
    w = rnd.quadrature(u, torch.ones(2, 4, dtype=D), 0.5).weights
    pixel = torch.tensor([[30.0, 31.0], [33.0, 32.0]], dtype=D)

    def f(b):
        traj = build_trajectory(b, lambda q, fr: (feat, torch.ones(q.shape[:-1], dtype=torch.bool)), pts,
                                torch.tensor([5, 5]).view(-1, 1), 1, stack, cfg)
        fwd, bwd = render_optical_flow(w, traj, pixel, stack)
        return (fwd ** 2).sum() + bwd.sum()

    return [_run("trajectory+optical_flow", f, p)]


def feature_agg_suite() -> list[SuiteResult]:
    g = torch.Generator().manual_seed(4)
    sc = generate_scene("balloon", 0)
    full = FrameStack.from_scene(sc, D)
    stack = FrameStack(full.images[:2, :, ::4, ::4].contiguous(), full.R[:2], full.T[:2], full.K[:2] / 4,
                       full.box_min, full.box_max)
    enc = make_encoder("enc", 4, g, channels=(3, 4, 4)).to(D)
    x = torch.tensor([[0.1, 0.2, 3.0], [-0.4, 0.0, 2.5], [0.6, 0.4, 3.2]], dtype=D)
    fmap = ParamBlock("map", {"m": torch.randn(2, 5, 6, generator=g, dtype=D),
                              "uv": torch.rand(6, 2, generator=g, dtype=D) * 9})

    def f(b):
        feats, _ = point_features(encode(b, stack.images), stack, torch.tensor([0, 1, 1]), x)
        return (feats ** 2).sum()

    return [
        _run("encoder+projection+bilinear", f, enc, samples=4),
        _run("bilinear_map_and_coords", lambda b: (bilinear_sample(b["m"], b["uv"], 2.0) ** 2).sum(), fmap),
    ]


# --------------------------------------------------------------------------- whole model

TINY = ModelConfig(num_classes=4, feature_dim=4, width=8, blocks=1, channels=8, heads=2, sem_hidden=8,
                   pos_freqs=2, time_freqs=1, disp_freqs=1, window=1, disp_mode="both", samples=6)


def tiny_problem(cfg: ModelConfig = TINY, n_rays: int = 3, seed: int = 0):
    """Float64 model plus a downsampled scene and a few rays through the moving object."""
    sc = generate_scene("balloon", 0)
    full = FrameStack.from_scene(sc, D)
    f = 4
    stack = FrameStack(full.images[:4, :, ::f, ::f].contiguous(), full.R[:4], full.T[:4], full.K[:4] / f,
                       full.box_min, full.box_max)
    model = SemanticFlowModel(cfg, seed=seed, dtype=D)
    # rays hitting the balloon, the static sphere and the back plane at frame 2
    frame = torch.tensor([2, 2, 1])[:n_rays]
    rows = torch.tensor([6, 6, 10])[:n_rays]
    cols = torch.tensor([5, 11, 2])[:n_rays]
    rays = pixel_rays(stack, frame, rows, cols)
    labels = torch.from_numpy(sc.labels[frame.numpy(), rows.numpy() * f, cols.numpy() * f].astype("int64"))
    rgb = torch.from_numpy(sc.frames[frame.numpy(), rows.numpy() * f, cols.numpy() * f]).to(D)
    flow = torch.from_numpy(sc.flow_fwd[frame.numpy(), rows.numpy() * f, cols.numpy() * f] / f).to(D)
    return model, stack, sc, rays, labels, rgb, flow


def model_loss_gradchecks(samples: int = 3) -> list[SuiteResult]:
    """Gradcheck all parameter blocks through the semantic, rgb, optical-flow and consistency losses."""
    model, stack, sc, rays, labels, rgb, flow = tiny_problem()
    names = list(model.blocks)
    static_frames = torch.tensor([0, 3, 0])

    def loss_fn(term):
        def f(blocks):
            model.set_blocks(blocks)
            ctx = model.context(stack, sc.near, sc.far)
            tau = torch.tensor([3, 1, 2])
            out = model.render(ctx, rays, static_frames=static_frames, consist_idx=torch.arange(3), tau=tau)
            if term == "semantic":
                return (crossentropy(out.sem_full, labels) + crossentropy(out.sem_dy, labels)
                        + crossentropy(out.sem_st, labels))
            if term == "rgb":
                return (((out.rgb_full - rgb) ** 2).mean() + ((out.rgb_dy - rgb) ** 2).mean()
                        + ((out.rgb_st - rgb) ** 2).mean())
            if term == "optical_flow":
                return (out.flow_fwd - flow).abs().mean() + (out.flow_bwd + flow).abs().mean()
            if term == "consistency":
                return crossentropy(out.sem_consist, labels)
            raise ValueError(term)
        return f

    results = []
    for term in ("semantic", "rgb", "optical_flow", "consistency"):
        blocks = [model.blocks[n] for n in names]
        results.append(_run(f"model/{term}", loss_fn(term), blocks, samples=samples))
        model.set_blocks(blocks)
    return results


SUITES = {
    "diffcore": diffcore_suite,
    "renderer": renderer_suite,
    "flow_field": flow_field_suite,
    "feature_agg": feature_agg_suite,
    "model": model_loss_gradchecks,
}
