"""Metrics, whole-image rendering, scene editing and view export."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import checkpoint as _ckpt
from .feature_agg import FrameStack
from .fields import RayBatch, SemanticFlowModel, pixel_rays
from .scene_synth import CameraPose

PSNR_CAP = 99.0

# checkpoint codec, re-exported for callers working from evalkit
CheckpointError = _ckpt.CheckpointError
save_checkpoint = _ckpt.save_checkpoint
load_checkpoint = _ckpt.load_checkpoint
read_checkpoint = _ckpt.read_checkpoint


# --------------------------------------------------------------------------- metrics

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``L x L`` counts, rows indexed by gt class and columns by predicted class."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def pixel_metrics(pred, gt, num_classes: int | None = None) -> tuple[float, float, float]:
    """Total accuracy, mean recall over gt-present classes, and mIoU over classes seen in gt or pred."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    cm = confusion_matrix(pred, gt, num_classes).astype(np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("no pixels to evaluate")
    tp = np.diag(cm)
    gt_count = cm.sum(1)
    pred_count = cm.sum(0)
    present = gt_count > 0
    seen = present | (pred_count > 0)
    total_acc = tp.sum() / total
    avg_acc = float(np.mean(tp[present] / gt_count[present]))
    miou = float(np.mean(tp[seen] / (gt_count + pred_count - tp)[seen]))
    return float(total_acc), avg_acc, miou


def psnr(pred, gt) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(pred, gt, k1: float = 0.01, k2: float = 0.03, size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM over the valid region, averaged over channels; images in [0, 1]."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    g = torch.from_numpy(_gaussian_window(size, sigma))
    kernel = (g[:, None] * g[None, :]).view(1, 1, size, size)

    def blur(img):
        t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[:, None]
        return torch.nn.functional.conv2d(t, kernel)[:, 0].numpy()

    c1, c2 = k1 ** 2, k2 ** 2
    mu_x, mu_y = blur(pred), blur(gt)
    sxx = blur(pred * pred) - mu_x ** 2
    syy = blur(gt * gt) - mu_y ** 2
    sxy = blur(pred * gt) - mu_x * mu_y
    m = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    return float(m.mean(axis=(1, 2)).mean())


def image_metrics(pred, gt) -> tuple[float, float]:
    return psnr(pred, gt), ssim(pred, gt)


def endpoint_error(pred_flow, gt_flow, mask=None) -> float:
    err = np.linalg.norm(np.asarray(pred_flow, np.float64) - np.asarray(gt_flow, np.float64), axis=-1)
    if mask is not None:
        err = err[np.asarray(mask, bool)]
    return float(err.mean()) if err.size else float("nan")


# --------------------------------------------------------------------------- rendering

@dataclass
class FrameRender:
    rgb: np.ndarray          # (H, W, 3)
    probs: np.ndarray        # (H, W, L) softmax of the rendered full logits
    labels: np.ndarray       # (H, W)
    flow_fwd: np.ndarray     # (H, W, 2)
    flow_bwd: np.ndarray
    depth: np.ndarray


@torch.no_grad()
def render_rays(model: SemanticFlowModel, ctx, rays: RayBatch, remove_classes=(), chunk: int = 2048,
                seed: int = 0) -> dict[str, torch.Tensor]:
    """Deterministic full render of ``rays`` in chunks (midpoint samples, seeded static frames)."""
    gen = torch.Generator().manual_seed(seed)
    parts: dict[str, list] = {}
    for s in range(0, len(rays), chunk):
        idx = torch.arange(s, min(s + chunk, len(rays)))
        out = model.render(ctx, rays.subset(idx), jitter=False, generator=gen, remove_classes=remove_classes)
        for k in ("rgb_full", "sem_full", "flow_fwd", "flow_bwd", "depth_full", "rgb_st", "rgb_dy", "sem_dy",
                  "sem_st"):
            v = getattr(out, k)
            if v is not None:
                parts.setdefault(k, []).append(v)
    return {k: torch.cat(v) for k, v in parts.items()}


def edit_remove_instance(model: SemanticFlowModel, ctx, rays: RayBatch, target_classes: Sequence[int],
                         **kw) -> torch.Tensor:
    """Full RGB render with the dynamic density of samples classified as ``target_classes`` zeroed."""
    return render_rays(model, ctx, rays, remove_classes=tuple(target_classes), **kw)["rgb_full"]


def frame_rays(stack: FrameStack, frame: int, pose: CameraPose | None = None) -> RayBatch:
    """All pixel rays of one image, row-major, observed at time ``frame``."""
    H, W = stack.height, stack.width
    rows = torch.arange(H).repeat_interleave(W)
    cols = torch.arange(W).repeat(H)
    t = torch.full((H * W,), frame, dtype=torch.long)
    if pose is None:
        return pixel_rays(stack, t, rows, cols)
    dt = stack.R.dtype
    R = torch.tensor(pose.rotation, dtype=dt).expand(H * W, 3, 3)
    T = torch.tensor(pose.translation, dtype=dt).expand(H * W, 3)
    K = torch.tensor([pose.fx, pose.fy, pose.cx, pose.cy], dtype=dt).expand(H * W, 4)
    return pixel_rays(stack, t, rows, cols, R, T, K)


def render_frame(model: SemanticFlowModel, ctx, frame: int, pose: CameraPose | None = None,
                 remove_classes=(), **kw) -> FrameRender:
    H, W = ctx.stack.height, ctx.stack.width
    out = render_rays(model, ctx, frame_rays(ctx.stack, frame, pose), remove_classes, **kw)
    probs = torch.softmax(out["sem_full"], -1)
    return FrameRender(
        rgb=out["rgb_full"].reshape(H, W, 3).numpy(),
        probs=probs.reshape(H, W, -1).numpy(),
        labels=probs.argmax(-1).reshape(H, W).numpy().astype(np.uint8),
        flow_fwd=out["flow_fwd"].reshape(H, W, 2).numpy(),
        flow_bwd=out["flow_bwd"].reshape(H, W, 2).numpy(),
        depth=out["depth_full"].reshape(H, W).numpy(),
    )


def scene_context(model: SemanticFlowModel, scene):
    with torch.no_grad():
        return model.context(FrameStack.from_scene(scene), scene.near, scene.far)


@dataclass
class EvalReport:
    frames: list[int]
    per_frame: list[dict]
    summary: dict


def evaluate(model: SemanticFlowModel, scene, frames: Sequence[int] | None = None, ctx=None) -> EvalReport:
    """Semantic, photometric and flow metrics of the model's renders at training views."""
    ctx = ctx or scene_context(model, scene)
    frames = list(range(scene.n_frames)) if frames is None else list(frames)
    L = scene.num_classes
    fg = np.isin(scene.labels, list(scene.fg_classes))
    rows, preds, gts, epe_err = [], [], [], []
    for t in frames:
        r = render_frame(model, ctx, t)
        tot, avg, miou = pixel_metrics(r.labels, scene.labels[t], L)
        p, s = image_metrics(np.clip(r.rgb, 0, 1), scene.frames[t])
        mask = fg[t]
        err = []
        if t < scene.n_frames - 1:
            err.append(np.linalg.norm(r.flow_fwd - scene.flow_fwd[t], axis=-1)[mask])
        if t > 0:
            err.append(np.linalg.norm(r.flow_bwd - scene.flow_bwd[t], axis=-1)[mask])
        err = np.concatenate(err) if err else np.zeros(0)
        epe_err.append(err)
        rows.append({"frame": t, "total_acc": tot, "avg_acc": avg, "miou": miou, "psnr": p, "ssim": s,
                     "fg_epe": float(err.mean()) if err.size else float("nan")})
        preds.append(r.labels)
        gts.append(scene.labels[t])
    tot, avg, miou = pixel_metrics(np.stack(preds), np.stack(gts), L)
    all_err = np.concatenate(epe_err)
    summary = {
        "total_acc": tot, "avg_acc": avg, "miou": miou,
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "fg_epe": float(all_err.mean()) if all_err.size else float("nan"),
    }
    return EvalReport(frames, rows, summary)


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ["frame", "total_acc", "avg_acc", "miou", "psnr", "ssim", "fg_epe"]
    lines = [",".join(keys)]
    for row in report.per_frame:
        lines.append(",".join(str(row[k]) if k == "frame" else f"{row[k]:.6f}" for k in keys))
    lines.append(",".join(["all"] + [f"{report.summary[k]:.6f}" for k in keys[1:]]))
    path.write_text("\n".join(lines) + "\n")
    return path


def render_views(model: SemanticFlowModel, ctx, poses: Sequence[CameraPose], times: Sequence[int], out_dir,
                 remove_classes=()) -> list[Path]:
    """Write RGB, argmax label and per-class probability PNGs for each (pose, time)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (pose, t) in enumerate(zip(poses, times)):
        r = render_frame(model, ctx, int(t), pose, remove_classes)
        rgb8 = np.round(np.clip(r.rgb, 0, 1) * 255).astype(np.uint8)
        paths = [out / f"rgb_{i:03d}.png", out / f"label_{i:03d}.png"]
        Image.fromarray(rgb8, "RGB").save(paths[0])
        Image.fromarray(r.labels, "L").save(paths[1])
        for k in range(r.probs.shape[-1]):
            p = out / f"prob_{i:03d}_c{k}.png"
            Image.fromarray(np.round(r.probs[..., k] * 255).astype(np.uint8), "L").save(p)
            paths.append(p)
        written.extend(paths)
    return written
