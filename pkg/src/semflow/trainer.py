"""Loss terms, the composite objective and the two-phase training loop."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .diffcore import AdamState, NonFiniteError, adam_step, crossentropy
from .feature_agg import FrameStack
from .fields import DYNAMIC_BLOCKS, STATIC_BLOCKS, ModelConfig, SemanticFlowModel, pixel_rays

TERMS = ("st_rgb", "dy_rgb", "full_rgb", "opt", "full_sem", "dy_sem", "st_sem", "consist")

LABEL_SCHEDULES = {
    "full": None,
    "completion": (0, 1, 2, 9, 10, 11),
    "tracking": (0, 1, 2),
}
SCHEDULE_ALIASES = {"completion-50%": "completion", "tracking-25%": "tracking"}


class ConfigError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str, checkpoint: Path | None):
        super().__init__(f"diverged at step {step}: {reason}; last good checkpoint {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class LossWeights:
    a_st_rgb: float = 4.0
    a_dy_rgb: float = 1.0
    a_full_rgb: float = 1.0
    a_opt: float = 0.02
    a_full_sem: float = 0.16
    a_dy_sem: float = 0.08
    a_st_sem: float = 0.08
    a_consist: float = 0.01

    def __post_init__(self):
        for f in dc_fields(self):
            if not getattr(self, f.name) >= 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")

    def of(self, term: str) -> float:
        return getattr(self, "a_" + term)


@dataclass
class TrainConfig:
    static_steps: int = 2000
    dynamic_steps: int = 4000
    batch_rays: int = 1024
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    samples: int = 16
    disp_mode: str = "auto"
    window: int = 1
    label_schedule: str = "full"
    seed: int = 0
    consist_rays: int = 128
    checkpoint_every: int = 1000
    freeze_static: bool = False
    depth_weight: float = 0.0
    init_ckpt: str = ""
    jitter: bool = True
    # network sizes
    feature_dim: int = 16
    width: int = 64
    blocks: int = 2
    channels: int = 32
    heads: int = 4
    sem_hidden: int = 32
    max_step: float = 0.1
    normalize_flow_weights: bool = True
    use_attention: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.static_steps < 0 or self.dynamic_steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_rays <= 0:
            raise ConfigError("batch_rays must be > 0")
        self.label_schedule = SCHEDULE_ALIASES.get(self.label_schedule, self.label_schedule)
        if self.label_schedule not in LABEL_SCHEDULES:
            raise ConfigError(f"unknown label_schedule {self.label_schedule!r}")
        if self.disp_mode not in ("auto", "delta", "absolute", "both"):
            raise ConfigError(f"unknown disp_mode {self.disp_mode!r}")

    def model_config(self, num_classes: int) -> ModelConfig:
        keys = ModelConfig.keys() & {f.name for f in dc_fields(self)}
        kw = {k: getattr(self, k) for k in keys}
        kw["disp_mode"] = self.resolved_disp_mode()
        return ModelConfig(num_classes=num_classes, **kw)

    def resolved_disp_mode(self) -> str:
        """``auto`` picks positions plus displacements for completion, displacements otherwise."""
        if self.disp_mode != "auto":
            return self.disp_mode
        return "both" if self.label_schedule == "completion" else "delta"

    def to_lines(self) -> list[str]:
        d = asdict(self)
        d.pop("weights")
        d.update(asdict(self.weights))
        return [f"{k}={_fmt_value(v)}" for k, v in d.items()]


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, text: str, kind):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None
    return text


def parse_config(text: str) -> TrainConfig:
    """Parse ``key=value`` lines into a TrainConfig (``#`` starts a comment)."""
    train_types = {f.name: f.type for f in dc_fields(TrainConfig) if f.name != "weights"}
    weight_types = {f.name: f.type for f in dc_fields(LossWeights)}
    train, weights = {}, {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "betas":
            parts = value.replace("(", "").replace(")", "").split(",")
            if len(parts) != 2:
                raise ConfigError(f"line {n}: betas needs two values")
            train["beta1"], train["beta2"] = (_coerce(key, p, float) for p in parts)
        elif key in train_types:
            train[key] = _coerce(key, value, train_types[key])
        elif key in weight_types:
            weights[key] = _coerce(key, value, float)
        else:
            raise ConfigError(f"line {n}: unknown key {key!r}")
    return TrainConfig(weights=LossWeights(**weights), **train)


def read_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from e
    return parse_config(text)


def write_config(cfg: TrainConfig, path, extra: Mapping[str, str] | None = None) -> Path:
    lines = cfg.to_lines() + [f"{k}={v}" for k, v in (extra or {}).items()]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


# --------------------------------------------------------------------------- losses

def loss_rgb(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over the selected rays and all channels."""
    if mask is not None:
        pred, gt = pred[mask], gt[mask]
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return ((pred - gt) ** 2).mean()


def loss_semantic(logits: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Crossentropy between softmax of rendered logits and gt classes."""
    if mask is not None:
        logits, gt = logits[mask], gt[mask]
    return crossentropy(logits, gt)


def loss_flow(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute error over the selected rays and both flow components."""
    if mask is not None:
        pred, gt = pred[mask], gt[mask]
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return (pred - gt).abs().mean()


def loss_consistency(warped_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Crossentropy of semantics rendered at the warped time against the original ray's label."""
    return crossentropy(warped_logits, gt)


def choose_tau(frames: torch.Tensor, n_frames: int, generator: torch.Generator | None = None):
    """Pick t-1 or t+1 uniformly per ray, clipped into the video."""
    step = torch.randint(0, 2, frames.shape, generator=generator) * 2 - 1
    return (frames + step).clamp(0, n_frames - 1)


def loss_total(terms: Mapping[str, torch.Tensor], weights: LossWeights, depth_weight: float = 0.0,
               ) -> torch.Tensor:
    """Weighted sum of the eight terms (absent terms count as zero).

    A ``depth`` entry is included with ``depth_weight`` when present.
    """
    unknown = set(terms) - set(TERMS) - {"depth"}
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = None
    for name, value in terms.items():
        value = torch.as_tensor(value)
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteLoss(name, float(value.detach()))
        w = depth_weight if name == "depth" else weights.of(name)
        total = w * value if total is None else total + w * value
    return torch.zeros(()) if total is None else total


# --------------------------------------------------------------------------- data

def labeled_frames(schedule: str, n_frames: int) -> tuple[int, ...]:
    schedule = SCHEDULE_ALIASES.get(schedule, schedule)
    if schedule not in LABEL_SCHEDULES:
        raise ConfigError(f"unknown label_schedule {schedule!r}")
    frames = LABEL_SCHEDULES[schedule]
    if frames is None:
        return tuple(range(n_frames))
    if max(frames) >= n_frames:
        raise ConfigError(f"schedule {schedule!r} needs at least {max(frames) + 1} frames")
    return frames


class SceneData:
    """Tensors of one training scene plus the pixel pools each phase samples from."""

    def __init__(self, scene, schedule: str):
        self.scene = scene
        self.stack = FrameStack.from_scene(scene)
        N, H, W = scene.labels.shape
        self.rgb = torch.from_numpy(scene.frames.reshape(-1, 3).astype(np.float32))
        self.labels = torch.from_numpy(scene.labels.reshape(-1).astype(np.int64))
        self.depth = torch.from_numpy(scene.depth.reshape(-1).astype(np.float32))
        self.flow_fwd = torch.from_numpy(scene.flow_fwd.reshape(-1, 2).astype(np.float32))
        self.flow_bwd = torch.from_numpy(scene.flow_bwd.reshape(-1, 2).astype(np.float32))
        self.shape = (N, H, W)
        self.labeled = labeled_frames(schedule, N)
        frame_of = torch.arange(N * H * W) // (H * W)
        self.has_label = torch.isin(frame_of, torch.tensor(self.labeled))
        self.is_fg = torch.isin(self.labels, torch.tensor(list(scene.fg_classes), dtype=torch.long))
        self.background_pool = torch.nonzero(self.has_label & ~self.is_fg).squeeze(1)
        if len(self.background_pool) == 0:
            raise ConfigError("no background-labeled pixels to pretrain the static field")

    def rays(self, flat: torch.Tensor):
        N, H, W = self.shape
        frame = flat // (H * W)
        rem = flat % (H * W)
        return pixel_rays(self.stack, frame, rem // W, rem % W)

    def sample(self, n: int, phase: int, generator: torch.Generator) -> torch.Tensor:
        if phase == 1:
            pick = torch.randint(0, len(self.background_pool), (n,), generator=generator)
            return self.background_pool[pick]
        N, H, W = self.shape
        return torch.randint(0, N * H * W, (n,), generator=generator)


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: SemanticFlowModel
    log: list[dict]
    checkpoint: Path | None


def _split(total: int, parts: int) -> list[int]:
    base = [total // parts] * parts
    for i in range(total - sum(base)):
        base[i] += 1
    return base


def compute_terms(model: SemanticFlowModel, data: Sequence[SceneData], counts: Sequence[int], phase: int,
                  cfg: TrainConfig, gen: torch.Generator) -> dict[str, torch.Tensor]:
    """Render one ray batch (split across scenes) and evaluate every active loss term."""
    collected: dict[str, list] = {}

    def put(key, value):
        collected.setdefault(key, []).append(value)

    consist_counts = _split(cfg.consist_rays, len(data))
    for d, n, n_consist in zip(data, counts, consist_counts):
        flat = d.sample(n, phase, gen)
        rays = d.rays(flat)
        ctx = model.context(d.stack, d.scene.near, d.scene.far, static_only=(phase == 1))
        labels, has_label, fg = d.labels[flat], d.has_label[flat], d.is_fg[flat]
        put("rgb", d.rgb[flat])
        put("labels", labels)
        put("bg_labeled", has_label & ~fg)
        if phase == 1:
            out = model.render_static(ctx, rays, jitter=cfg.jitter, generator=gen)
        else:
            fg_labeled = torch.nonzero(has_label & fg).squeeze(1)[:n_consist]
            tau = choose_tau(rays.frame[fg_labeled], d.stack.n_frames, gen)
            out = model.render(ctx, rays, jitter=cfg.jitter, generator=gen, consist_idx=fg_labeled, tau=tau)
            N = d.stack.n_frames
            put("labeled", has_label)
            put("fg_labeled", has_label & fg)
            put("flow_fwd", d.flow_fwd[flat]); put("flow_bwd", d.flow_bwd[flat])
            put("fwd_ok", rays.frame < N - 1); put("bwd_ok", rays.frame > 0)
            for k in ("rgb_dy", "rgb_full", "sem_dy", "sem_full", "flow_fwd_pred", "flow_bwd_pred", "depth_full"):
                src = {"flow_fwd_pred": out.flow_fwd, "flow_bwd_pred": out.flow_bwd}.get(k)
                put(k, getattr(out, k) if src is None else src)
            put("depth", d.depth[flat])
            if out.sem_consist is not None:
                put("sem_consist", out.sem_consist)
                put("consist_labels", labels[fg_labeled])
        put("rgb_st", out.rgb_st)
        put("sem_st", out.sem_st)
    c = {k: torch.cat(v) for k, v in collected.items()}
    terms = {
        "st_rgb": loss_rgb(c["rgb_st"], c["rgb"], c["bg_labeled"]),
        "st_sem": loss_semantic(c["sem_st"], c["labels"], c["bg_labeled"]),
    }
    if phase == 2:
        fwd_ok, bwd_ok = c["fwd_ok"], c["bwd_ok"]
        flow_err = torch.cat([(c["flow_fwd_pred"] - c["flow_fwd"]).abs()[fwd_ok],
                              (c["flow_bwd_pred"] - c["flow_bwd"]).abs()[bwd_ok]])
        terms.update({
            "dy_rgb": loss_rgb(c["rgb_dy"], c["rgb"]),
            "full_rgb": loss_rgb(c["rgb_full"], c["rgb"]),
            "opt": flow_err.mean() if flow_err.numel() else flow_err.sum() * 0.0,
            "full_sem": loss_semantic(c["sem_full"], c["labels"], c["labeled"]),
            "dy_sem": loss_semantic(c["sem_dy"], c["labels"], c["fg_labeled"]),
            "consist": (loss_consistency(c["sem_consist"], c["consist_labels"]) if "sem_consist" in c
                        else c["rgb_full"].sum() * 0.0),
        })
        if cfg.depth_weight > 0:
            terms["depth"] = (c["depth_full"] - c["depth"]).abs().mean()
    return terms


def run_training(scenes, cfg: TrainConfig, out_dir=None, log_path=None, progress=None,
                 data_paths: Sequence[str] = ()) -> TrainResult:
    """Two-phase training: static pretraining on background pixels, then the joint model.

    ``scenes`` is one scene or a list (rays split evenly across them). The
    per-step log is returned and, when ``log_path`` or ``out_dir`` is given,
    written as CSV. Checkpoints go to ``out_dir``.
    """
    if not isinstance(scenes, (list, tuple)):
        scenes = [scenes]
    classes = {s.num_classes for s in scenes}
    if len(classes) != 1:
        raise ConfigError("all training scenes must share the class count")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = SemanticFlowModel(cfg.model_config(classes.pop()), seed=cfg.seed)
    if cfg.init_ckpt:
        load_checkpoint(cfg.init_ckpt, model.param_blocks())
    data = [SceneData(s, cfg.label_schedule) for s in scenes]
    counts = _split(cfg.batch_rays, len(data))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "train_log.csv"
    extra = {"data": ",".join(str(p) for p in data_paths)} if data_paths else {}

    header = ["step", *TERMS, "total", "wall_ms"]
    log: list[dict] = []
    log_file = writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(header)

    def checkpoint(name):
        if out_dir is None:
            return None
        path = save_checkpoint(out_dir / name, model.param_blocks())
        write_config(cfg, path.with_suffix(".cfg"), extra)
        return path

    start = time.perf_counter()
    last_path = None
    step = 0
    try:
        phases = [(1, cfg.static_steps, STATIC_BLOCKS)]
        phases.append((2, cfg.dynamic_steps, DYNAMIC_BLOCKS if cfg.freeze_static else STATIC_BLOCKS + DYNAMIC_BLOCKS))
        for phase, steps, names in phases:
            blocks = model.param_blocks(names)
            opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
            for _ in range(steps):
                step += 1
                good = [b.copy() for b in model.param_blocks()]
                for b in model.param_blocks():
                    b.zero_grad()
                try:
                    terms = compute_terms(model, data, counts, phase, cfg, gen)
                    total = loss_total(terms, cfg.weights, cfg.depth_weight)
                    total.backward()
                    adam_step(opt, blocks)
                except (NonFiniteLoss, NonFiniteError) as e:
                    model.set_blocks(good)
                    path = checkpoint("last_good.sfck")
                    raise TrainingDiverged(step, str(e), path) from e
                row = {"step": step}
                row.update({t: float(terms[t].detach()) if t in terms else 0.0 for t in TERMS})
                row["total"] = float(total.detach())
                row["wall_ms"] = (time.perf_counter() - start) * 1000.0
                log.append(row)
                if writer is not None:
                    writer.writerow([row["step"], *(f"{row[t]:.9g}" for t in TERMS), f"{row['total']:.9g}",
                                     f"{row['wall_ms']:.1f}"])
                    if step % 50 == 0:
                        log_file.flush()
                if progress is not None:
                    progress(row)
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    last_path = checkpoint(f"step_{step:06d}.sfck")
        last_path = checkpoint("final.sfck") or last_path
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, log, last_path)


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def model_from_checkpoint(path, num_classes: int | None = None) -> tuple[SemanticFlowModel, TrainConfig, dict]:
    """Rebuild a model from ``<ckpt>`` and its ``<ckpt>.cfg`` sidecar."""
    side = Path(path).with_suffix(".cfg")
    text = side.read_text() if side.exists() else ""
    extra = {}
    lines = []
    for line in text.splitlines():
        key = line.split("=", 1)[0].strip()
        if key in ("data", "num_classes"):
            extra[key] = line.split("=", 1)[1].strip()
        else:
            lines.append(line)
    cfg = parse_config("\n".join(lines))
    L = num_classes or int(extra.get("num_classes", 0)) or None
    if L is None:
        from .checkpoint import read_checkpoint
        L = read_checkpoint(path)["sem_st/fc2.W"].shape[1]
    model = SemanticFlowModel(cfg.model_config(L), seed=cfg.seed)
    load_checkpoint(path, model.param_blocks())
    return model, cfg, extra
