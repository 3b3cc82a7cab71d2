"""Differentiable building blocks shared by every learned component.

Tensors are plain ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd. Layers are written functionally over :class:`ParamBlock`
containers so that parameters can be cast, checkpointed and gradchecked
without going through ``nn.Module`` state.

Affine weights are stored as ``(fan_in, fan_out)`` and applied as
``x @ W + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ParamBlock:
    """Named collection of learnable tensors belonging to one network."""

    def __init__(self, name: str, tensors: Mapping[str, torch.Tensor] | None = None):
        self.name = name
        self.tensors: dict[str, torch.Tensor] = {}
        for key, value in (tensors or {}).items():
            self.add(key, value)

    def add(self, key: str, tensor: torch.Tensor) -> torch.Tensor:
        if key in self.tensors:
            raise KeyError(f"duplicate tensor {key!r} in block {self.name!r}")
        if not torch.is_floating_point(tensor):
            raise TypeError(f"{self.name}.{key} must be floating point")
        tensor = tensor.detach().clone().requires_grad_(True)
        self.tensors[key] = tensor
        return tensor

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.tensors[key]

    def __contains__(self, key: str) -> bool:
        return key in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def qualified(self) -> dict[str, torch.Tensor]:
        return {f"{self.name}/{k}": v for k, v in self.tensors.items()}

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def to(self, dtype: torch.dtype) -> "ParamBlock":
        return ParamBlock(self.name, {k: v.detach().to(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.name, {k: v.detach() for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def check_finite(self) -> None:
        for k, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise NonFiniteError(f"non-finite values in {self.name}/{k}")

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{tuple(v.shape)}" for k, v in self.tensors.items())
        return f"ParamBlock({self.name!r}, {shapes})"


def _uniform(shape, bound: float, gen: torch.Generator) -> torch.Tensor:
    return (torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound


def init_affine(block: ParamBlock, prefix: str, fan_in: int, fan_out: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    block.add(f"{prefix}.W", _uniform((fan_in, fan_out), bound, gen))
    block.add(f"{prefix}.b", _uniform((fan_out,), bound, gen))


def affine(block: ParamBlock, prefix: str, x: torch.Tensor) -> torch.Tensor:
    W = block[f"{prefix}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"{block.name}/{prefix}: input width {x.shape[-1]} != {W.shape[0]}")
    return x @ W + block[f"{prefix}.b"]


def make_residual_mlp(name: str, in_dim: int, width: int, blocks: int, out_dim: int,
                      gen: torch.Generator) -> ParamBlock:
    p = ParamBlock(name)
    init_affine(p, "in", in_dim, width, gen)
    for i in range(blocks):
        init_affine(p, f"block{i}.fc0", width, width, gen)
        init_affine(p, f"block{i}.fc1", width, width, gen)
    init_affine(p, "out", width, out_dim, gen)
    return p


def residual_mlp(params: ParamBlock, x: torch.Tensor, width: int, blocks: int) -> torch.Tensor:
    """Input projection, ``blocks`` residual units, output projection.

    Each unit computes ``h + fc1(relu(fc0(relu(h))))``. Neither the input nor
    the output projection is followed by an activation.
    """
    missing = blocks > 0 and f"block{blocks - 1}.fc1.W" not in params
    if params["in.W"].shape[1] != width or missing or f"block{blocks}.fc0.W" in params:
        raise ShapeError(f"{params.name}: parameters not sized for width={width}, blocks={blocks}")
    h = affine(params, "in", x)
    for i in range(blocks):
        r = affine(params, f"block{i}.fc0", torch.relu(h))
        h = h + affine(params, f"block{i}.fc1", torch.relu(r))
    return affine(params, "out", h)


def make_mlp(name: str, dims: Sequence[int], gen: torch.Generator) -> ParamBlock:
    p = ParamBlock(name)
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_affine(p, f"fc{i}", a, b, gen)
    return p


def mlp(params: ParamBlock, x: torch.Tensor, final_activation: bool = False) -> torch.Tensor:
    """Plain fully connected stack with ReLU between layers."""
    n = sum(1 for k in params if k.endswith(".W"))
    for i in range(n):
        x = affine(params, f"fc{i}", x)
        if i < n - 1 or final_activation:
            x = torch.relu(x)
    return x


def sinusoidal_embed(x: torch.Tensor, num_freqs: int, include_input: bool = True) -> torch.Tensor:
    """Lift the last axis to a sinusoidal basis.

    Components are grouped per input dimension ``d`` as
    ``[x_d, sin(x_d), cos(x_d), sin(2 x_d), cos(2 x_d), ..., cos(2^(F-1) x_d)]``
    (``x_d`` omitted when ``include_input`` is false).
    """
    if num_freqs < 0:
        raise ValueError("num_freqs must be >= 0")
    freqs = 2.0 ** torch.arange(num_freqs, dtype=x.dtype, device=x.device)
    scaled = x.unsqueeze(-1) * freqs
    parts = torch.stack([torch.sin(scaled), torch.cos(scaled)], dim=-1).flatten(-2)
    if include_input:
        parts = torch.cat([x.unsqueeze(-1), parts], dim=-1)
    return parts.flatten(-2)


def embed_dim(in_dim: int, num_freqs: int, include_input: bool = True) -> int:
    return in_dim * (2 * num_freqs + int(include_input))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    m = x.amax(dim=dim, keepdim=True).detach()
    z = x - m
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def crossentropy(logits: torch.Tensor, target, reduction: str = "mean") -> torch.Tensor:
    """Negative log softmax probability of ``target`` along the last axis.

    ``target`` may be an int (single logits vector) or an integer tensor
    matching ``logits.shape[:-1]``. Reduction is ``"mean"``, ``"sum"`` or
    ``"none"``.
    """
    L = logits.shape[-1]
    target = torch.as_tensor(target, device=logits.device, dtype=torch.long)
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {tuple(target.shape)} vs logits {tuple(logits.shape)}")
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= L):
        raise IndexError(f"target class out of range [0, {L})")
    nll = -log_softmax(logits).gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    if nll.numel() == 0:
        return logits.sum() * 0.0
    return nll.mean()


def make_attention(name: str, channels: int, gen: torch.Generator) -> ParamBlock:
    p = ParamBlock(name)
    bound = 1.0 / math.sqrt(channels)
    for key in ("W_q", "W_k", "W_v"):
        p.add(key, _uniform((channels, channels), bound, gen))
    return p


def multi_head_attention(params: ParamBlock, X: torch.Tensor, heads: int,
                         mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product self-attention over the rows of ``X``.

    Args:
        X: ``(..., N, C)`` token matrix.
        heads: number of heads ``H``; ``C`` must be divisible by it.
        mask: optional ``(..., N)`` boolean; false rows are excluded as keys.

    Returns:
        ``(..., N, C)``; columns ``h*d_k:(h+1)*d_k`` hold head ``h``'s output.
    """
    C = X.shape[-1]
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by heads {heads}")
    if params["W_q"].shape != (C, C):
        raise ShapeError(f"{params.name}: expected {C}x{C} projections")
    dk = C // heads
    lead, N = X.shape[:-2], X.shape[-2]

    def split(M):
        return M.reshape(*lead, N, heads, dk).transpose(-2, -3)  # (..., H, N, dk)

    Q, K, V = X @ params["W_q"], X @ params["W_k"], X @ params["W_v"]
    if N <= 8:
        return _few_row_attention(Q, K, V, heads, mask)
    Q, K, V = split(Q), split(K), split(V)
    logits = Q @ K.transpose(-1, -2) / math.sqrt(dk)
    if mask is not None:
        neg = torch.finfo(X.dtype).min
        logits = logits.masked_fill(~mask[..., None, None, :], neg)
    A = softmax(logits, dim=-1) @ V
    return A.transpose(-2, -3).reshape(*lead, N, C)


def _few_row_attention(Q, K, V, heads, mask):
    # With only a few rows per set, batched matmuls degenerate into millions
    # of tiny products. Per-head dot products are instead formed as elementwise
    # products followed by one matmul with a head indicator matrix.
    C = Q.shape[-1]
    dk = C // heads
    member = torch.zeros(C, heads, dtype=Q.dtype)
    member[torch.arange(C), torch.arange(C) // dk] = 1.0
    logits = (Q.unsqueeze(-2) * K.unsqueeze(-3)) @ member / math.sqrt(dk)   # (..., Nq, Nk, H)
    if mask is not None:
        logits = logits.masked_fill(~mask[..., None, :, None], torch.finfo(Q.dtype).min)
    P = softmax(logits, dim=-2)
    return ((P @ member.T) * V.unsqueeze(-3)).sum(-2)


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def _as_blocks(params) -> list[ParamBlock]:
    if isinstance(params, ParamBlock):
        return [params]
    return list(params)


@torch.no_grad()
def adam_step(state: AdamState, params: ParamBlock | Iterable[ParamBlock],
              grads: Mapping[str, torch.Tensor] | None = None) -> AdamState:
    """Bias-corrected Adam update applied in place.

    ``grads`` is keyed by qualified name ``"block/tensor"``; when omitted the
    ``.grad`` attribute of each tensor is used (missing grads count as zero).
    """
    blocks = _as_blocks(params)
    named = {}
    for blk in blocks:
        named.update(blk.qualified())
    resolved = {}
    for key, p in named.items():
        g = grads.get(key) if grads is not None else p.grad
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {key}")
        resolved[key] = g

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for key, p in named.items():
        g = resolved[key]
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = torch.zeros_like(p)
            state.v[key] = torch.zeros_like(p)
        v = state.v[key]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.lr == 0.0:
            continue
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.sub_(state.lr * (m / bc1) / denom)
    return state


# --------------------------------------------------------------------------- gradcheck

class GradcheckError(RuntimeError):
    pass


@dataclass
class GradcheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    error: float


@dataclass
class GradcheckReport:
    passed: bool
    tol: float
    checked: int
    max_error: float
    worst: list[GradcheckEntry]
    nonsmooth: int = 0

    def summary(self) -> str:
        head = (f"{'PASS' if self.passed else 'FAIL'} checked={self.checked} max_err={self.max_error:.3e} "
                f"tol={self.tol:g} nonsmooth_skipped={self.nonsmooth}")
        rows = [f"  {e.name}{list(e.index)} analytic={e.analytic:.6e} numeric={e.numeric:.6e} err={e.error:.2e}"
                for e in self.worst]
        return "\n".join([head, *rows])


def gradcheck(f: Callable, params, h: float = 1e-3, tol: float = 1e-3,
              samples_per_tensor: int = 6, seed: int = 0, worst_k: int = 5,
              skip_nonsmooth: bool = True) -> GradcheckReport:
    """Compare autograd gradients of a scalar function to central differences.

    ``params`` (a ParamBlock or a sequence of them) is copied to float64 and
    passed to ``f`` in the same structure. Up to ``samples_per_tensor``
    coordinates per tensor are probed; the error of a coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.

    ReLU networks are piecewise linear, so a probe of width ``h`` may straddle
    a kink, where no finite difference is meaningful. Central differences at
    ``h`` and ``h/2`` agree to second order on smooth coordinates but differ
    by a finite jump across a kink; with ``skip_nonsmooth`` such coordinates
    are replaced by fresh draws and counted in ``nonsmooth``. The check fails
    if more than half of all probes were skipped.
    """
    single = isinstance(params, ParamBlock)
    blocks = [b.to(torch.float64) for b in _as_blocks(params)]
    arg = blocks[0] if single else blocks

    def evaluate() -> float:
        with torch.no_grad():
            val = f(arg)
        val = float(val)
        if not math.isfinite(val):
            raise GradcheckError("function evaluated to a non-finite value")
        return val

    out = f(arg)
    if out.numel() != 1:
        raise GradcheckError("gradcheck needs a scalar-valued function")
    if not torch.isfinite(out):
        raise GradcheckError("function evaluated to a non-finite value")
    tensors = [(f"{b.name}/{k}", t) for b in blocks for k, t in b.items()]
    grads = torch.autograd.grad(out, [t for _, t in tensors], allow_unused=True)

    def central(flat, i, step) -> float:
        orig = float(flat[i])
        flat[i] = orig + step
        fp = evaluate()
        flat[i] = orig - step
        fm = evaluate()
        flat[i] = orig
        return (fp - fm) / (2 * step)

    rng = np.random.default_rng(seed)
    entries: list[GradcheckEntry] = []
    skipped = 0
    for (name, t), g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        n = t.numel()
        order = rng.permutation(n)
        want = min(n, samples_per_tensor)
        flat = t.data.view(-1)
        taken = 0
        for i in order:
            if taken == want:
                break
            i = int(i)
            num = central(flat, i, h)
            if skip_nonsmooth and abs(num - central(flat, i, h / 2)) > 0.5 * tol * max(1.0, abs(num)):
                skipped += 1
                continue
            ana = float(g.reshape(-1)[i])
            err = abs(ana - num) / max(1.0, abs(num))
            entries.append(GradcheckEntry(name, tuple(int(j) for j in np.unravel_index(i, t.shape)), ana, num, err))
            taken += 1
    entries.sort(key=lambda e: e.error, reverse=True)
    max_err = entries[0].error if entries else 0.0
    passed = max_err <= tol and skipped <= len(entries)
    return GradcheckReport(passed, tol, len(entries), max_err, entries[:worst_k], skipped)
