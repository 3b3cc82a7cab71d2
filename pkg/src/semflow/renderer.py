"""Discretized volume rendering along rays.

Every rendered quantity (color, semantic logits, flow displacement) is a
weighted sum ``sum_i w_i V_i`` with ``w_i = T_i (1 - exp(-sigma_i delta_i))``.
The final interval is capped at ``(far - near) / M``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple[float, float] = (0.0, 0.0)
    time: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    def at(self, u):
        return self.origin + np.asarray(u)[..., None] * self.direction


@dataclass
class RayQuadrature:
    depths: torch.Tensor
    deltas: torch.Tensor
    alphas: torch.Tensor
    transmittance: torch.Tensor
    weights: torch.Tensor

    def integrate(self, values: torch.Tensor) -> torch.Tensor:
        return integrate(self.weights, values)

    def expected_depth(self) -> torch.Tensor:
        return (self.weights * self.depths).sum(-1)


def sample_ray(near, far, M: int, jitter: bool = False, generator: torch.Generator | None = None,
               batch: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Stratified depths ``u_i = near + (i + xi_i) / M * (far - near)``.

    ``xi_i`` is 0.5 without jitter, else uniform in ``[0, 1)``. ``near`` and
    ``far`` may be floats or ``(B,)`` tensors; the result is ``(B, M)`` (or
    ``(M,)`` for scalars without ``batch``).
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    near = torch.as_tensor(near, dtype=dtype)
    far = torch.as_tensor(far, dtype=dtype)
    shape = tuple(near.shape) if near.dim() else ((batch,) if batch else ())
    i = torch.arange(M, dtype=dtype)
    if jitter:
        xi = torch.rand(*shape, M, generator=generator, dtype=dtype)
    else:
        xi = torch.full((*shape, M), 0.5, dtype=dtype)
    return near[..., None] + (i + xi) / M * (far - near)[..., None]


def deltas_from_depths(depths: torch.Tensor, last_delta) -> torch.Tensor:
    last = torch.as_tensor(last_delta, dtype=depths.dtype).expand(depths.shape[:-1]).unsqueeze(-1)
    return torch.cat([depths[..., 1:] - depths[..., :-1], last], dim=-1)


def _exclusive_cumprod(x: torch.Tensor) -> torch.Tensor:
    ones = torch.ones_like(x[..., :1])
    return torch.cumprod(torch.cat([ones, x[..., :-1]], dim=-1), dim=-1)


def quadrature(depths: torch.Tensor, sigmas: torch.Tensor, last_delta) -> RayQuadrature:
    if sigmas.shape != depths.shape:
        raise ValueError(f"sigmas {tuple(sigmas.shape)} not aligned with depths {tuple(depths.shape)}")
    if (sigmas < 0).any():
        raise ValueError("negative density")
    deltas = deltas_from_depths(depths, last_delta)
    alphas = 1.0 - torch.exp(-sigmas * deltas)
    # product of exp(-sigma delta) computed in log space is exact and avoids 0*inf
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(sigmas[..., :1]),
                                               (sigmas * deltas)[..., :-1]], dim=-1), dim=-1))
    return RayQuadrature(depths, deltas, alphas, trans, trans * alphas)


def integrate(weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """``sum_i w_i V_i`` over the sample axis; ``values`` is ``(..., M, K)``."""
    if values.shape[:-1] != weights.shape:
        raise ValueError(f"values {tuple(values.shape)} not aligned with weights {tuple(weights.shape)}")
    return (weights.unsqueeze(-1) * values).sum(-2)


@dataclass
class BlendQuadrature:
    """Shared transmittance for the blended static/dynamic density.

    ``factor_i = T_i * alpha_i / sigma_i`` multiplies the blended integrand
    ``(1-b) sigma_st V_st + b sigma_dy V_dy``; for ``sigma_i -> 0`` the factor
    tends to ``T_i delta_i``.
    """

    quad: RayQuadrature
    factor: torch.Tensor
    sigma_st: torch.Tensor
    sigma_dy: torch.Tensor
    blend: torch.Tensor

    def integrate(self, v_st: torch.Tensor, v_dy: torch.Tensor) -> torch.Tensor:
        ws = (self.factor * (1.0 - self.blend) * self.sigma_st).unsqueeze(-1)
        wd = (self.factor * self.blend * self.sigma_dy).unsqueeze(-1)
        return (ws * v_st + wd * v_dy).sum(-2)

    @property
    def weights(self) -> torch.Tensor:
        return self.quad.weights


def blend_quadrature(depths, sigma_st, sigma_dy, blend, last_delta) -> BlendQuadrature:
    if not (sigma_st.shape == sigma_dy.shape == blend.shape == depths.shape):
        raise ValueError("static and dynamic branches must be sampled at identical depths")
    sigma_full = (1.0 - blend) * sigma_st + blend * sigma_dy
    q = quadrature(depths, sigma_full, last_delta)
    tiny = 1e-6 if depths.dtype == torch.float32 else 1e-12
    small = sigma_full < tiny
    safe = torch.where(small, torch.ones_like(sigma_full), sigma_full)
    factor = torch.where(small, q.transmittance * q.deltas, q.transmittance * q.alphas / safe)
    return BlendQuadrature(q, factor, sigma_st, sigma_dy, blend)


def blend(depths, sigma_st, v_st, sigma_dy, v_dy, b, last_delta) -> torch.Tensor:
    """Render the blended field: density ``(1-b)s_st + b s_dy`` with the matching integrand."""
    return blend_quadrature(depths, sigma_st, sigma_dy, b, last_delta).integrate(v_st, v_dy)
