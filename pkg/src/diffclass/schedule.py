"""Continuous-time variance-preserving diffusion math.

Time runs from t=0 (clean data) to t=1 (pure noise). Everything is expressed
through the log signal-to-noise ratio ``lam = log(alpha^2 / sigma^2)`` with
``alpha^2 = sigmoid(lam)`` and ``sigma^2 = sigmoid(-lam)``.

All functions accept tensors, numpy arrays or python floats and return torch
tensors. Precision follows the input dtype (float64 unless given a float32
tensor), so the exactness checks in the test suite run in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

SPACES = ("x", "eps", "v")

# t guards used whenever times are *sampled*; tan() is singular at 0 and 1.
T_MIN = 1e-5
T_MAX = 1.0 - 1e-5


def _as_tensor(value, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    dtype = like.dtype if like is not None and like.is_floating_point() else torch.float64
    device = like.device if like is not None else None
    return torch.as_tensor(value, dtype=dtype, device=device)


def _expand(coef: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Broadcast a per-sample coefficient of shape (B,) against x of shape (B, ...)."""
    coef = coef.to(dtype=x.dtype, device=x.device)
    if coef.ndim == 0 or coef.ndim == x.ndim:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


@dataclass(frozen=True)
class NoiseSchedule:
    """Shifted-cosine log-SNR schedule.

    ``log_snr(t) = -2 log tan(pi t / 2) + 2 log(base_resolution / image_resolution)``.
    The shift moves the whole schedule towards lower SNR for images larger
    than ``base_resolution``.
    """

    kind: str = "shifted_cosine"
    base_resolution: int = 64
    image_resolution: int = 256

    def __post_init__(self):
        if self.kind != "shifted_cosine":
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_resolution <= 0 or self.image_resolution <= 0:
            raise ValueError("resolutions must be positive")

    @property
    def shift(self) -> float:
        return 2.0 * math.log(self.base_resolution / self.image_resolution)

    def log_snr(self, t) -> torch.Tensor:
        t = _as_tensor(t)
        if torch.any((t <= 0) | (t >= 1)) or not torch.all(torch.isfinite(t)):
            raise ValueError("log_snr is only defined for t in the open interval (0, 1)")
        return -2.0 * torch.log(torch.tan(math.pi * t / 2)) + self.shift

    def log_snr_inverse(self, lam) -> torch.Tensor:
        lam = _as_tensor(lam)
        if not torch.all(torch.isfinite(lam)):
            raise ValueError("log_snr_inverse needs finite log-SNR values")
        return (2.0 / math.pi) * torch.atan(torch.exp((self.shift - lam) / 2))

    def log_snr_derivative(self, t) -> torch.Tensor:
        """Analytic d(log_snr)/dt = -2 pi / sin(pi t)."""
        t = _as_tensor(t)
        if torch.any((t <= 0) | (t >= 1)):
            raise ValueError("derivative is only defined for t in (0, 1)")
        return -2.0 * math.pi / torch.sin(math.pi * t)

    def noise_density(self, t) -> torch.Tensor:
        """Density p(lam) induced on the log-SNR by t ~ U(0, 1), as a function of t."""
        return -1.0 / self.log_snr_derivative(t)

    def sample_t(self, n: int, generator: torch.Generator | None = None,
                 dtype=torch.float32) -> torch.Tensor:
        u = torch.rand(n, generator=generator, dtype=torch.float64)
        return (T_MIN + (T_MAX - T_MIN) * u).to(dtype)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "base_resolution": self.base_resolution,
                "image_resolution": self.image_resolution}


def log_snr(t, schedule: NoiseSchedule) -> torch.Tensor:
    return schedule.log_snr(t)


def log_snr_inverse(lam, schedule: NoiseSchedule) -> torch.Tensor:
    return schedule.log_snr_inverse(lam)


def noise_density(t, schedule: NoiseSchedule) -> torch.Tensor:
    return schedule.noise_density(t)


def alpha_sigma(lam) -> tuple[torch.Tensor, torch.Tensor]:
    """Signal and noise coefficients, computed in log space for stability."""
    lam = _as_tensor(lam)
    alpha = torch.exp(0.5 * F.logsigmoid(lam))
    sigma = torch.exp(0.5 * F.logsigmoid(-lam))
    return alpha, sigma


def forward_diffuse(x: torch.Tensor, lam, eps: torch.Tensor) -> torch.Tensor:
    """z = alpha * x + sigma * eps. ``lam`` is a scalar or one value per sample."""
    x = _as_tensor(x)
    eps = _as_tensor(eps, like=x)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    alpha, sigma = alpha_sigma(_as_tensor(lam, like=x))
    return _expand(alpha, x) * x + _expand(sigma, x) * eps


def convert_prediction(z: torch.Tensor, value: torch.Tensor, from_space: str,
                       to_space: str, lam) -> torch.Tensor:
    """Convert a prediction between x, eps and v parameterisations at (z, lam).

    Uses ``v = alpha eps - sigma x``. Each pair has a direct formula so no
    round trip goes through a division it does not need.
    """
    for space in (from_space, to_space):
        if space not in SPACES:
            raise ValueError(f"unknown prediction space {space!r}; expected one of {SPACES}")
    z = _as_tensor(z)
    value = _as_tensor(value, like=z)
    if z.shape != value.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs value {tuple(value.shape)}")
    if from_space == to_space:
        return value
    alpha, sigma = alpha_sigma(_as_tensor(lam, like=z))
    a, s = _expand(alpha, z), _expand(sigma, z)
    match from_space, to_space:
        case "v", "x":
            return a * z - s * value
        case "v", "eps":
            return s * z + a * value
        case "x", "eps":
            return (z - a * value) / s
        case "x", "v":
            return (a * z - value) / s
        case "eps", "x":
            return (z - s * value) / a
        case "eps", "v":
            return (value - s * z) / a


def min_snr_weight(lam, gamma: float = 5.0) -> torch.Tensor:
    """min(SNR, gamma) / SNR, evaluated as exp(min(log gamma - lam, 0))."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    lam = _as_tensor(lam)
    return torch.exp(torch.clamp(math.log(gamma) - lam, max=0.0))


def training_loss(x: torch.Tensor, x_hat: torch.Tensor, lam, gamma: float = 5.0) -> torch.Tensor:
    """Min-SNR weighted x-space squared error, averaged over pixels then batch.

    ``lam`` holds one value per sample (or a scalar). With t drawn uniformly the
    1/p(lam) importance factor cancels against the sampling density.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    per_sample = (x - x_hat).pow(2)
    if per_sample.ndim > 1:
        per_sample = per_sample.flatten(1).mean(dim=1)
    weight = min_snr_weight(_as_tensor(lam, like=x), gamma).to(per_sample.dtype)
    return (weight * per_sample).mean()
