"""Classifier-free guidance and counterfactual reconstructions.

An input is noised to a fixed level t*, then denoised back with a
deterministic re-projection sampler under the source class (factual) and the
target class (counterfactual). Both branches start from the same noisy
sample, so their difference isolates what the condition changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import NULL_CLASS, Denoiser, _conditions
from .schedule import T_MAX, T_MIN, NoiseSchedule, alpha_sigma, _expand, forward_diffuse

SAMPLERS = ("ddim",)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 7.5
    noise_level: float = 0.5
    sampler_steps: int = 50
    sampler_kind: str = "ddim"

    def __post_init__(self):
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")
        if not T_MIN <= self.noise_level <= T_MAX:
            raise ValueError(f"noise_level must lie in [{T_MIN}, {T_MAX}]")
        if self.sampler_kind not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler_kind!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CounterfactualResult:
    factual: torch.Tensor
    counterfactual: torch.Tensor
    difference: torch.Tensor
    source_class: list[int]
    target_class: list[int]


def cfg_denoise(z, lam, c, w: float, denoiser: Denoiser) -> torch.Tensor:
    """(1 + w) x_hat(z, c) - w x_hat(z, null)."""
    if not denoiser.contract.supports_null_condition:
        raise ValueError("classifier-free guidance needs a denoiser with a null condition")
    c = _conditions(c, len(z))
    cond = denoiser.denoise(z, lam, c)
    if w == 0:
        return cond
    uncond = denoiser.denoise(z, lam, torch.full_like(c, NULL_CLASS))
    return (1 + w) * cond - w * uncond


def reverse_sample(z_start: torch.Tensor, t_start: float, c, config: GuidanceConfig,
                   denoiser: Denoiser, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic reverse trajectory from t_start towards t=0.

    K = ``config.sampler_steps`` evaluations at t_start (1 - k/K), k < K. Each
    step guides an x estimate, recovers the implied noise and re-projects onto
    the next, lower noise level. The last guided x estimate is returned.
    """
    if not 0 < t_start < 1:
        raise ValueError("t_start must lie in (0, 1)")
    K = config.sampler_steps
    times = torch.linspace(t_start, 0.0, K + 1, dtype=torch.float64)
    z = z_start
    x_tilde = None
    for k in range(K):
        lam = schedule.log_snr(times[k])
        x_tilde = cfg_denoise(z, lam, c, config.scale, denoiser)
        if not torch.all(torch.isfinite(x_tilde)):
            raise FloatingPointError(f"non-finite sample at reverse step {k}")
        if k == K - 1:
            break
        alpha, sigma = alpha_sigma(lam)
        eps_tilde = (z - _expand(alpha, z) * x_tilde) / _expand(sigma, z)
        a_next, s_next = alpha_sigma(schedule.log_snr(times[k + 1]))
        z = _expand(a_next, z) * x_tilde + _expand(s_next, z) * eps_tilde
    return x_tilde


def counterfactual(x: torch.Tensor, source_class, target_class, config: GuidanceConfig,
                   denoiser: Denoiser, schedule: NoiseSchedule, seed: int = 0) -> CounterfactualResult:
    """Factual and counterfactual reconstructions of ``x`` from one shared noisy start."""
    x = torch.as_tensor(x)
    n = len(x)
    src, tgt = _conditions(source_class, n), _conditions(target_class, n)
    denoiser.contract.check_conditions(src)
    denoiser.contract.check_conditions(tgt)
    rng = np.random.default_rng(seed)
    eps = torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(x.dtype)
    t_star = config.noise_level
    z = forward_diffuse(x, schedule.log_snr(torch.tensor(t_star, dtype=torch.float64)), eps)
    factual = reverse_sample(z, t_star, src, config, denoiser, schedule)
    cf = reverse_sample(z, t_star, tgt, config, denoiser, schedule)
    return CounterfactualResult(factual, cf, cf - factual, src.tolist(), tgt.tolist())
