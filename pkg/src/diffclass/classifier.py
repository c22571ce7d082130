"""Diffusion classifier: per-class reconstruction errors and decision rules.

A sample is noised at N (eps, lam) pairs, denoised under every candidate
class, and the per-step squared errors form an ``(B, C, N)`` error tensor.
Two decision rules read that tensor: the lowest mean error ("average") and
a per-step argmin vote ("majority").
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .denoiser import Denoiser
from .schedule import T_MAX, T_MIN, NoiseSchedule, convert_prediction, forward_diffuse

RULES = ("average", "majority")


@dataclass(frozen=True)
class NoiseLevelSet:
    """N noise levels with one standard-normal draw per level.

    ``eps`` has shape (N, *shape); for batched classification ``shape``
    starts with the batch size, so every sample gets its own eps_k while the
    lam_k sequence is shared by the whole batch.
    """

    t: torch.Tensor  # (N,) float64
    lambdas: torch.Tensor  # (N,) float64
    eps: torch.Tensor  # (N, *shape)
    seed: int

    @property
    def N(self) -> int:
        return len(self.lambdas)

    def prefix(self, n: int) -> "NoiseLevelSet":
        if not 1 <= n <= self.N:
            raise ValueError(f"prefix length {n} outside [1, {self.N}]")
        return NoiseLevelSet(self.t[:n], self.lambdas[:n], self.eps[:n], self.seed)


def sample_noise_set(N: int, schedule: NoiseSchedule, shape: Sequence[int], seed: int,
                     dtype=torch.float32) -> NoiseLevelSet:
    """Draw N pairs deterministically from ``seed``.

    Times and noise come from two independent streams, so the first n pairs
    of a set are identical to a set drawn with N=n and the same seed.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    t_seed, eps_seed = np.random.SeedSequence(seed).spawn(2)
    u = np.random.default_rng(t_seed).random(N)
    t = torch.from_numpy(T_MIN + (T_MAX - T_MIN) * u)
    eps = np.random.default_rng(eps_seed).standard_normal((N, *shape), dtype=np.float32)
    return NoiseLevelSet(t, schedule.log_snr(t), torch.from_numpy(eps).to(dtype), seed)


def reconstruction_errors(x_batch: torch.Tensor, S: NoiseLevelSet | Sequence[NoiseLevelSet],
                          denoiser: Denoiser, conditions: Sequence[int] | None = None,
                          error_space: str = "x", chunk_size: int = 4096) -> np.ndarray:
    """Per-step squared errors, shape (B, C, N), mean over pixels.

    ``S`` is normally one shared set used for every condition. Passing one set
    per condition gives the independent-noise variant (for variance studies).
    ``error_space="eps"`` scores noise predictions instead of x-space
    reconstructions.
    """
    x_batch = torch.as_tensor(x_batch)
    if conditions is None:
        conditions = range(denoiser.contract.num_classes)
    conditions = list(conditions)
    sets = list(S) if not isinstance(S, NoiseLevelSet) else [S] * len(conditions)
    if len(sets) != len(conditions):
        raise ValueError("need exactly one noise set per condition")
    N = sets[0].N
    if any(s.N != N for s in sets):
        raise ValueError("all noise sets must share N")
    if error_space not in ("x", "eps"):
        raise ValueError(f"unknown error space {error_space!r}")
    B, C = len(x_batch), len(conditions)
    per_pixel = int(np.prod(x_batch.shape[1:]))
    errors = np.empty((B, C, N), dtype=np.float64)
    shared = isinstance(S, NoiseLevelSet)
    cond = torch.as_tensor(conditions, dtype=torch.long)

    def _eps(s: NoiseLevelSet, k: int) -> torch.Tensor:
        e = s.eps[k]
        if e.shape == x_batch.shape[1:]:
            e = e.expand_as(x_batch)
        if e.shape != x_batch.shape:
            raise ValueError(f"noise shape {tuple(s.eps.shape[1:])} does not fit batch "
                             f"{tuple(x_batch.shape)}")
        return e.to(x_batch.dtype)

    # one network call evaluates a block of (sample, class) pairs at step k
    rows_per_call = max(1, chunk_size // C)
    for k in range(N):
        if shared:
            lam = sets[0].lambdas[k]
            z = forward_diffuse(x_batch, lam, _eps(sets[0], k))
            z_all = z.unsqueeze(1).expand(B, C, *x_batch.shape[1:])
            eps_all = _eps(sets[0], k).unsqueeze(1).expand_as(z_all)
            lam_all = lam.expand(B, C)
        else:
            zs, es = [], []
            for s in sets:
                e = _eps(s, k)
                zs.append(forward_diffuse(x_batch, s.lambdas[k], e))
                es.append(e)
            z_all = torch.stack(zs, dim=1)
            eps_all = torch.stack(es, dim=1)
            lam_all = torch.stack([s.lambdas[k] for s in sets]).expand(B, C)
        for start in range(0, B, rows_per_call):
            stop = min(B, start + rows_per_call)
            n = (stop - start) * C
            z_blk = z_all[start:stop].reshape(n, *x_batch.shape[1:])
            lam_blk = lam_all[start:stop].reshape(n)
            c_blk = cond.expand(stop - start, C).reshape(n)
            try:
                x_hat = denoiser.denoise(z_blk, lam_blk, c_blk)
            except Exception as exc:
                raise RuntimeError(f"denoiser failed at step {k}, samples {start}..{stop - 1}, "
                                   f"classes {conditions}: {exc}") from exc
            if error_space == "x":
                target = x_batch[start:stop].unsqueeze(1).expand(-1, C, *x_batch.shape[1:])
                pred = x_hat
            else:
                target = eps_all[start:stop]
                pred = convert_prediction(z_blk, x_hat, "x", "eps", lam_blk)
            target = target.reshape(n, *x_batch.shape[1:])
            err = (target.double() - pred.double()).pow(2).reshape(n, per_pixel).mean(1)
            errors[start:stop, :, k] = err.reshape(stop - start, C).cpu().numpy()
    if not np.all(np.isfinite(errors)):
        bad = np.argwhere(~np.isfinite(errors))[0]
        raise FloatingPointError(f"non-finite reconstruction error at (sample, class, step) = "
                                 f"{tuple(int(i) for i in bad)}")
    return errors


# --------------------------------------------------------------------------
# Decision rules
# --------------------------------------------------------------------------


@dataclass
class ClassificationResult:
    predicted: np.ndarray  # (B,)
    votes: np.ndarray  # (B, C)
    posterior: np.ndarray  # (B, C)
    mean_errors: np.ndarray  # (B, C)
    rule: str
    errors: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return int(self.votes[0].sum()) if len(self.votes) else 0


def _check_errors(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 3:
        raise ValueError(f"error tensor must be (B, C, N), got shape {e.shape}")
    return e


def vote_counts(e) -> np.ndarray:
    """Per-class count of steps where that class had the lowest error (lowest index on ties)."""
    e = _check_errors(e)
    winners = e.argmin(axis=1)  # (B, N)
    C = e.shape[1]
    return np.stack([np.bincount(row, minlength=C) for row in winners]) if len(e) \
        else np.zeros((0, C), dtype=np.int64)


def posterior_softmax(e) -> np.ndarray:
    """softmax over classes of the negative mean error."""
    e = _check_errors(e)
    logits = -e.mean(axis=2)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def average_rule(e) -> ClassificationResult:
    e = _check_errors(e)
    mean = e.mean(axis=2)
    return ClassificationResult(mean.argmin(axis=1), vote_counts(e), posterior_softmax(e),
                                mean, "average", e)


def majority_rule(e, tie_break_by_error: bool = False) -> ClassificationResult:
    """Majority of per-step argmin votes.

    Vote ties go to the lowest class index, or with ``tie_break_by_error`` to
    the lowest mean error among the tied classes.
    """
    e = _check_errors(e)
    votes = vote_counts(e)
    mean = e.mean(axis=2)
    if tie_break_by_error:
        tied = votes == votes.max(axis=1, keepdims=True)
        predicted = np.where(tied, mean, np.inf).argmin(axis=1)
    else:
        predicted = votes.argmax(axis=1)
    return ClassificationResult(predicted, votes, posterior_softmax(e), mean, "majority", e)


def decide(e, rule: str, tie_break_by_error: bool = False) -> ClassificationResult:
    if rule == "average":
        return average_rule(e)
    if rule == "majority":
        return majority_rule(e, tie_break_by_error)
    raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")


def classify(x_batch, denoiser: Denoiser, schedule: NoiseSchedule, N: int, rule: str = "majority",
             seed: int = 0, error_space: str = "x", tie_break_by_error: bool = False,
             chunk_size: int = 4096) -> ClassificationResult:
    """Noise set -> error tensor -> decision. Votes and posterior are always filled in."""
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")
    x_batch = torch.as_tensor(x_batch)
    S = sample_noise_set(N, schedule, tuple(x_batch.shape), seed, dtype=x_batch.dtype)
    e = reconstruction_errors(x_batch, S, denoiser, error_space=error_space, chunk_size=chunk_size)
    return decide(e, rule, tie_break_by_error)
