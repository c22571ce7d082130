"""Conditional denoisers x_hat(z, lam, c).

Two implementations share one calling convention, ``denoise(z, lam, c)``:

* :class:`TinyDenoiser`, a small conditional conv encoder-decoder that
  predicts v and converts to x-space on the way out;
* :class:`GaussianOracle`, the exact posterior mean for per-class diagonal
  Gaussian data, which makes the classifier maths checkable in closed form.

``c`` is an integer tensor of shape (B,); :data:`NULL_CLASS` selects the
unconditional (classifier-free guidance) branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import norm

from .schedule import _as_tensor, _expand, alpha_sigma, convert_prediction

NULL_CLASS = -1


@dataclass(frozen=True)
class DenoiserContract:
    num_classes: int
    input_shape: tuple[int, ...]
    supports_null_condition: bool = True

    def check_conditions(self, c: torch.Tensor) -> None:
        valid = (c >= 0) & (c < self.num_classes)
        if self.supports_null_condition:
            valid |= c == NULL_CLASS
        if not bool(torch.all(valid)):
            bad = c[~valid].unique().tolist()
            raise ValueError(f"invalid condition index {bad} for {self.num_classes} classes"
                             f"{' (+ null)' if self.supports_null_condition else ''}")

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "input_shape": list(self.input_shape),
                "supports_null_condition": self.supports_null_condition}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserContract":
        return cls(d["num_classes"], tuple(d["input_shape"]), d.get("supports_null_condition", True))


class Denoiser(Protocol):
    contract: DenoiserContract

    def denoise(self, z: torch.Tensor, lam: torch.Tensor, c: torch.Tensor) -> torch.Tensor: ...


def _conditions(c, batch: int, device=None) -> torch.Tensor:
    c = torch.as_tensor(c, dtype=torch.long, device=device)
    if c.ndim == 0:
        c = c.expand(batch)
    return c


def _lambdas(lam, z: torch.Tensor) -> torch.Tensor:
    lam = _as_tensor(lam, like=z).to(z.dtype)
    if lam.ndim == 0:
        lam = lam.expand(z.shape[0])
    return lam


# --------------------------------------------------------------------------
# Trainable network
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TinyDenoiserSpec:
    base_channels: int = 32
    depth: int = 3
    embedding_dim: int = 128
    lambda_embedding: int = 32
    groups: int = 8

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sinusoidal_embedding(lam: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features of the log-SNR at geometrically spaced frequencies.

    Frequencies span 1/64 .. 4 rad per unit log-SNR, enough to resolve the
    roughly [-25, 25] range reached by the guarded schedule.
    """
    half = dim // 2
    freqs = torch.exp(torch.linspace(math.log(1 / 64), math.log(4.0), half,
                                     dtype=torch.float32, device=lam.device))
    angles = lam.float()[:, None] * freqs[None]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TinyDenoiser(nn.Module):
    """Conditional encoder-decoder that predicts v.

    Class and log-SNR embeddings are summed and injected additively in every
    residual block. The null condition owns its own embedding row (index
    ``num_classes``), separate from every real class.
    """

    def __init__(self, contract: DenoiserContract, spec: TinyDenoiserSpec = TinyDenoiserSpec()):
        super().__init__()
        if len(contract.input_shape) != 3:
            raise ValueError("TinyDenoiser expects input_shape = (channels, height, width)")
        channels, height, width = contract.input_shape
        factor = 2 ** (spec.depth - 1)
        if height % factor or width % factor:
            raise ValueError(f"spatial size {height}x{width} not divisible by {factor}")
        self.contract = contract
        self.spec = spec
        ch, emb = spec.base_channels, spec.embedding_dim

        self.lambda_mlp = nn.Sequential(
            nn.Linear(spec.lambda_embedding, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.class_embedding = nn.Embedding(contract.num_classes + 1, emb)

        widths = [ch * min(2 ** i, 2) for i in range(spec.depth)]
        self.conv_in = nn.Conv2d(channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            self.down.append(ResBlock(prev, w, emb, spec.groups))
            prev = w
        self.mid = ResBlock(prev, prev, emb, spec.groups)
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(ResBlock(prev + w, w, emb, spec.groups))
            prev = w
        self.conv_out = nn.Sequential(
            nn.GroupNorm(min(spec.groups, prev), prev), nn.SiLU(),
            nn.Conv2d(prev, channels, 3, padding=1))

    def _embed(self, lam: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        idx = torch.where(c == NULL_CLASS, torch.full_like(c, self.contract.num_classes), c)
        return self.lambda_mlp(sinusoidal_embedding(lam, self.spec.lambda_embedding)) \
            + self.class_embedding(idx)

    def forward(self, z: torch.Tensor, lam: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Raw v prediction."""
        emb = self._embed(lam, c)
        h = self.conv_in(z)
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = block(h, emb)
            skips.append(h)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up):
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.conv_out(h)

    @torch.no_grad()
    def denoise(self, z: torch.Tensor, lam, c) -> torch.Tensor:
        z = _as_tensor(z)
        dtype = z.dtype
        z32 = z.to(torch.float32)
        lam = _lambdas(lam, z32)
        c = _conditions(c, z.shape[0], z.device)
        self.contract.check_conditions(c)
        v = self(z32, lam, c)
        return convert_prediction(z32, v, "v", "x", lam).to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# Gaussian oracle
# --------------------------------------------------------------------------


@dataclass
class GaussianClassModel:
    """Per-class diagonal Gaussians ``x | c ~ N(means[c], diag(variances[c]))``."""

    means: np.ndarray
    variances: np.ndarray
    priors: np.ndarray | None = None
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.broadcast_to(np.asarray(self.variances, dtype=np.float64),
                                         self.means.shape).copy()
        c = self.means.shape[0]
        if self.priors is None:
            self.priors = np.full(c, 1.0 / c)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if np.any(self.variances <= 0):
            raise ValueError("variances must be strictly positive")
        if self.priors.shape != (c,) or np.any(self.priors < 0) or abs(self.priors.sum() - 1) > 1e-9:
            raise ValueError("priors must be a probability vector with one entry per class")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(c)]

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.means.shape[1:])

    @classmethod
    def symmetric_pair(cls, shape=(1, 8, 8), offset=0.5, variance=1.0) -> "GaussianClassModel":
        """Two classes at -offset and +offset in every coordinate, shared isotropic variance."""
        mu = np.full(shape, offset)
        return cls(np.stack([-mu, mu]), variance, class_names=["negative", "positive"])

    @staticmethod
    def variance_for_accuracy(accuracy: float, shape=(1, 8, 8), offset=0.5) -> float:
        """Shared variance that gives a symmetric pair the requested Bayes accuracy."""
        if not 0.5 < accuracy < 1:
            raise ValueError("target accuracy must lie in (0.5, 1)")
        dist = 2 * offset * math.sqrt(math.prod(shape))
        return (dist / (2 * norm.ppf(accuracy))) ** 2

    def bayes_accuracy(self) -> float:
        """Exact Bayes accuracy for two classes sharing one diagonal covariance.

        With Mahalanobis distance d between the means and log prior ratio r,
        class c is decided correctly with probability Phi(d/2 + r_c/d).
        """
        if self.num_classes != 2 or not np.allclose(self.variances[0], self.variances[1]):
            raise NotImplementedError("closed form only for two classes with shared covariance")
        d = math.sqrt(float(np.sum((self.means[1] - self.means[0]) ** 2 / self.variances[0])))
        p0, p1 = self.priors
        if p0 == 0 or p1 == 0:
            return 1.0
        r = math.log(p0 / p1)
        return float(p0 * norm.cdf(d / 2 + r / d) + p1 * norm.cdf(d / 2 - r / d))

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "variances": self.variances.tolist(),
                "priors": self.priors.tolist(), "class_names": list(self.class_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianClassModel":
        return cls(np.array(d["means"]), np.array(d["variances"]), np.array(d["priors"]),
                   list(d.get("class_names", [])))


def oracle_denoise(z, lam, c, model: GaussianClassModel) -> torch.Tensor:
    """E[x | z, c] for z = alpha x + sigma eps and x ~ N(mu_c, s2_c), elementwise.

    ``mu_c + alpha s2_c / (alpha^2 s2_c + sigma^2) * (z - alpha mu_c)``.
    Class :data:`NULL_CLASS` returns the mixture posterior mean, i.e. the
    per-class means weighted by p(c | z).
    """
    z = _as_tensor(z)
    if tuple(z.shape[1:]) != model.sample_shape:
        raise ValueError(f"z sample shape {tuple(z.shape[1:])} != model {model.sample_shape}")
    lam = _lambdas(lam, z)
    c = _conditions(c, z.shape[0], z.device)
    alpha, sigma = alpha_sigma(lam)
    a, s = _expand(alpha, z), _expand(sigma, z)
    means = torch.as_tensor(model.means, dtype=z.dtype, device=z.device)
    var = torch.as_tensor(model.variances, dtype=z.dtype, device=z.device)

    out = torch.empty_like(z)
    real = c != NULL_CLASS
    if bool(real.any()):
        cr = c[real]
        mu, s2 = means[cr], var[cr]
        a_r, s_r = a[real], s[real]
        out[real] = mu + a_r * s2 / (a_r * a_r * s2 + s_r * s_r) * (z[real] - a_r * mu)
    if bool((~real).any()):
        zn = z[~real]
        a_n, s_n = a[~real], s[~real]
        # log N(z; alpha mu_c, alpha^2 s2_c + sigma^2) per class, summed over dims
        logp = []
        per_class = []
        for k in range(model.num_classes):
            tot = a_n * a_n * var[k] + s_n * s_n
            diff = zn - a_n * means[k]
            ll = -0.5 * (diff * diff / tot + torch.log(2 * math.pi * tot))
            logp.append(ll.flatten(1).sum(1) + math.log(max(model.priors[k], 1e-300)))
            per_class.append(means[k] + a_n * var[k] / tot * (zn - a_n * means[k]))
        w = torch.softmax(torch.stack(logp, dim=1), dim=1)
        stacked = torch.stack(per_class, dim=1)
        out[~real] = (w.reshape(w.shape + (1,) * (zn.ndim - 1)) * stacked).sum(1)
    return out


def oracle_bayes_posterior(x, model: GaussianClassModel) -> np.ndarray:
    """Exact p(c | x) for each row of ``x`` (shape (B, *sample_shape))."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.sample_shape:
        raise ValueError(f"x sample shape {x.shape[1:]} != model {model.sample_shape}")
    flat = x.reshape(len(x), -1)
    mu = model.means.reshape(model.num_classes, -1)
    var = model.variances.reshape(model.num_classes, -1)
    ll = -0.5 * (((flat[:, None, :] - mu[None]) ** 2 / var[None]).sum(-1)
                 + np.log(2 * np.pi * var).sum(-1)[None])
    with np.errstate(divide="ignore"):
        logits = ll + np.log(model.priors)[None]
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


class GaussianOracle:
    """Denoiser-contract wrapper around :func:`oracle_denoise`."""

    def __init__(self, model: GaussianClassModel):
        self.model = model
        self.contract = DenoiserContract(model.num_classes, model.sample_shape, True)

    def denoise(self, z, lam, c) -> torch.Tensor:
        c = _conditions(c, len(z))
        self.contract.check_conditions(c)
        return oracle_denoise(z, lam, c, self.model)
