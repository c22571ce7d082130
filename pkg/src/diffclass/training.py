"""Training loop for the tiny conditional denoiser.

Per step: draw a batch by shuffled cycling, t ~ U(0, 1) per sample, noise the
batch, drop the condition to null with probability ``condition_dropout``,
predict v, convert to x-space and minimise the min-SNR weighted squared error.
Adam with linear LR warmup, global-norm clipping and an EMA copy of the
weights.

All randomness for step ``s`` is derived from ``(seed, s)``, so a resumed run
reproduces an uninterrupted one exactly.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .denoiser import NULL_CLASS, DenoiserContract, TinyDenoiser, TinyDenoiserSpec
from .schedule import NoiseSchedule, convert_prediction, forward_diffuse, training_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, lambdas: torch.Tensor, loss: float):
        self.step, self.lambdas, self.loss = step, lambdas, loss
        lam = lambdas.detach().cpu().numpy()
        super().__init__(f"non-finite loss {loss} at step {step}; "
                         f"lambda batch min/max {lam.min():.3f}/{lam.max():.3f}")


class CheckpointError(Exception):
    """Checkpoint cannot be loaded or does not match the current setup."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    lr_warmup_steps: int = 250
    grad_clip: float = 1.0
    ema_beta: float = 0.999
    ema_warmup_steps: int = 50
    ema_update_every: int = 5
    condition_dropout: float = 0.1
    total_steps: int = 10_000
    seed: int = 0
    min_snr_gamma: float = 5.0
    log_every: int = 100

    def __post_init__(self):
        if not 0 <= self.condition_dropout < 1:
            raise ValueError("condition_dropout must lie in [0, 1)")
        if not 0 <= self.ema_beta < 1:
            raise ValueError("ema_beta must lie in [0, 1)")
        if self.batch_size < 1 or self.total_steps < 0 or self.ema_update_every < 1:
            raise ValueError("batch_size and ema_update_every must be >= 1, total_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    parameters: dict
    ema_parameters: dict
    contract: DenoiserContract
    spec: TinyDenoiserSpec
    schedule: NoiseSchedule
    train_config: TrainConfig
    step: int
    dataset_fingerprint: str
    wavelet: bool = False
    optimizer_state: dict | None = None
    loss_history: list = field(default_factory=list)  # (step, loss, lr)

    def model(self, ema: bool = True) -> TinyDenoiser:
        net = TinyDenoiser(self.contract, self.spec)
        net.load_state_dict(self.ema_parameters if ema else self.parameters)
        return net.eval()

    def save(self, path) -> None:
        torch.save({
            "version": CHECKPOINT_VERSION,
            "parameters": self.parameters,
            "ema_parameters": self.ema_parameters,
            "contract": self.contract.to_dict(),
            "spec": self.spec.to_dict(),
            "schedule": self.schedule.to_dict(),
            "train_config": self.train_config.to_dict(),
            "step": self.step,
            "dataset_fingerprint": self.dataset_fingerprint,
            "wavelet": self.wavelet,
            "optimizer_state": self.optimizer_state,
            "loss_history": self.loss_history,
        }, Path(path))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint {path} not found")
        raw = torch.load(path, map_location="cpu", weights_only=False)
        if raw.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {raw.get('version')}")
        ckpt = cls(
            parameters=raw["parameters"], ema_parameters=raw["ema_parameters"],
            contract=DenoiserContract.from_dict(raw["contract"]),
            spec=TinyDenoiserSpec(**raw["spec"]), schedule=NoiseSchedule(**raw["schedule"]),
            train_config=TrainConfig(**raw["train_config"]), step=raw["step"],
            dataset_fingerprint=raw["dataset_fingerprint"], wavelet=raw.get("wavelet", False),
            optimizer_state=raw.get("optimizer_state"), loss_history=raw.get("loss_history", []))
        # shape validation: both parameter blocks must fit a freshly built network
        reference = TinyDenoiser(ckpt.contract, ckpt.spec).state_dict()
        for name, block in (("parameters", ckpt.parameters), ("ema_parameters", ckpt.ema_parameters)):
            if block.keys() != reference.keys() or any(
                    block[k].shape != reference[k].shape for k in reference):
                raise CheckpointError(f"{path}: {name} do not match the recorded architecture")
        return ckpt


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in history:
            w.writerow([step, f"{loss:.8g}", f"{lr:.8g}"])


@torch.no_grad()
def ema_update(params: dict, ema_params: dict, beta: float, step: int, warmup: int) -> dict:
    """Copy during warmup (step <= warmup), then ema <- beta ema + (1 - beta) params, in place."""
    for name, p in params.items():
        e = ema_params[name]
        if step <= warmup or not e.is_floating_point():
            e.copy_(p)
        else:
            e.mul_(beta).add_(p.detach(), alpha=1 - beta)
    return ema_params


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0; ``step`` counts from 0."""
    if config.lr_warmup_steps <= 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, (step + 1) / config.lr_warmup_steps)


def _step_generator(seed: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, step]).generate_state(1)[0]))
    return g


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> torch.Tensor:
    """Shuffled cycling: one fresh permutation per pass through the data."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        g = torch.Generator()
        g.manual_seed(int(np.random.SeedSequence([seed, 1 << 20, epoch]).generate_state(1)[0]))
        perm = torch.randperm(n, generator=g)
        out.extend(perm[offset:offset + batch_size - len(out)].tolist())
    return torch.tensor(out)


def drop_conditions(labels: torch.Tensor, rate: float, generator: torch.Generator) -> torch.Tensor:
    drop = torch.rand(len(labels), generator=generator) < rate
    return torch.where(drop, torch.full_like(labels, NULL_CLASS), labels)


def init_checkpoint(contract: DenoiserContract, spec: TinyDenoiserSpec, config: TrainConfig,
                    schedule: NoiseSchedule, fingerprint: str, wavelet: bool) -> Checkpoint:
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        net = TinyDenoiser(contract, spec)
    params = {k: v.clone() for k, v in net.state_dict().items()}
    return Checkpoint(params, copy.deepcopy(params), contract, spec, schedule, config, 0,
                      fingerprint, wavelet)


def train(images: torch.Tensor, labels: torch.Tensor, spec: TinyDenoiserSpec, config: TrainConfig,
          schedule: NoiseSchedule, num_classes: int | None = None, wavelet: bool = False,
          fingerprint: str = "", resume: Checkpoint | None = None,
          callback: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Train (or continue training) up to ``config.total_steps`` steps.

    ``images`` are already in model space (wavelet coefficients if used).
    """
    images = torch.as_tensor(images, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError("training data must be non-empty with one label per image")
    num_classes = num_classes or int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("labels outside [0, num_classes)")
    contract = DenoiserContract(num_classes, tuple(images.shape[1:]), True)

    if resume is None:
        ckpt = init_checkpoint(contract, spec, config, schedule, fingerprint, wavelet)
    else:
        if resume.dataset_fingerprint != fingerprint:
            raise CheckpointError("dataset fingerprint differs from the checkpoint's")
        if resume.contract != contract or resume.schedule != schedule:
            raise CheckpointError("checkpoint contract/schedule differ from the training setup")
        ckpt = copy.deepcopy(resume)
        ckpt.train_config = config

    net = TinyDenoiser(contract, ckpt.spec)
    net.load_state_dict(ckpt.parameters)
    net.train()
    ema = {k: v.clone() for k, v in ckpt.ema_parameters.items()}
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    if ckpt.optimizer_state is not None:
        opt.load_state_dict(ckpt.optimizer_state)
    history = list(ckpt.loss_history)
    n = len(images)

    for step in range(ckpt.step, config.total_steps):
        g = _step_generator(config.seed, step)
        idx = batch_indices(n, config.batch_size, step, config.seed)
        x, y = images[idx], labels[idx]
        t = schedule.sample_t(len(idx), generator=g, dtype=torch.float64)
        lam = schedule.log_snr(t).float()
        eps = torch.randn(x.shape, generator=g)
        c = drop_conditions(y, config.condition_dropout, g)
        z = forward_diffuse(x, lam, eps)
        v_hat = net(z, lam, c)
        x_hat = convert_prediction(z, v_hat, "v", "x", lam)
        loss = training_loss(x, x_hat, lam, config.min_snr_gamma)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDivergedError(step, lam, loss_value)

        lr = lr_at(step, config)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
        opt.step()

        done = step + 1
        if done % config.ema_update_every == 0:
            ema_update(net.state_dict(), ema, config.ema_beta, done, config.ema_warmup_steps)
        history.append((step, loss_value, lr))
        if callback is not None:
            callback(step, loss_value)
        if config.log_every and done % config.log_every == 0:
            recent = np.mean([h[1] for h in history[-config.log_every:]])
            log.info("step %d loss %.5f lr %.2e", done, recent, lr)

    ckpt.parameters = {k: v.detach().clone() for k, v in net.state_dict().items()}
    ckpt.ema_parameters = ema
    ckpt.optimizer_state = opt.state_dict() if config.total_steps > ckpt.step else ckpt.optimizer_state
    ckpt.step = max(ckpt.step, config.total_steps)
    ckpt.loss_history = history
    return ckpt


def window_means(history, window: int = 500) -> tuple[float, float]:
    """Mean loss over the first and last ``window`` steps of a history."""
    losses = np.array([h[1] for h in history], dtype=np.float64)
    if len(losses) == 0:
        return math.nan, math.nan
    return float(losses[:window].mean()), float(losses[-window:].mean())
