"""Minimal trainable denoising diffusion model.

The latent of a latent diffusion model is taken to be the pixel tensor itself
(identity encoder), so every formula below acts directly on images scaled to
``[-1, 1]``.

All tensor operations are batched: images are ``(B, C, H, W)`` and a timestep
is either a python ``int`` shared by the batch or a ``(B,)`` integer tensor.
A denoiser is any callable ``model(x_t, t, y=None) -> eps_hat`` returning a
tensor shaped like ``x_t``; :class:`ConvDenoiser` is the trainable one.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Timestep = Union[int, torch.Tensor]
Denoiser = Callable[..., torch.Tensor]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention coefficients ``alpha_bar[0..T]``.

    ``alpha_bar[0]`` is exactly 1 and the sequence is strictly decreasing.
    """

    alpha_bar: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar must be a 1-D sequence of length T+1 >= 2")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] < 0:
            raise ValueError("alpha_bar must be non-negative")
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        """Linear-beta DDPM schedule, ``alpha_bar[t] = prod_{k<=t} (1 - beta_k)``."""
        if T < 1:
            raise ValueError("T must be positive")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(ab, beta_start, beta_end)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    def check_t(self, t: int, lo: int = 0, hi: Optional[int] = None) -> int:
        hi = self.T if hi is None else hi
        if not lo <= int(t) <= hi:
            raise ValueError(f"timestep {t} outside [{lo}, {hi}]")
        return int(t)

    def coef(self, t: Timestep, ref: torch.Tensor) -> Union[float, torch.Tensor]:
        """``alpha_bar[t]`` as a float, or as a ``(B,1,1,1)`` tensor for per-sample ``t``."""
        if isinstance(t, torch.Tensor) and t.dim() > 0:
            ab = torch.as_tensor(self.alpha_bar, dtype=ref.dtype, device=ref.device)[t.long()]
            return ab.view(-1, *([1] * (ref.dim() - 1)))
        return float(self.alpha_bar[int(t)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "alpha_bar"])
            for t, ab in enumerate(self.alpha_bar):
                w.writerow([t, repr(float(ab))])

    def describe(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _sqrt(v):
    return v.sqrt() if isinstance(v, torch.Tensor) else math.sqrt(v)


def _as_t(t: Timestep, batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        return t.to(device=device, dtype=torch.long)
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


def predict(model: Denoiser, x_t: torch.Tensor, t: Timestep, y: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Evaluate the noise prediction and check its shape."""
    out = model(x_t, _as_t(t, x_t.shape[0], x_t.device), y)
    if out.shape != x_t.shape:
        raise ValueError(f"denoiser returned shape {tuple(out.shape)} for input {tuple(x_t.shape)}")
    return out


def forward_noise(x: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``x_t = sqrt(ab_t) x + sqrt(1 - ab_t) eps``."""
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    if not isinstance(t, torch.Tensor) or t.dim() == 0:
        sched.check_t(int(t))
    ab = sched.coef(t, x)
    return _sqrt(ab) * x + _sqrt(1.0 - ab) * eps


def denoising_loss(x, t, eps, model, sched, y=None) -> torch.Tensor:
    """Per-sample mean squared error between ``eps`` and the noise prediction."""
    x_t = forward_noise(x, t, eps, sched)
    err = eps - predict(model, x_t, t, y)
    return err.pow(2).flatten(1).mean(1)


def x0_estimate(z_t, t, model, sched, y=None, eps_hat=None) -> torch.Tensor:
    """Clean-sample estimate ``(z_t - sqrt(1 - ab_t) f(z_t, t)) / sqrt(ab_t)``."""
    ab = sched.coef(t, z_t)
    if (ab <= 0).any() if isinstance(ab, torch.Tensor) else ab <= 0:
        raise ZeroDivisionError("alpha_bar[t] is zero; clean-sample estimate undefined")
    if eps_hat is None:
        eps_hat = predict(model, z_t, t, y)
    return (z_t - _sqrt(1.0 - ab) * eps_hat) / _sqrt(ab)


def _ddim_move(z_t, t, t_new, model, sched, y):
    eps_hat = predict(model, z_t, t, y)
    x0 = x0_estimate(z_t, t, model, sched, y, eps_hat=eps_hat)
    ab_new = float(sched.alpha_bar[t_new])
    return math.sqrt(ab_new) * x0 + math.sqrt(1.0 - ab_new) * eps_hat


def ddim_denoise_step(z_t, t: int, model, sched, y=None, t_prev: Optional[int] = None) -> torch.Tensor:
    """Deterministic DDIM step from ``t`` down to ``t_prev`` (default ``t - 1``)."""
    t = int(t)
    if t < 1:
        raise ValueError("denoise step needs t >= 1")
    sched.check_t(t)
    t_prev = t - 1 if t_prev is None else sched.check_t(t_prev, 0, t - 1)
    return _ddim_move(z_t, t, t_prev, model, sched, y)


def ddim_inverse_step(z_t, t: int, model, sched, y=None, t_next: Optional[int] = None) -> torch.Tensor:
    """Deterministic DDIM inversion step from ``t`` up to ``t_next`` (default ``t + 1``)."""
    t = int(t)
    if t >= sched.T:
        raise ValueError(f"inverse step needs t <= T-1 = {sched.T - 1}")
    sched.check_t(t)
    t_next = t + 1 if t_next is None else sched.check_t(t_next, t + 1)
    return _ddim_move(z_t, t, t_next, model, sched, y)


def deterministic_reverse(z0, t_target: int, model, sched, y=None, stride: int = 10) -> torch.Tensor:
    """Compose inverse steps ``0 -> stride -> ... -> t_target``."""
    t_target = sched.check_t(t_target)
    if stride < 1 or t_target % stride:
        raise ValueError(f"stride {stride} does not divide t_target {t_target}")
    z = z0
    for t in range(0, t_target, stride):
        z = ddim_inverse_step(z, t, model, sched, y, t_next=t + stride)
    return z


# --------------------------------------------------------------------------
# Trainable denoiser


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


@dataclass
class DenoiserConfig:
    channels: int = 1
    width: int = 48
    depth: int = 2
    groups: int = 8
    num_classes: Optional[int] = None


class _ResBlock(nn.Module):
    def __init__(self, width, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.temb = nn.Linear(width, width)
        self.norm2 = nn.GroupNorm(groups, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x))) + self.temb(emb)[:, :, None, None]
        return x + self.conv2(F.silu(self.norm2(h)))


class ConvDenoiser(nn.Module):
    """Small residual conv noise predictor with sinusoidal time embedding.

    GroupNorm (never BatchNorm) keeps samples in a batch independent, which
    the per-sample input gradients rely on.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        w = config.width
        self.inp = nn.Conv2d(config.channels, w, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.class_emb = nn.Embedding(config.num_classes, w) if config.num_classes else None
        self.blocks = nn.ModuleList(_ResBlock(w, config.groups) for _ in range(config.depth))
        self.out = nn.Sequential(nn.GroupNorm(config.groups, w), nn.SiLU(), nn.Conv2d(w, config.channels, 3, padding=1))

    def forward(self, x, t, y=None):
        emb = self.time_mlp(timestep_embedding(t, self.config.width).to(x.dtype))
        if self.class_emb is not None and y is not None:
            emb = emb + self.class_emb(y)
        h = self.inp(x)
        for block in self.blocks:
            h = block(h, emb)
        return self.out(h)


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> ConvDenoiser:
    torch.manual_seed(seed)
    return ConvDenoiser(config)


@dataclass
class TrainResult:
    model: nn.Module
    losses: list = field(default_factory=list)

    def running_average(self, window: int = 100) -> np.ndarray:
        arr = np.asarray(self.losses, dtype=np.float64)
        if arr.size < window:
            return np.array([arr.mean()]) if arr.size else arr
        return np.convolve(arr, np.ones(window) / window, mode="valid")


def train(model: nn.Module, data: torch.Tensor, sched: NoiseSchedule, steps: int, seed: int = 0,
          batch_size: int = 64, lr: float = 2e-3, labels: Optional[torch.Tensor] = None,
          log_every: int = 0, logger=None) -> TrainResult:
    """Minimise the expected denoising loss over uniformly drawn ``t`` in ``[1, T]``.

    Deterministic for a fixed ``seed`` and initial parameters. ``steps=0`` is a no-op.
    """
    if data.shape[0] == 0:
        raise ValueError("empty training set")
    result = TrainResult(model)
    if steps <= 0:
        return result
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 0.05)
    n = data.shape[0]
    model.train()
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        x = data[idx]
        t = torch.randint(1, sched.T + 1, (x.shape[0],), generator=gen)
        eps = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        y = labels[idx] if labels is not None else None
        loss = denoising_loss(x, t, eps, model, sched, y).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched_lr.step()
        result.losses.append(loss.item())
        if log_every and logger is not None and (step + 1) % log_every == 0:
            logger.info("step %d/%d loss %.4f", step + 1, steps, np.mean(result.losses[-log_every:]))
    model.eval()
    return result


@torch.no_grad()
def generate(model, sched: NoiseSchedule, shape: Sequence[int], seed: int = 0, steps: int = 50,
             y: Optional[torch.Tensor] = None, n: int = 1, dtype=torch.float32) -> torch.Tensor:
    """Deterministic DDIM sampling from ``N(0, I)`` down a ``steps``-point grid."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((n, *shape), generator=gen, dtype=dtype)
    grid = np.unique(np.linspace(0, sched.T, steps + 1).round().astype(int))[::-1]
    for t, t_prev in zip(grid[:-1], grid[1:]):
        z = ddim_denoise_step(z, int(t), model, sched, y, t_prev=int(t_prev))
    return z


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: ConvDenoiser, sched: NoiseSchedule, seed: int, losses=None, extra=None) -> str:
    """Write parameters plus schedule/architecture metadata; returns the file's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state_dict": model.state_dict(),
        "config": asdict(model.config),
        "schedule": sched.describe(),
        "seed": seed,
        "losses": list(losses or []),
        "extra": extra or {},
    }, path)
    return file_sha256(path)


def load_checkpoint(path):
    """Return ``(model, schedule, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = ConvDenoiser(DenoiserConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    s = payload["schedule"]
    sched = NoiseSchedule.linear(s["T"], s["beta_start"], s["beta_end"])
    return model, sched, payload


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
