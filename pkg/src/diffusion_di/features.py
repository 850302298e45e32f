"""Per-sample membership features.

Each extractor takes a batch ``x`` of shape ``(B, C, H, W)``, an
:class:`ExtractionContext` and the batch's ``sample_ids``, and returns a
``(B, output_dim)`` float64 array. For every feature a lower value points to
membership.

Noise draws come from a generator seeded by ``(ctx.seed, sample_id,
feature name)``, so a sample's features do not depend on batch composition or
on which other features are extracted.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .diffusion import (
    NoiseSchedule,
    ddim_denoise_step,
    ddim_inverse_step,
    denoising_loss,
    deterministic_reverse,
    forward_noise,
    predict,
)
from .lbfgs import lbfgs_minimize

GRAY_BOX = "gray_box"
WHITE_BOX = "white_box"
TIMESTEP_GRID = tuple(range(0, 1000, 100))


class AccessError(PermissionError):
    """A white-box feature was requested with gray-box model access."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    access: str
    timesteps: tuple
    repeats: int
    output_dim: int

    def columns(self) -> list:
        if self.name == "gradient_masking":
            return [f"gm_t{t:03d}" for t in self.timesteps]
        if self.name == "multiple_loss":
            return [f"ml_t{t:03d}" for t in self.timesteps]
        if self.name == "noise_optimization":
            return ["no_error", "no_delta"]
        return [self.name]


FEATURES = {
    "denoising_loss": FeatureSpec("denoising_loss", GRAY_BOX, (100,), 5, 1),
    "secmi": FeatureSpec("secmi", GRAY_BOX, (100,), 1, 1),
    "pia": FeatureSpec("pia", GRAY_BOX, (200,), 1, 1),
    "pian": FeatureSpec("pian", GRAY_BOX, (200,), 1, 1),
    "gradient_masking": FeatureSpec("gradient_masking", WHITE_BOX, TIMESTEP_GRID, 1, len(TIMESTEP_GRID)),
    "multiple_loss": FeatureSpec("multiple_loss", GRAY_BOX, TIMESTEP_GRID, 1, len(TIMESTEP_GRID)),
    "noise_optimization": FeatureSpec("noise_optimization", WHITE_BOX, (100,), 1, 2),
}

EXISTING_MIAS = ("denoising_loss", "secmi", "pia", "pian")
ALL_FEATURES = tuple(FEATURES)
GRAY_BOX_FEATURES = tuple(n for n, s in FEATURES.items() if s.access == GRAY_BOX)
WHITE_BOX_FEATURES = ALL_FEATURES

FEATURE_SETS = {
    "all": ALL_FEATURES,
    "white_box": ALL_FEATURES,
    "gray_box": GRAY_BOX_FEATURES,
    "existing_mias": EXISTING_MIAS,
}


def resolve_feature_set(feature_set) -> list:
    """Accept a preset name or an iterable of feature names; returns FeatureSpecs."""
    if isinstance(feature_set, str):
        if feature_set not in FEATURE_SETS:
            raise KeyError(f"unknown feature set {feature_set!r}")
        feature_set = FEATURE_SETS[feature_set]
    specs = [f if isinstance(f, FeatureSpec) else FEATURES[f] for f in feature_set]
    if not specs:
        raise ValueError("feature set is empty")
    return specs


def feature_columns(feature_set) -> list:
    return [c for spec in resolve_feature_set(feature_set) for c in spec.columns()]


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass
class ExtractionContext:
    """Model, schedule and knobs shared by all extractors."""

    model: object
    schedule: NoiseSchedule
    seed: int = 0
    access: str = WHITE_BOX
    dl_t: int = 100
    dl_repeats: int = 5
    secmi_t: int = 100
    secmi_stride: int = 10
    secmi_step: int = 1
    pia_t: int = 200
    pia_p: float = 5.0
    pian_norm: str = "paper"  # "paper": L1 target CHW*sqrt(pi/2); "gaussian": CHW*sqrt(2/pi)
    gm_timesteps: tuple = TIMESTEP_GRID
    gm_fraction: float = 0.2
    gm_shared_noise: bool = True
    ml_timesteps: tuple = TIMESTEP_GRID
    no_t: int = 100
    no_steps: int = 5

    def generators(self, sample_ids: Sequence, feature: str) -> list:
        return [torch.Generator().manual_seed(_stable_hash(f"{self.seed}|{sid}|{feature}") & (2**63 - 1))
                for sid in sample_ids]

    def require_white_box(self, feature: str):
        if self.access != WHITE_BOX:
            raise AccessError(f"{feature} needs white-box (gradient) access; context has {self.access}")

    def options(self) -> dict:
        skip = {"model", "schedule"}
        return {k: v for k, v in self.__dict__.items() if k not in skip}


def _draw(gens, shape, dtype):
    return torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in gens]).to(dtype)


# --------------------------------------------------------------------------
# Existing attacks


@torch.no_grad()
def extract_denoising_loss(x, ctx: ExtractionContext, sample_ids, y=None) -> np.ndarray:
    gens = ctx.generators(sample_ids, "denoising_loss")
    losses = []
    for _ in range(ctx.dl_repeats):
        eps = _draw(gens, x.shape[1:], x.dtype)
        losses.append(denoising_loss(x, ctx.dl_t, eps, ctx.model, ctx.schedule, y))
    return torch.stack(losses).mean(0).double().numpy()[:, None]


@torch.no_grad()
def extract_secmi_stat(x, ctx: ExtractionContext, sample_ids=None, y=None) -> np.ndarray:
    """SecMI t-error: distance of a one-step inverse/denoise round trip from its start."""
    t = ctx.secmi_t
    z_t = deterministic_reverse(x, t, ctx.model, ctx.schedule, y, stride=ctx.secmi_stride)
    up = ddim_inverse_step(z_t, t, ctx.model, ctx.schedule, y, t_next=t + ctx.secmi_step)
    back = ddim_denoise_step(up, t + ctx.secmi_step, ctx.model, ctx.schedule, y, t_prev=t)
    return (back - z_t).pow(2).flatten(1).mean(1).double().numpy()[:, None]


def _pnorm_mean(d: torch.Tensor, p: float) -> torch.Tensor:
    return d.abs().pow(p).flatten(1).mean(1).pow(1.0 / p)


def _pia_distance(x, eps0, ctx, y, p):
    ab = float(ctx.schedule.alpha_bar[ctx.pia_t])
    z_t = math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps0
    return _pnorm_mean(eps0 - predict(ctx.model, z_t, ctx.pia_t, y), p)


@torch.no_grad()
def extract_pia(x, ctx: ExtractionContext, sample_ids=None, y=None) -> np.ndarray:
    eps0 = predict(ctx.model, x, 0, y)
    return _pia_distance(x, eps0, ctx, y, ctx.pia_p).double().numpy()[:, None]


def pian_normalize(eps0: torch.Tensor, norm: str = "paper") -> torch.Tensor:
    """Rescale each prediction to a fixed L1 norm.

    ``"paper"`` targets ``C*H*W*sqrt(pi/2)``; ``"gaussian"`` targets the
    expected L1 norm of a standard normal tensor, ``C*H*W*sqrt(2/pi)``.
    """
    numel = eps0[0].numel()
    target = numel * math.sqrt(math.pi / 2 if norm == "paper" else 2 / math.pi)
    l1 = eps0.abs().flatten(1).sum(1).view(-1, *([1] * (eps0.dim() - 1)))
    return target * eps0 / l1


@torch.no_grad()
def extract_pian(x, ctx: ExtractionContext, sample_ids=None, y=None) -> np.ndarray:
    eps0 = pian_normalize(predict(ctx.model, x, 0, y), ctx.pian_norm)  # zero L1 -> nan -> invalid sample
    return _pia_distance(x, eps0, ctx, y, ctx.pia_p).double().numpy()[:, None]


@torch.no_grad()
def extract_multiple_loss(x, ctx: ExtractionContext, sample_ids, y=None) -> np.ndarray:
    gens = ctx.generators(sample_ids, "multiple_loss")
    out = []
    for t in ctx.ml_timesteps:
        eps = _draw(gens, x.shape[1:], x.dtype)
        out.append(denoising_loss(x, t, eps, ctx.model, ctx.schedule, y))
    return torch.stack(out, 1).double().numpy()


# --------------------------------------------------------------------------
# Gradient-based features


def top_fraction_mask(g: torch.Tensor, fraction: float = 0.2) -> torch.Tensor:
    """Per-sample mask of the ``round(fraction * numel)`` largest entries (at least one).

    Ties are broken by ascending flat index.
    """
    flat = g.flatten(1)
    m = max(1, int(round(fraction * flat.shape[1])))
    order = torch.sort(flat, dim=1, descending=True, stable=True).indices[:, :m]
    mask = torch.zeros_like(flat, dtype=torch.bool)
    mask.scatter_(1, order, True)
    return mask.view_as(g)


def loss_input_gradient(z_t, t, eps, model, y=None) -> torch.Tensor:
    """Per-sample gradient of the denoising loss with respect to the noised input."""
    z = z_t.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = (eps - predict(model, z, t, y)).pow(2).flatten(1).mean(1).sum()
        if not loss.requires_grad:
            return torch.zeros_like(z_t)
        (g,) = torch.autograd.grad(loss, z, allow_unused=True)
    return torch.zeros_like(z_t) if g is None else g.detach()


def extract_gradient_masking(x, ctx: ExtractionContext, sample_ids, y=None) -> np.ndarray:
    ctx.require_white_box("gradient_masking")
    gens = ctx.generators(sample_ids, "gradient_masking")
    out = []
    for t in ctx.gm_timesteps:
        eps = _draw(gens, x.shape[1:], x.dtype)
        fill = eps if ctx.gm_shared_noise else _draw(gens, x.shape[1:], x.dtype)
        z_t = forward_noise(x, t, eps, ctx.schedule)
        g = loss_input_gradient(z_t, t, eps, ctx.model, y).abs()
        mask = top_fraction_mask(g, ctx.gm_fraction).to(x.dtype)
        z_hat = fill * mask + z_t * (1 - mask)
        with torch.no_grad():
            pred = predict(ctx.model, z_hat, t, y)
        err = ((eps - z_t) * mask - pred * mask).pow(2).flatten(1).sum(1)
        out.append(err / mask.flatten(1).sum(1))
    return torch.stack(out, 1).double().numpy()


def extract_noise_optimization(x, ctx: ExtractionContext, sample_ids, y=None) -> np.ndarray:
    """Final denoising error and mean squared size of an L-BFGS input perturbation."""
    ctx.require_white_box("noise_optimization")
    gens = ctx.generators(sample_ids, "noise_optimization")
    eps = _draw(gens, x.shape[1:], x.dtype)
    z_t = forward_noise(x, ctx.no_t, eps, ctx.schedule)
    rows = []
    for i in range(x.shape[0]):
        zi, ei = z_t[i:i + 1], eps[i:i + 1]
        yi = y[i:i + 1] if y is not None else None

        def objective(delta, zi=zi, ei=ei, yi=yi):
            return (ei - predict(ctx.model, zi + delta, ctx.no_t, yi)).pow(2).mean()

        res = lbfgs_minimize(objective, torch.zeros_like(zi), steps=ctx.no_steps)
        rows.append((res.value, float(res.x.pow(2).mean())))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


EXTRACTORS = {
    "denoising_loss": extract_denoising_loss,
    "secmi": extract_secmi_stat,
    "pia": extract_pia,
    "pian": extract_pian,
    "gradient_masking": extract_gradient_masking,
    "multiple_loss": extract_multiple_loss,
    "noise_optimization": extract_noise_optimization,
}


# --------------------------------------------------------------------------
# Composition


@dataclass
class FeatureMatrix:
    """``n x k`` feature table with aligned names, ids and ground-truth labels."""

    values: np.ndarray
    names: list
    sample_ids: list
    is_member: Optional[np.ndarray] = None
    split: Optional[list] = None
    failures: dict = field(default_factory=dict)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values).all(axis=1)

    def select(self, columns=None, rows=None) -> "FeatureMatrix":
        cols = list(range(len(self.names))) if columns is None else [self.names.index(c) for c in columns]
        rows = np.arange(len(self.sample_ids)) if rows is None else np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return FeatureMatrix(
            values=self.values[np.ix_(rows, cols)],
            names=[self.names[c] for c in cols],
            sample_ids=[self.sample_ids[r] for r in rows],
            is_member=None if self.is_member is None else self.is_member[rows],
            split=None if self.split is None else [self.split[r] for r in rows],
        )

    def drop_invalid(self) -> "FeatureMatrix":
        ok = self.valid
        out = self.select(rows=ok)
        out.failures = {sid: "non-finite feature" for sid, good in zip(self.sample_ids, ok) if not good}
        return out

    def __len__(self):
        return len(self.sample_ids)


def extract_all(x: torch.Tensor, ctx: ExtractionContext, sample_ids: Sequence, feature_set="all",
                y: Optional[torch.Tensor] = None, batch_size: int = 64, progress=None) -> FeatureMatrix:
    """Concatenate the requested features in declared order for every sample.

    Samples with a non-finite value are kept with NaNs and listed in
    ``failures``; downstream code drops them via :meth:`FeatureMatrix.drop_invalid`.
    """
    specs = resolve_feature_set(feature_set)
    for spec in specs:
        if spec.access == WHITE_BOX:
            ctx.require_white_box(spec.name)
    if len(sample_ids) != x.shape[0]:
        raise ValueError("sample_ids must align with x")
    if len(set(sample_ids)) != len(sample_ids):
        raise ValueError("duplicate sample ids")
    names = [c for s in specs for c in s.columns()]
    values = np.empty((x.shape[0], len(names)))
    for start in range(0, x.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        xb, ids = x[sl], list(sample_ids[sl])
        yb = y[sl] if y is not None else None
        cols = [EXTRACTORS[s.name](xb, ctx, ids, yb) for s in specs]
        values[sl] = np.concatenate(cols, axis=1)
        if progress is not None:
            progress(min(start + batch_size, x.shape[0]), x.shape[0])
    fm = FeatureMatrix(values=values, names=names, sample_ids=list(sample_ids))
    fm.failures = {sid: "non-finite feature" for sid, ok in zip(fm.sample_ids, fm.valid) if not ok}
    return fm
