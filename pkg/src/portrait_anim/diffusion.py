"""Shared DDPM machinery: schedule, forward noising, epsilon loss and samplers."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import InvalidParamsError, NonFiniteError, ShapeMismatchError
from .records import dump_json, load_json


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self):
        return int(self.beta.shape[0])

    def to_record(self):
        return {"kind": "noise_schedule", "T": self.T, "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_record(cls, record):
        beta = np.asarray(record["beta"], dtype=np.float64)
        if beta.shape[0] != int(record["T"]):
            raise ShapeMismatchError("schedule record T disagrees with beta length")
        return _from_beta(beta)

    def dump(self, path):
        dump_json(self.to_record(), path)

    @classmethod
    def load(cls, path):
        return cls.from_record(load_json(path))


def _from_beta(beta):
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise InvalidParamsError("beta must lie strictly inside (0, 1)")
    alpha_bar = np.cumprod(1.0 - beta)
    beta = beta.copy()
    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(beta, alpha_bar)


def build_schedule(T=1000, beta_min=1e-4, beta_max=0.02):
    """Linear beta schedule with cumulative-product alpha_bar."""
    if int(T) != T or T < 1:
        raise InvalidParamsError(f"T must be a positive integer, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise InvalidParamsError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return _from_beta(np.linspace(beta_min, beta_max, int(T), dtype=np.float64))


@dataclass
class ConditionBundle:
    """Control signals ``c`` for a denoiser. Absent fields are ``None``.

    Tensors are batch-first: ``audio (B, T_a, D_a)``, ``history (B, H, F)``,
    ``style (B, 2)`` = (expr_range, pose_range), ``reference (B, L_ref, F)``,
    ``appearance (B, ...)``, ``face_keypoints (B, L, 3 N_h)``.
    """

    audio: Optional[torch.Tensor] = None
    history: Optional[torch.Tensor] = None
    style: Optional[torch.Tensor] = None
    reference: Optional[torch.Tensor] = None
    appearance: Optional[torch.Tensor] = None
    face_keypoints: Optional[torch.Tensor] = None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def present(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if getattr(self, f.name) is not None}

    def batch_size(self):
        sizes = {v.shape[0] for v in self.present().values()}
        if len(sizes) > 1:
            raise ShapeMismatchError(f"condition fields disagree on batch size: {sorted(sizes)}")
        return sizes.pop() if sizes else None

    def index(self, idx):
        return ConditionBundle(**{k: (None if v is None else v[idx])
                                  for k, v in dataclasses.asdict(self).items()})


def _gather(values, t, like):
    table = torch.tensor(np.asarray(values), dtype=like.dtype)
    t = torch.as_tensor(t, dtype=torch.long)
    out = table[t]
    if out.ndim == 0:
        return out
    return out.reshape(out.shape + (1,) * (like.ndim - out.ndim))


def forward_noise(x0, t, eps, sched):
    """``sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps``; ``t`` scalar or per-batch."""
    if eps.shape != x0.shape:
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t_arr = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t_arr < 0) or torch.any(t_arr >= sched.T):
        raise InvalidParamsError(f"timestep out of range [0, {sched.T})")
    ab = _gather(sched.alpha_bar, t_arr, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def denoise_loss(model, x0, c, sched, rng, t=None, eps=None):
    """Per-element mean squared error between drawn noise and predicted noise."""
    batch = x0.shape[0]
    if t is None:
        t = torch.randint(0, sched.T, (batch,), generator=rng)
    if eps is None:
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    x_t = forward_noise(x0, t, eps, sched)
    pred = model(x_t, t, c)
    if pred.shape != x0.shape:
        raise ShapeMismatchError(f"denoiser output {tuple(pred.shape)} != x0 {tuple(x0.shape)}")
    if not torch.all(torch.isfinite(pred)):
        raise NonFiniteError("denoiser produced non-finite output")
    return torch.mean((eps - pred) ** 2)


def timesteps(T, steps):
    """Descending strided subset of ``[0, T)`` that always starts at ``T - 1``."""
    if not 1 <= steps <= T:
        raise InvalidParamsError(f"steps must be in [1, {T}], got {steps}")
    ts = np.round(np.arange(T, 0, -T / steps)).astype(np.int64) - 1
    return ts[:steps]


@torch.no_grad()
def sample(model, c, sched, steps, rng=None, mode="deterministic", shape=None, x_T=None,
           return_trajectory=False):
    """Reverse process.

    ``mode="ancestral"`` draws fresh noise each step (DDPM posterior variance;
    with ``steps == T`` this is the textbook sampler). ``mode="deterministic"``
    is the variance-free update over the strided step subset.
    """
    if mode not in ("ancestral", "deterministic"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if x_T is None:
        if shape is None:
            raise ValueError("need either shape or x_T")
        x_T = torch.randn(shape, generator=rng)
    x = x_T
    ts = timesteps(sched.T, steps)
    ab_table = sched.alpha_bar
    traj = [x]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        ab = float(ab_table[t])
        ab_prev = float(ab_table[t_prev]) if t_prev >= 0 else 1.0
        t_vec = torch.full((x.shape[0],), int(t), dtype=torch.long)
        eps = model(x, t_vec, c)
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        sigma = 0.0
        if mode == "ancestral" and t_prev >= 0:
            sigma = math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
        if sigma > 0.0:
            x = x + sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype)
        if not torch.all(torch.isfinite(x)):
            raise NonFiniteError("non-finite sample", step=i)
        if return_trajectory:
            traj.append(x)
    return (x, traj) if return_trajectory else x
