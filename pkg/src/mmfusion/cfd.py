"""Guidance-conditioned label diffusion over one-hot 2-vectors.

The forward process pulls a one-hot label toward the guidance
probability vector f while adding noise:

    y_t = sqrt(abar_t) y_0 + (1 - sqrt(abar_t)) f + sqrt(1 - abar_t) eps

Reverse sampling supports two modes. "eq4_literal" applies the printed
inversion of that identity with the predicted noise and is fully
deterministic. "card_posterior" (default) reconstructs y0_hat the same
way but then samples the closed-form Gaussian conditional
q(y_{t-1} | y_t, y0_hat, f), adding its posterior noise for t > 1; the
t = 1 step collapses to returning y0_hat (coefficients 1, 0, 0 and zero
variance with abar_0 defined as 1).

All randomness is drawn from caller-supplied numpy generators, never
from torch's global stream, so sampling is reproducible no matter what
torch state surrounds it.
"""

import dataclasses
import math

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError


@dataclasses.dataclass
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray       # (T,) float64, beta[t-1] = beta_t
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t):
        return self.alpha_bar[np.asarray(t) - 1]

    def alpha_bar_prev(self, t):
        t = np.asarray(t)
        return np.where(t > 1, self.alpha_bar[np.maximum(t - 2, 0)], 1.0)


def make_noise_schedule(timesteps, beta_start=0.01, beta_end=0.95):
    """Linear beta schedule with 64-bit cumulative products."""
    timesteps = int(timesteps)
    if timesteps < 1:
        raise ConfigurationError("timesteps must be >= 1")
    beta_start, beta_end = float(beta_start), float(beta_end)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha=alpha,
                         alpha_bar=np.cumprod(alpha))


def _check_t(t, schedule):
    t = np.asarray(t)
    if t.size == 0 or np.any(t < 1) or np.any(t > schedule.timesteps):
        raise ConfigurationError(
            f"t must lie in [1, {schedule.timesteps}], got {t}"
        )
    return t


def _coeff(values, like):
    """Schedule scalars/arrays as a tensor broadcastable against (..., 2)."""
    arr = np.asarray(values, dtype=np.float64)
    t = torch.as_tensor(arr, dtype=like.dtype)
    return t.reshape(arr.shape + (1,)) if arr.ndim else t


def forward_sample(y0, f_phi, t, epsilon, schedule):
    """Draw y_t of the guided forward process; epsilon is caller-supplied."""
    t = _check_t(t, schedule)
    y0 = torch.as_tensor(y0)
    f_phi = torch.as_tensor(f_phi, dtype=y0.dtype)
    epsilon = torch.as_tensor(epsilon, dtype=y0.dtype)
    root_ab = _coeff(np.sqrt(schedule.alpha_bar_at(t)), y0)
    root_var = _coeff(np.sqrt(1.0 - schedule.alpha_bar_at(t)), y0)
    return root_ab * y0 + (1.0 - root_ab) * f_phi + root_var * epsilon


def time_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps; dim must be even."""
    if dim % 2 != 0:
        raise ConfigurationError("time embedding dim must be even")
    t = torch.as_tensor(np.asarray(t), dtype=torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = t[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class NoisePredictor(nn.Module):
    """3-layer feedforward denoiser on (y_t, guidance, time embedding)."""

    def __init__(self, hidden=128, time_dim=16):
        super().__init__()
        self.time_dim = time_dim
        self.net = nn.Sequential(
            nn.Linear(4 + time_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, 2),
        )

    def forward(self, y_t, f_phi, t):
        y_t = torch.as_tensor(y_t)
        f_phi = torch.as_tensor(f_phi, dtype=y_t.dtype)
        emb = time_embedding(t, self.time_dim).to(y_t.dtype)
        emb = emb.expand(y_t.shape[:-1] + (self.time_dim,))
        return self.net(torch.cat([y_t, f_phi, emb], dim=-1))


def denoiser_forward(y_t, f_phi, t, params):
    """params: a NoisePredictor or any callable with the same signature."""
    return params(y_t, f_phi, t)


def diffusion_loss(y0_batch, f_phi_batch, params, schedule, rng):
    """Noise-matching loss, mean over the batch of ||eps - eps_hat||^2.

    Draw order per call: all timesteps (uniform on [1, T]), then all
    noise vectors.
    """
    y0 = torch.as_tensor(y0_batch)
    if y0.dim() != 2 or y0.shape[0] == 0:
        raise ValueError("y0_batch must be a nonempty (B, 2) batch")
    f_phi = torch.as_tensor(f_phi_batch, dtype=y0.dtype)
    b = y0.shape[0]
    t = rng.integers(1, schedule.timesteps + 1, size=b)
    eps = torch.as_tensor(rng.standard_normal((b, 2)), dtype=y0.dtype)
    y_t = forward_sample(y0, f_phi, t, eps, schedule)
    eps_hat = denoiser_forward(y_t, f_phi, t, params)
    return ((eps - eps_hat) ** 2).sum(dim=-1).mean()


def invert_to_y0(y_t, f_phi, t, eps_hat, schedule):
    """Solve the forward identity for y_0 given a noise estimate."""
    t = _check_t(t, schedule)
    y_t = torch.as_tensor(y_t)
    f_phi = torch.as_tensor(f_phi, dtype=y_t.dtype)
    eps_hat = torch.as_tensor(eps_hat, dtype=y_t.dtype)
    root_ab = _coeff(np.sqrt(schedule.alpha_bar_at(t)), y_t)
    root_var = _coeff(np.sqrt(1.0 - schedule.alpha_bar_at(t)), y_t)
    return (y_t - (1.0 - root_ab) * f_phi - root_var * eps_hat) / root_ab


REVERSE_MODES = ("card_posterior", "eq4_literal")


def reverse_step(y_t, f_phi, t, params, schedule, rng, mode="card_posterior"):
    """One reverse transition y_t -> y_{t-1}; t is a scalar in [1, T]."""
    if mode not in REVERSE_MODES:
        raise ConfigurationError(f"mode must be one of {REVERSE_MODES}")
    t = int(t)
    _check_t(t, schedule)
    y_t = torch.as_tensor(y_t)
    f_phi = torch.as_tensor(f_phi, dtype=y_t.dtype)
    eps_hat = denoiser_forward(y_t, f_phi, t, params)
    y0_hat = invert_to_y0(y_t, f_phi, t, eps_hat, schedule)
    if mode == "eq4_literal":
        return y0_hat

    ab_t = float(schedule.alpha_bar_at(t))
    ab_prev = float(schedule.alpha_bar_prev(t))  # abar_0 := 1
    alpha_t = float(schedule.alpha[t - 1])
    beta_t = float(schedule.beta[t - 1])
    denom = 1.0 - ab_t
    coef_y0 = beta_t * math.sqrt(ab_prev) / denom
    coef_yt = (1.0 - ab_prev) * math.sqrt(alpha_t) / denom
    coef_f = 1.0 + (math.sqrt(ab_t) - 1.0) * (math.sqrt(alpha_t) + math.sqrt(ab_prev)) / denom
    mean = coef_y0 * y0_hat + coef_yt * y_t + coef_f * f_phi
    if t > 1:
        var = beta_t * (1.0 - ab_prev) / denom
        noise = torch.as_tensor(rng.standard_normal(tuple(y_t.shape)), dtype=y_t.dtype)
        mean = mean + math.sqrt(var) * noise
    return mean


def sample_prediction(f_phi, params, schedule, chains=100, rng=None, mode="card_posterior"):
    """Average K reverse chains started at y_T ~ N(f_phi, I).

    f_phi may be a (2,) vector or a (B, 2) batch; returns (y0_tilde,
    label) with matching leading shape. Deterministic given rng.
    """
    if int(chains) < 1:
        raise ConfigurationError("chains must be >= 1")
    if rng is None:
        rng = np.random.default_rng()
    f = torch.as_tensor(f_phi)
    f_k = f.expand((int(chains),) + tuple(f.shape))
    y = f_k + torch.as_tensor(rng.standard_normal(tuple(f_k.shape)), dtype=f.dtype)
    for t in range(schedule.timesteps, 0, -1):
        y = reverse_step(y, f_k, t, params, schedule, rng, mode=mode)
    y0_tilde = y.mean(dim=0)
    label = y0_tilde.argmax(dim=-1)
    if f.dim() == 1:
        return y0_tilde, int(label)
    return y0_tilde, label
