"""Noise schedule, forward perturbation and the deterministic DDIM decoder."""
import math
from dataclasses import dataclass

import numpy as np

DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step ``beta``/``alpha`` (index 0 is t=1) and ``alpha_bar`` (index 0 is t=0)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    def beta_at(self, t):
        return self.beta[np.asarray(t) - 1]

    def alpha_at(self, t):
        return self.alpha[np.asarray(t) - 1]

    def snr_weight(self, t):
        """Loss weight ``alpha_bar_t / (1 - alpha_bar_t)``."""
        ab = self.alpha_bar[np.asarray(t)]
        return ab / np.maximum(1.0 - ab, DENOM_FLOOR)

    @classmethod
    def from_betas(cls, beta):
        beta = np.asarray(beta, dtype=np.float64)
        alpha = 1.0 - beta
        alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
        return cls(beta, alpha, alpha_bar)


def cosine_schedule(T, s=0.008, max_beta=0.999):
    """Cosine schedule: ``alpha_bar_t = f(t)/f(0)``, ``f(t) = cos^2((t/T+s)/(1+s) pi/2)``.

    ``beta_t = 1 - f(t)/f(t-1)`` is clipped at ``max_beta``; with T=4 the clip
    is active on the last step.
    """
    if T < 1:
        raise ValueError("T must be >= 1")

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    beta = [min(1.0 - f(t) / f(t - 1), max_beta) for t in range(1, T + 1)]
    return NoiseSchedule.from_betas(beta)


def _check_t(t, schedule):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")


def _bcast(values, like):
    """Per-sample coefficients reshaped to broadcast against ``like``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    shape = (-1,) + (1,) * (like.ndim - 1)
    if hasattr(like, "new_tensor"):
        return like.new_tensor(values).reshape(shape)
    return values.reshape(shape)


def perturb(z0, t, eps, schedule):
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` scalar or one per sample."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != target shape {tuple(z0.shape)}")
    _check_t(t, schedule)
    ab = schedule.alpha_bar[np.asarray(t)]
    return _bcast(np.sqrt(ab), z0) * z0 + _bcast(np.sqrt(1.0 - ab), z0) * eps


def mu(z_t, pred_z0, t, schedule):
    """Posterior mean ``(z_t - beta_t (z_t - sqrt(ab_t) pred) / (1 - ab_t)) / sqrt(alpha_t)``."""
    _check_t(t, schedule)
    beta = schedule.beta_at(t)
    alpha = schedule.alpha_at(t)
    ab = schedule.alpha_bar[np.asarray(t)]
    denom = np.maximum(1.0 - ab, DENOM_FLOOR)
    inner = z_t - _bcast(np.sqrt(ab), z_t) * pred_z0
    return (z_t - _bcast(beta / denom, z_t) * inner) / _bcast(np.sqrt(alpha), z_t)


def ddim_step(z_t, pred_z0, t, schedule):
    """One deterministic update from step ``t`` to ``t - 1``."""
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    noise_dir = (z_t - math.sqrt(ab_t) * pred_z0) / math.sqrt(max(1.0 - ab_t, DENOM_FLOOR))
    return math.sqrt(ab_prev) * pred_z0 + math.sqrt(max(1.0 - ab_prev, 0.0)) * noise_dir


def ddim_sample(denoise, z_T, schedule):
    """Run ``t = T..1`` with ``denoise(z_t, t) -> predicted z_0``, starting from ``z_T``.

    Exactly ``T`` denoiser calls; no randomness.
    """
    z = z_T
    for t in range(schedule.T, 0, -1):
        z = ddim_step(z, denoise(z, t), t, schedule)
    return z
