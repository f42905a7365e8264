"""Noise schedule, forward noising, and DDPM/DDIM reverse transitions.

All functions here are pure array math over float32 data (schedule tables
are kept in float64 so cumulative products and the transition coefficients
stay exact). An analytic Gaussian denoiser provides a training-free oracle
for end-to-end sampler checks: for data drawn from an isotropic Gaussian
the exact posterior-mean noise predictor is known in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = [
    "NoiseSchedule",
    "SamplerSpec",
    "make_schedule",
    "forward_noise",
    "ddpm_step",
    "ddpm_sigma",
    "ddim_step",
    "ddim_sigma",
    "ddim_timesteps",
    "analytic_gaussian_denoiser",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha-bar tables, indexed t = 0..T-1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar at t-1, with alpha_bar[-1] defined as 1."""
        return float(self.alpha_bar[t - 1]) if t > 0 else 1.0


@dataclass(frozen=True)
class SamplerSpec:
    """Sampler choice plus the DuoDiff switch step.

    ``t_s`` counts initial reverse steps handled by the shallow backbone and
    is always in original timestep units, also under DDIM subsequences.
    """

    kind: str = "ddpm"
    eta: float = 0.0
    n_steps: int = 0  # 0 means the full T-step chain (DDPM)
    t_s: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.t_s < 0:
            raise ValueError(f"t_s must be >= 0, got {self.t_s}")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar by cumulative product."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got "
                         f"({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


def forward_noise(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` may be a scalar step or a per-sample integer array (in which case
    the leading axis of x0 is the batch).
    """
    x0 = _as_array(x0)
    eps = _as_array(eps)
    if x0.shape != eps.shape:
        raise ShapeError("forward_noise", x0.shape, eps.shape)
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise ValueError(f"t out of range [0, {sched.T}): {t}")
    ab = sched.alpha_bar[t_arr]
    if t_arr.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    a = np.sqrt(ab).astype(np.float32)
    b = np.sqrt(1.0 - ab).astype(np.float32)
    return a * x0 + b * eps


def ddpm_step(xt, eps_pred, t: int, sched: NoiseSchedule, z=None) -> np.ndarray:
    """One DDPM reverse transition x_t -> x_{t-1}.

    sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) for t > 0,
    sigma_0 = 0 (z must be absent or zero at t = 0).
    """
    if not 0 <= t < sched.T:
        raise ValueError(f"t out of range [0, {sched.T}): {t}")
    xt = _as_array(xt)
    eps_pred = _as_array(eps_pred)
    if xt.shape != eps_pred.shape:
        raise ShapeError("ddpm_step", xt.shape, eps_pred.shape)
    a_t = float(sched.alpha[t])
    b_t = float(sched.beta[t])
    ab_t = float(sched.alpha_bar[t])
    mean = (xt - np.float32(b_t / np.sqrt(1.0 - ab_t)) * eps_pred) * np.float32(1.0 / np.sqrt(a_t))
    if t == 0:
        if z is not None and np.any(_as_array(z)):
            raise ValueError("ddpm_step: z must be zero at t = 0")
        return mean
    sigma = np.sqrt(b_t * (1.0 - sched.alpha_bar_prev(t)) / (1.0 - ab_t))
    if z is None:
        return mean
    return mean + np.float32(sigma) * _as_array(z)


def ddpm_sigma(t: int, sched: NoiseSchedule) -> float:
    """Posterior noise scale sigma_t of the DDPM transition."""
    if t == 0:
        return 0.0
    return float(np.sqrt(sched.beta[t] * (1.0 - sched.alpha_bar_prev(t))
                         / (1.0 - sched.alpha_bar[t])))


def ddim_step(xt, eps_pred, t: int, t_prev: int, eta: float,
              sched: NoiseSchedule, z=None) -> np.ndarray:
    """One DDIM transition x_t -> x_{t_prev} (t_prev = -1 lands on x_0).

    eta = 0 is the deterministic sampler; eta = 1 over consecutive steps
    reproduces the DDPM noise scale.
    """
    if not 0 <= t < sched.T:
        raise ValueError(f"t out of range [0, {sched.T}): {t}")
    if t_prev >= t:
        raise ValueError(f"t_prev must be < t, got t={t}, t_prev={t_prev}")
    xt = _as_array(xt)
    eps_pred = _as_array(eps_pred)
    if xt.shape != eps_pred.shape:
        raise ShapeError("ddim_step", xt.shape, eps_pred.shape)
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t_prev]) if t_prev >= 0 else 1.0
    x0_hat = (xt - np.float32(np.sqrt(1.0 - ab_t)) * eps_pred) * np.float32(1.0 / np.sqrt(ab_t))
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    rem = 1.0 - ab_prev - sigma * sigma
    if rem < -1e-12:
        raise ValueError(f"ddim_step: 1 - alpha_bar_prev - sigma^2 = {rem} < 0")
    out = np.float32(np.sqrt(ab_prev)) * x0_hat + np.float32(np.sqrt(max(rem, 0.0))) * eps_pred
    if sigma > 0.0 and z is not None:
        out = out + np.float32(sigma) * _as_array(z)
    return out


def ddim_sigma(t: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t_prev]) if t_prev >= 0 else 1.0
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
                 * np.sqrt(1.0 - ab_t / ab_prev))


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Strictly decreasing DDIM step subsequence, uniform over [0, T-1],
    ending at 0. Rounding collisions (n_steps close to T) are collapsed."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    ts = np.unique(np.linspace(0, T - 1, n_steps).round().astype(np.int64))
    return ts[::-1].copy()


def analytic_gaussian_denoiser(xt, t: int, mu0, sigma0: float,
                               sched: NoiseSchedule) -> np.ndarray:
    """Exact posterior-mean noise predictor for N(mu0, sigma0^2 I) data.

    x0_hat = (sigma0^2 sqrt(ab) x_t + (1 - ab) mu0) / (ab sigma0^2 + 1 - ab)
    eps_hat = (x_t - sqrt(ab) x0_hat) / sqrt(1 - ab)
    """
    if sigma0 <= 0.0:
        raise ValueError(f"sigma0 must be > 0, got {sigma0}")
    if not 0 <= t < sched.T:
        raise ValueError(f"t out of range [0, {sched.T}): {t}")
    xt = _as_array(xt)
    mu0 = np.asarray(_as_array(mu0))
    ab = float(sched.alpha_bar[t])
    s2 = sigma0 * sigma0
    denom = ab * s2 + (1.0 - ab)
    x0_hat = (np.float32(s2 * np.sqrt(ab) / denom) * xt
              + np.float32((1.0 - ab) / denom) * mu0)
    return (xt - np.float32(np.sqrt(ab)) * x0_hat) * np.float32(1.0 / np.sqrt(1.0 - ab))
