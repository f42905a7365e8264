"""Quality and latency evaluation.

FID at desk scale is replaced by a Fréchet distance over fixed random
projection features: absolute values are not comparable to Inception-based
FID, but orderings and trends are. The per-step difficulty profile and the
exit-trend profile expose how task hardness and exit depth vary over the
reverse process.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adadiff import AdaDiffModel, ExitTrace, simulate_batch_early_exit
from .diffusion import NoiseSchedule, ddpm_step
from .tensor import NumericsError

__all__ = [
    "FeatureExtractor",
    "TrendProfile",
    "MseProfile",
    "BenchResult",
    "frechet_distance",
    "fid_proxy",
    "per_step_mse_profile",
    "exit_trend_profile",
    "latency_bench",
    "analytic_model_fn",
    "backbone_model_fn",
]


class FeatureExtractor:
    """Seeded random projection from flattened image to d features, then a
    fixed tanh nonlinearity. Deterministic given its seed."""

    def __init__(self, image_shape: tuple[int, int, int], dim: int = 64,
                 seed: int = 0):
        self.image_shape = tuple(image_shape)
        self.dim = dim
        self.seed = seed
        flat = int(np.prod(image_shape))
        rng = np.random.default_rng(seed)
        self.proj = (rng.standard_normal((flat, dim)) / np.sqrt(flat)
                     ).astype(np.float32)

    def extract(self, images: np.ndarray) -> np.ndarray:
        if images.ndim != 4 or images.shape[1:] != self.image_shape:
            raise ValueError(f"extract: image shape {images.shape[1:]} != "
                             f"{self.image_shape}")
        flat = images.reshape(images.shape[0], -1).astype(np.float32)
        return np.tanh(flat @ self.proj)


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(s)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2).

    Matrix square roots via symmetric eigendecomposition, negative
    eigenvalues clamped to zero.
    """
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    d = feats_a.shape[1]
    if feats_b.shape[1] != d:
        raise ValueError(f"feature dims differ: {d} vs {feats_b.shape[1]}")
    if len(feats_a) < d + 1 or len(feats_b) < d + 1:
        raise ValueError(f"need at least {d + 1} samples per set, got "
                         f"{len(feats_a)} and {len(feats_b)}")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    sa = np.atleast_2d(np.cov(feats_a, rowvar=False))
    sb = np.atleast_2d(np.cov(feats_b, rowvar=False))
    if not (np.isfinite(sa).all() and np.isfinite(sb).all()):
        raise NumericsError("frechet_distance: non-finite covariance")
    root_a = _psd_sqrt(sa)
    inner = root_a @ sb @ root_a
    inner = 0.5 * (inner + inner.T)
    tr_sqrt = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt)


def fid_proxy(samples: np.ndarray, reference: np.ndarray,
              extractor: FeatureExtractor) -> float:
    """Fréchet distance over extracted features; inputs are clipped to
    [-1, 1] so both sets are preprocessed identically."""
    if samples.shape[1:] != reference.shape[1:]:
        raise ValueError(f"image shapes differ: {samples.shape[1:]} vs "
                         f"{reference.shape[1:]}")
    fa = extractor.extract(np.clip(samples, -1.0, 1.0))
    fb = extractor.extract(np.clip(reference, -1.0, 1.0))
    return frechet_distance(fa, fb)


def backbone_model_fn(model, labels=None):
    """Adapter: (xt, t_vec) -> eps_pred for a UVitModel."""
    def fn(xt, t):
        return model.predict(xt, t, labels)
    return fn


def analytic_model_fn(mu0, sigma0: float, sched: NoiseSchedule):
    """Adapter: vectorized analytic Gaussian denoiser over per-sample t."""
    mu0 = np.asarray(mu0, dtype=np.float32)

    def fn(xt, t):
        ab = sched.alpha_bar[np.asarray(t)].reshape((-1,) + (1,) * (xt.ndim - 1))
        s2 = sigma0 * sigma0
        denom = ab * s2 + (1.0 - ab)
        x0_hat = (s2 * np.sqrt(ab) / denom) * xt + ((1.0 - ab) / denom) * mu0
        return ((xt - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)).astype(np.float32)
    return fn


@dataclass
class MseProfile:
    bucket_lo: np.ndarray  # inclusive t bound per bucket
    bucket_hi: np.ndarray  # exclusive
    mean_mse: np.ndarray   # mean squared-norm error per bucket
    counts: np.ndarray


def per_step_mse_profile(model_fn, dataset, sched: NoiseSchedule, n: int,
                         buckets: int = 20, seed: int = 0,
                         batch_size: int = 64) -> MseProfile:
    """Mean ||f(x_t, t) - eps||^2 (squared norm per sample) in uniform
    t-buckets, over n random (x0, t, eps) draws."""
    rng = np.random.default_rng(seed)
    edges = np.linspace(0, sched.T, buckets + 1).astype(np.int64)
    sums = np.zeros(buckets)
    counts = np.zeros(buckets, dtype=np.int64)
    for lo in range(0, n, batch_size):
        b = min(batch_size, n - lo)
        idx = rng.integers(0, len(dataset), b)
        t = rng.integers(0, sched.T, b)
        x0, _ = dataset.batch(idx)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        ab = sched.alpha_bar[t].reshape((-1,) + (1,) * (x0.ndim - 1))
        xt = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)
        pred = model_fn(xt, t)
        err = ((pred.astype(np.float64) - eps) ** 2).reshape(b, -1).sum(axis=1)
        which = np.minimum(t * buckets // sched.T, buckets - 1)
        np.add.at(sums, which, err)
        np.add.at(counts, which, 1)
    means = np.divide(sums, counts, out=np.full(buckets, np.nan),
                      where=counts > 0)
    return MseProfile(bucket_lo=edges[:-1], bucket_hi=edges[1:],
                      mean_mse=means, counts=counts)


@dataclass
class TrendProfile:
    """Per-step exit statistics over n sampling chains (Figure-1 style)."""

    t: np.ndarray
    mean_exit: np.ndarray
    std_exit: np.ndarray
    theta: float
    n_samples: int


def exit_trend_profile(model: AdaDiffModel, theta: float, n: int,
                       sched: NoiseSchedule, seed: int = 0, labels=None,
                       batch_size: int = 64):
    """Run n AdaDiff sampling chains (full DDPM schedule), recording the
    exit layer at every step. Returns (TrendProfile, [ExitTrace, ...])."""
    if n < 1:
        raise ValueError("need at least one chain")
    cfg = model.backbone.config
    rng = np.random.default_rng(seed)
    T = sched.T
    nl = model.num_layers
    traces = [ExitTrace(sample_id=i) for i in range(n)]
    all_exits = np.zeros((n, T), dtype=np.int64)
    for lo in range(0, n, batch_size):
        b = min(batch_size, n - lo)
        lab = labels[lo:lo + b] if labels is not None else None
        x = rng.standard_normal((b, cfg.in_channels, cfg.image_size,
                                 cfg.image_size)).astype(np.float32)
        for t in range(T - 1, -1, -1):
            eps, exits, us = simulate_batch_early_exit(model, x, t, theta, lab)
            all_exits[lo:lo + b, t] = exits
            for j in range(b):
                e = int(exits[j])
                u_at = float(us[j, e]) if e < nl else float("nan")
                traces[lo + j].record(t, e, u_at)
            z = rng.standard_normal(x.shape).astype(np.float32) if t > 0 else None
            x = ddpm_step(x, eps, t, sched, z)
    mean_exit = all_exits.mean(axis=0)
    std_exit = all_exits.std(axis=0)
    profile = TrendProfile(t=np.arange(T), mean_exit=mean_exit,
                           std_exit=std_exit, theta=theta, n_samples=n)
    return profile, traces


@dataclass
class BenchResult:
    median_seconds_per_sample: float
    iqr_seconds_per_sample: float
    per_run_seconds_per_sample: list[float]
    batch: int


def latency_bench(sampler_fn, n_runs: int, batch: int,
                  warmup_runs: int = 1) -> BenchResult:
    """Median and IQR of per-sample wall time over repeated sequential runs;
    warmup runs are discarded."""
    if warmup_runs < 1:
        raise ValueError("warmup_runs must be >= 1")
    for _ in range(warmup_runs):
        sampler_fn(batch)
    per_run = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        sampler_fn(batch)
        per_run.append((time.perf_counter() - t0) / batch)
    q25, q50, q75 = np.percentile(per_run, [25, 50, 75])
    return BenchResult(median_seconds_per_sample=float(q50),
                       iqr_seconds_per_sample=float(q75 - q25),
                       per_run_seconds_per_sample=per_run, batch=batch)
