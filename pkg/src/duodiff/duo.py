"""Dual-backbone sampling and backbone training.

The sampler is a step function of t: the shallow backbone handles the
first t_s reverse steps (t >= T - t_s, where the input is mostly noise),
the full backbone the rest. Both backbones are trained independently, on
all t, with the plain noise-regression objective, so t_s can be chosen
freely after training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adadiff import AdaDiffModel, loss_all, simple_loss
from .diffusion import (NoiseSchedule, SamplerSpec, ddim_timesteps, ddim_step,
                        ddpm_step, forward_noise)
from .optim import AdamWState, adamw_step
from .tensor import NumericsError, Tape
from .uvit import DenoiserConfig, UVitModel

__all__ = [
    "DuoDiffSampler",
    "SampleResult",
    "TrainConfig",
    "select_backbone",
    "sample",
    "train_backbone",
    "train_adadiff",
]


def select_backbone(t: int, T: int, t_s: int) -> str:
    """'shallow' for the first t_s reverse steps (t >= T - t_s), else 'full'.

    t_s is in original timestep units, so DDIM subsequences inherit the rule.
    """
    if not 0 <= t < T:
        raise ValueError(f"t out of range [0, {T}): {t}")
    if not 0 <= t_s <= T:
        raise ValueError(f"t_s out of range [0, {T}]: {t_s}")
    return "shallow" if t >= T - t_s else "full"


@dataclass
class DuoDiffSampler:
    full: UVitModel
    shallow: UVitModel | None
    spec: SamplerSpec
    sched: NoiseSchedule

    def __post_init__(self):
        if self.spec.t_s > self.sched.T:
            raise ValueError(f"t_s={self.spec.t_s} exceeds T={self.sched.T}")
        if self.spec.t_s > 0 and self.shallow is None:
            raise ValueError("t_s > 0 requires a shallow backbone")
        if self.shallow is not None:
            cf, cs = self.full.config, self.shallow.config
            same = (cf.image_size == cs.image_size and cf.patch_size == cs.patch_size
                    and cf.in_channels == cs.in_channels
                    and cf.num_classes == cs.num_classes)
            if not same:
                raise ValueError("backbones must share image/patch/conditioning config")
            if cs.num_layers >= cf.num_layers:
                raise ValueError("shallow backbone must have fewer layers than full")


@dataclass
class SampleResult:
    images: np.ndarray  # (n, C, H, W)
    shallow_seconds: float
    full_seconds: float
    total_seconds: float
    step_backbones: list[tuple[int, str]]  # (t, backbone) per reverse step

    def timing_record(self, spec: SamplerSpec, sched_T: int) -> dict:
        return {
            "t_s": spec.t_s,
            "sampler": spec.kind,
            "n_steps": spec.n_steps if spec.kind == "ddim" else sched_T,
            "shallow_seconds": self.shallow_seconds,
            "full_seconds": self.full_seconds,
            "total_seconds": self.total_seconds,
            "n_samples": int(self.images.shape[0]),
        }


def sample(sampler: DuoDiffSampler, n: int, class_labels=None,
           batch_size: int = 64) -> SampleResult:
    """Run the reverse chain for n samples, switching backbones at T - t_s.

    Deterministic function of (spec.seed, t_s, spec) for fixed weights.
    Wall-clock time is recorded per phase.
    """
    spec = sampler.spec
    sched = sampler.sched
    cfg = sampler.full.config
    if cfg.num_classes > 0 and class_labels is None:
        raise ValueError("conditional model requires class labels for sampling")
    if cfg.num_classes == 0 and class_labels is not None:
        raise ValueError("unconditional model got class labels")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "ddim":
        ts = ddim_timesteps(sched.T, spec.n_steps)
    else:
        ts = np.arange(sched.T - 1, -1, -1)
    prevs = np.concatenate([ts[1:], [-1]]) if spec.kind == "ddim" else None

    images = []
    shallow_s = full_s = 0.0
    usage: list[tuple[int, str]] = []
    t_start = time.perf_counter()
    for lo in range(0, n, batch_size):
        b = min(batch_size, n - lo)
        labels = class_labels[lo:lo + b] if class_labels is not None else None
        x = rng.standard_normal((b, cfg.in_channels, cfg.image_size,
                                 cfg.image_size)).astype(np.float32)
        first_chunk = lo == 0
        for k, t in enumerate(ts):
            t = int(t)
            which = select_backbone(t, sched.T, spec.t_s)
            model = sampler.shallow if which == "shallow" else sampler.full
            step_t0 = time.perf_counter()
            eps = model.predict(x, t, labels)
            if spec.kind == "ddim":
                t_prev = int(prevs[k])
                z = None
                if spec.eta > 0.0 and t_prev >= 0:
                    z = rng.standard_normal(x.shape).astype(np.float32)
                x = ddim_step(x, eps, t, t_prev, spec.eta, sched, z)
            else:
                z = None
                if t > 0:
                    z = rng.standard_normal(x.shape).astype(np.float32)
                x = ddpm_step(x, eps, t, sched, z)
            dt = time.perf_counter() - step_t0
            if which == "shallow":
                shallow_s += dt
            else:
                full_s += dt
            if first_chunk:
                usage.append((t, which))
        images.append(x)
    total = time.perf_counter() - t_start
    return SampleResult(images=np.concatenate(images), shallow_seconds=shallow_s,
                        full_seconds=full_s, total_seconds=total,
                        step_backbones=usage)


@dataclass
class TrainConfig:
    """Desk-scale training hyperparameters (AdamW defaults follow the
    full-scale recipe; step counts and batch are scaled down)."""

    steps: int = 5000
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 3e-2
    beta1: float = 0.99
    beta2: float = 0.999
    warmup_steps: int = 100
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = only via checkpoint_cb at the end
    lambda_u: float = 1.0
    beta_ual: float = 1.0
    freeze_backbone: bool = True  # for head/UEM training


def _make_optimizer(tc: TrainConfig) -> AdamWState:
    return AdamWState(lr=tc.lr, weight_decay=tc.weight_decay, beta1=tc.beta1,
                      beta2=tc.beta2, warmup_steps=tc.warmup_steps)


def train_backbone(config: DenoiserConfig, dataset, tc: TrainConfig,
                   sched: NoiseSchedule, init_seed: int | None = None,
                   checkpoint_cb=None, start_step: int = 0,
                   model: UVitModel | None = None,
                   opt: AdamWState | None = None):
    """Train one denoiser on the plain noise-regression objective.

    t is drawn uniformly per sample, eps ~ N(0, I); data order is a pure
    function of tc.seed so identical seeds give identical checkpoints.
    Returns (model, optimizer state, loss log as [(step, loss), ...]).
    """
    if model is None:
        model = UVitModel(config, seed=tc.seed if init_seed is None else init_seed)
    if opt is None:
        opt = _make_optimizer(tc)
        opt.step_count = start_step
    rng = np.random.default_rng([tc.seed, 1])
    # fast-forward the data stream when resuming
    for _ in range(start_step):
        rng.integers(0, len(dataset), tc.batch_size)
        rng.integers(0, sched.T, tc.batch_size)
        rng.standard_normal((tc.batch_size, config.in_channels,
                             config.image_size, config.image_size))
    params = model.parameters()
    conditional = config.num_classes > 0
    log: list[tuple[int, float]] = []
    for step in range(start_step + 1, tc.steps + 1):
        idx = rng.integers(0, len(dataset), tc.batch_size)
        t = rng.integers(0, sched.T, tc.batch_size)
        eps = rng.standard_normal((tc.batch_size, config.in_channels,
                                   config.image_size, config.image_size)
                                  ).astype(np.float32)
        x0, labels = dataset.batch(idx)
        xt = forward_noise(x0, t, eps, sched)
        with Tape() as tape:
            pred = model.forward(xt, t, labels if conditional else None,
                                 return_activations=False)
            loss = simple_loss(pred, eps)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericsError(f"training diverged at step {step}: loss={loss_val}")
        grads = tape.backward(loss, params)
        adamw_step(opt, params, grads)
        if step % tc.log_every == 0 or step == tc.steps:
            log.append((step, loss_val))
        if checkpoint_cb and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            checkpoint_cb(step, model, opt)
    if checkpoint_cb:
        checkpoint_cb(tc.steps, model, opt)
    return model, opt, log


def train_adadiff(backbone: UVitModel, dataset, tc: TrainConfig,
                  sched: NoiseSchedule, checkpoint_cb=None):
    """Train output heads and UEMs on the joint loss.

    With tc.freeze_backbone (the default) the backbone parameters receive
    no gradient and stay bitwise unchanged. Returns (model, opt, log);
    the log rows are (step, total, simple, u, ual).
    """
    model = AdaDiffModel(backbone, lambda_u=tc.lambda_u, beta_ual=tc.beta_ual,
                         seed=tc.seed)
    if tc.freeze_backbone:
        backbone.freeze()
        params = model.head_uem_parameters()
    else:
        params = model.parameters()
    opt = _make_optimizer(tc)
    rng = np.random.default_rng([tc.seed, 2])
    config = backbone.config
    conditional = config.num_classes > 0
    log: list[tuple[int, float, float, float, float]] = []
    for step in range(1, tc.steps + 1):
        idx = rng.integers(0, len(dataset), tc.batch_size)
        t = rng.integers(0, sched.T, tc.batch_size)
        eps = rng.standard_normal((tc.batch_size, config.in_channels,
                                   config.image_size, config.image_size)
                                  ).astype(np.float32)
        x0, labels = dataset.batch(idx)
        xt = forward_noise(x0, t, eps, sched)
        with Tape() as tape:
            losses = loss_all(model, xt, t, eps,
                              labels if conditional else None)
        total_val = losses.total.item()
        if not np.isfinite(total_val):
            raise NumericsError(f"adadiff training diverged at step {step}")
        grads = tape.backward(losses.total, params)
        adamw_step(opt, params, grads)
        if step % tc.log_every == 0 or step == tc.steps:
            log.append((step, total_val, losses.simple, losses.u, losses.ual))
        if checkpoint_cb and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            checkpoint_cb(step, model, opt)
    if checkpoint_cb:
        checkpoint_cb(tc.steps, model, opt)
    return model, opt, log
