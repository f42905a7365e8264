"""Early-exit machinery: per-layer output heads, timestep-aware uncertainty
estimation, the joint training loss, thresholded early-exit inference, the
batch-exit simulation, and interpolated latency estimation.

The exit rule is evaluated layer by layer: the first layer whose estimated
uncertainty drops to the threshold or below wins, otherwise the full
backbone output is used. The batched variant runs the whole network once
and substitutes each sample's earliest qualifying head output, which by
construction matches the per-sample path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .uvit import DenoiserConfig, UVitModel, _trunc_normal, _unpatchify_op

__all__ = [
    "OutputHead",
    "UncertaintyModule",
    "AdaDiffModel",
    "ExitTrace",
    "uem_forward",
    "pseudo_uncertainty",
    "loss_u",
    "loss_ual",
    "loss_all",
    "early_exit_forward",
    "simulate_batch_early_exit",
    "estimate_latency",
    "write_exit_traces_csv",
]


class OutputHead:
    """Per-layer norm + linear map to patch pixels, then unpatchify.

    Same shape contract as the backbone's final head; zero-initialized
    projection so early predictions start at zero noise.
    """

    def __init__(self, config: DenoiserConfig, index: int,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.index = index
        d = config.embed_dim
        if params is not None:
            self.params = params
        else:
            self.params = {
                "norm.g": T.parameter(np.ones(d, dtype=np.float32)),
                "norm.b": T.parameter(np.zeros(d, dtype=np.float32)),
                "w": T.parameter(np.zeros((d, config.patch_dim), dtype=np.float32)),
                "b": T.parameter(np.zeros(config.patch_dim, dtype=np.float32)),
            }

    def forward(self, acts: Tensor) -> Tensor:
        """Noise prediction from the token sequence entering this head's layer."""
        cfg = self.config
        y = T.layer_norm(acts, self.params["norm.g"], self.params["norm.b"])
        img = T.narrow(y, 1, 1, cfg.num_patches)
        out = T.add(T.matmul(img, self.params["w"]), self.params["b"])
        return _unpatchify_op(out, cfg.patch_size, cfg.in_channels)


class UncertaintyModule:
    """Timestep-aware UEM: one fully-connected layer over the mean-pooled
    token sequence concatenated with the time embedding, squashed by a
    logistic sigmoid so the estimate lands in (0, 1)."""

    def __init__(self, config: DenoiserConfig, index: int,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.index = index
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng([seed, index])
            self.params = {
                "w": T.parameter(_trunc_normal(rng, (2 * config.embed_dim,))),
                "b": T.parameter(np.zeros((), dtype=np.float32)),
            }


def uem_forward(uem: UncertaintyModule, acts: Tensor, temb: Tensor) -> Tensor:
    """Per-sample uncertainty u in (0, 1) for one layer at one step.

    The pre-activation is computed as multiply+reduce rather than a gemv so
    batched and single-sample evaluation are bitwise identical.
    """
    pooled = T.mean(acts, axis=1)  # (B, D) mean over tokens
    z = T.concat([pooled, temb], axis=-1)  # (B, 2D)
    prod = T.mul(z, uem.params["w"])
    pre = T.scale(T.mean(prod, axis=-1), float(z.shape[-1]))
    return T.sigmoid(T.add(pre, uem.params["b"]))


def pseudo_uncertainty(eps_pred, eps) -> np.ndarray:
    """Regression target for the UEM: tanh of the mean absolute error,
    one value per sample. Always detached from the graph."""
    a = eps_pred.data if isinstance(eps_pred, Tensor) else np.asarray(eps_pred)
    b = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if a.shape != b.shape:
        raise T.ShapeError("pseudo_uncertainty", a.shape, b.shape)
    flat = np.abs(a - b).reshape(a.shape[0], -1)
    u_hat = np.tanh(flat.mean(axis=1)).astype(np.float32)
    # float32 tanh saturates to 1.0 for huge errors; keep the codomain [0, 1)
    return np.minimum(u_hat, np.nextafter(np.float32(1.0), np.float32(0.0)))


class AdaDiffModel:
    """A frozen-or-trainable backbone plus N output heads and N UEMs."""

    def __init__(self, backbone: UVitModel, lambda_u: float = 1.0,
                 beta_ual: float = 1.0, seed: int = 0,
                 heads: list[OutputHead] | None = None,
                 uems: list[UncertaintyModule] | None = None):
        self.backbone = backbone
        self.lambda_u = lambda_u
        self.beta_ual = beta_ual
        n = backbone.config.num_layers
        self.heads = heads or [OutputHead(backbone.config, i) for i in range(n)]
        self.uems = uems or [UncertaintyModule(backbone.config, i, seed=seed)
                             for i in range(n)]
        if len(self.heads) != n or len(self.uems) != n:
            raise ValueError("heads/uems count must equal backbone depth")

    @property
    def num_layers(self) -> int:
        return self.backbone.config.num_layers

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.params.items()}
        for i, h in enumerate(self.heads):
            out.update({f"head{i}.{k}": v for k, v in h.params.items()})
        for i, u in enumerate(self.uems):
            out.update({f"uem{i}.{k}": v for k, v in u.params.items()})
        if trainable_only:
            out = {k: v for k, v in out.items() if v.requires_grad}
        return out

    def head_uem_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items()
                if not k.startswith("backbone.")}


def loss_u(us: Sequence[Tensor], u_hats: Sequence[np.ndarray]) -> Tensor:
    """Sum over layers of squared (u - u_hat), averaged over the batch."""
    if len(us) != len(u_hats):
        raise ValueError(f"loss_u: {len(us)} u values vs {len(u_hats)} targets")
    total = None
    for u, uh in zip(us, u_hats):
        d = T.sub(u, Tensor(uh))
        term = T.mean(T.mul(d, d))
        total = term if total is None else T.add(total, term)
    return total


def loss_ual(eps_preds: Sequence[Tensor], eps: np.ndarray,
             us: Sequence[Tensor]) -> Tensor:
    """Uncertainty-weighted sum of per-head MSEs, batch-averaged.

    The (1 - u) weights are treated as constants: no gradient flows from
    them into the UEM (otherwise u -> 1 would kill the head loss)."""
    target = Tensor(eps)
    total = None
    for pred, u in zip(eps_preds, us):
        w = Tensor(1.0 - u.data)  # detached weight, shape (B,)
        d = T.sub(pred, target)
        per_sample = T.mean(T.mul(d, d), axis=tuple(range(1, d.ndim)))
        term = T.mean(T.mul(per_sample, w))
        total = term if total is None else T.add(total, term)
    return total


def simple_loss(eps_pred: Tensor, eps: np.ndarray) -> Tensor:
    """Mean squared noise-prediction error (the plain diffusion objective)."""
    d = T.sub(eps_pred, Tensor(eps))
    return T.mean(T.mul(d, d))


@dataclass
class AdaDiffLosses:
    total: Tensor
    simple: float
    u: float
    ual: float


def loss_all(model: AdaDiffModel, xt: np.ndarray, t, eps: np.ndarray,
             labels=None) -> AdaDiffLosses:
    """Joint objective: simple backbone loss + lambda * L_u + beta * L_ual.

    Must be called under an active tape. With a frozen backbone only the
    head/UEM parameters receive gradients."""
    backbone = model.backbone
    acts: list[Tensor] = []
    seq = backbone.embed(xt, t, labels)
    seq = backbone.run_blocks(seq, acts=acts)
    final_pred = backbone.head(seq)
    temb = backbone.time_embedding(t, xt.shape[0])

    n = model.num_layers
    us = [uem_forward(model.uems[i], acts[i], temb) for i in range(n)]
    preds = [model.heads[i].forward(acts[i]) for i in range(n)]
    u_hats = [pseudo_uncertainty(preds[i].data, eps) for i in range(n)]

    l_simple = simple_loss(final_pred, eps)
    l_u = loss_u(us, u_hats)
    l_ual = loss_ual(preds, eps, us)
    total = l_simple
    if model.lambda_u:
        total = T.add(total, T.scale(l_u, model.lambda_u))
    if model.beta_ual:
        total = T.add(total, T.scale(l_ual, model.beta_ual))
    return AdaDiffLosses(total=total, simple=l_simple.item(),
                         u=l_u.item(), ual=l_ual.item())


def early_exit_forward(model: AdaDiffModel, xt: np.ndarray, t: int,
                       theta: float, labels=None, return_us: bool = False):
    """Layer-by-layer forward for a single input (batch of one).

    Returns (eps_pred, exit_layer); blocks past the exit are never run.
    With return_us=True also returns the uncertainties of visited layers.
    """
    backbone = model.backbone
    n = model.num_layers
    # threshold compared in float32 so the batched path decides identically
    theta32 = float(np.float32(theta))
    seq = backbone.embed(xt, t, labels)
    temb = backbone.time_embedding(t, xt.shape[0])
    skips: dict[int, Tensor] = {}
    us: list[float] = []
    for i in range(n):
        seq = backbone.block_input(i, seq, skips)
        u = uem_forward(model.uems[i], seq, temb)
        u_val = float(u.data[0])
        us.append(u_val)
        if u_val <= theta32:
            pred = model.heads[i].forward(seq).data
            return (pred, i, us) if return_us else (pred, i)
        seq = backbone.apply_block(i, seq)
    pred = backbone.head(seq).data
    return (pred, n, us) if return_us else (pred, n)


def simulate_batch_early_exit(model: AdaDiffModel, xt: np.ndarray, t: int,
                              theta: float, labels=None):
    """Batched early exit via one full forward pass.

    Runs every block for the whole batch, keeps all intermediate head
    outputs and uncertainties, then replaces each sample's output with its
    earliest qualifying head output. Matches the shrinking-batch semantics
    of the per-sample path exactly.

    Returns (eps_preds (B, ...), exit_layers (B,), us (B, N)).
    """
    backbone = model.backbone
    n = model.num_layers
    b = xt.shape[0]
    acts: list[Tensor] = []
    seq = backbone.embed(xt, t, labels)
    seq = backbone.run_blocks(seq, acts=acts)
    temb = backbone.time_embedding(t, b)

    us = np.stack([uem_forward(model.uems[i], acts[i], temb).data
                   for i in range(n)], axis=1)  # (B, N)
    outputs = np.stack([model.heads[i].forward(acts[i]).data for i in range(n)]
                       + [backbone.head(seq).data], axis=0)  # (N+1, B, ...)

    qualify = us <= np.float32(theta)
    exit_layers = np.where(qualify.any(axis=1), qualify.argmax(axis=1), n)
    eps_preds = outputs[exit_layers, np.arange(b)]
    return eps_preds, exit_layers.astype(np.int64), us


def estimate_latency(exit_layers, full_time: float, num_layers: int) -> float:
    """Linear interpolation of total running time by the mean exit layer."""
    arr = np.asarray(exit_layers, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("estimate_latency: empty exit_layers")
    return float(full_time * arr.mean() / num_layers)


@dataclass
class ExitTrace:
    """Per-sample record of exit decisions over a sampling run."""

    sample_id: int
    steps: list[int] = dc_field(default_factory=list)
    exit_layers: list[int] = dc_field(default_factory=list)
    u_exit: list[float] = dc_field(default_factory=list)  # NaN when no exit

    def record(self, t: int, exit_layer: int, u_at_exit: float) -> None:
        self.steps.append(t)
        self.exit_layers.append(exit_layer)
        self.u_exit.append(u_at_exit)


def write_exit_traces_csv(path, traces: Sequence[ExitTrace],
                          meta_line: str | None = None) -> None:
    """CSV schema: sample_id, t, exit_layer, u_exit."""
    with open(path, "w", newline="") as fh:
        if meta_line:
            fh.write(f"# {meta_line}\n")
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "t", "exit_layer", "u_exit"])
        for tr in traces:
            for t, e, u in zip(tr.steps, tr.exit_layers, tr.u_exit):
                writer.writerow([tr.sample_id, t, e, f"{u:.6f}"])
