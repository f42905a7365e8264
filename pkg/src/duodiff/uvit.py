"""Depth-configurable U-ViT-style transformer noise predictor.

Pre-norm attention/MLP blocks over patch tokens, one prepended token
carrying the time (and optional class) embedding, and long skip
connections pairing block i with block N-1-i, merged by concatenation
plus a linear projection. The forward pass exposes the token sequence
entering every block so early-exit heads can attach anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DenoiserConfig",
    "UVitModel",
    "patchify",
    "unpatchify",
    "sinusoidal_features",
]


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 128
    num_layers: int = 9
    num_heads: int = 4
    num_classes: int = 0  # 0 = unconditional

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by "
                             f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by "
                             f"num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    @property
    def seq_len(self) -> int:
        # patch tokens plus the prepended time/class token
        return self.num_patches + 1


def patchify(x: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, num_patches, C * p * p) row-major patch tokens."""
    if x.ndim != 4 or x.shape[2] % patch_size or x.shape[3] % patch_size:
        raise ValueError(f"patchify: bad shape {x.shape} for patch {patch_size}")
    b, c, h, w = x.shape
    gh, gw = h // patch_size, w // patch_size
    y = x.reshape(b, c, gh, patch_size, gw, patch_size)
    y = y.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(y.reshape(b, gh * gw, c * patch_size * patch_size))


def unpatchify(tokens: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify`; exact round trip."""
    b, p, d = tokens.shape
    g = int(round(math.sqrt(p)))
    if g * g != p or d != channels * patch_size * patch_size:
        raise ValueError(f"unpatchify: bad shape {tokens.shape}")
    y = tokens.reshape(b, g, g, channels, patch_size, patch_size)
    y = y.transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(y.reshape(b, channels, g * patch_size, g * patch_size))


def _unpatchify_op(tokens: Tensor, patch_size: int, channels: int) -> Tensor:
    """Tape-recorded unpatchify so gradients flow through the output head."""
    b, p, d = tokens.shape
    g = int(round(math.sqrt(p)))
    y = T.reshape(tokens, (b, g, g, channels, patch_size, patch_size))
    y = T.transpose(y, (0, 3, 1, 4, 2, 5))
    return T.reshape(y, (b, channels, g * patch_size, g * patch_size))


def sinusoidal_features(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Raw timestep features: half sin, half cos, log-spaced frequencies.

    t may be a scalar or an integer array; returns (len(t), dim) float32.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t_arr[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((len(t_arr), 1))], axis=1)
    return out.astype(np.float32)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within 2 std."""
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2.0 * std
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2.0 * std
    return x.astype(np.float32)


class UVitModel:
    """Transformer denoiser f(x_t, t[, class]) over patch tokens."""

    def __init__(self, config: DenoiserConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        if params is not None:
            self.params = params
        else:
            self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict[str, Tensor]:
        cfg = self.config
        d = cfg.embed_dim
        p: dict[str, Tensor] = {}

        def w(name, shape):
            p[name] = T.parameter(_trunc_normal(rng, shape))

        def zeros(name, shape):
            p[name] = T.parameter(np.zeros(shape, dtype=np.float32))

        def ones(name, shape):
            p[name] = T.parameter(np.ones(shape, dtype=np.float32))

        w("patch_embed.w", (cfg.patch_dim, d))
        zeros("patch_embed.b", (d,))
        w("pos_embed", (cfg.seq_len, d))
        w("time_mlp.w1", (d, d))
        zeros("time_mlp.b1", (d,))
        w("time_mlp.w2", (d, d))
        zeros("time_mlp.b2", (d,))
        if cfg.num_classes > 0:
            w("class_embed", (cfg.num_classes, d))
        n = cfg.num_layers
        for i in range(n):
            pre = f"block{i}."
            ones(pre + "norm1.g", (d,))
            zeros(pre + "norm1.b", (d,))
            w(pre + "attn.qkv_w", (d, 3 * d))
            zeros(pre + "attn.qkv_b", (3 * d,))
            w(pre + "attn.proj_w", (d, d))
            zeros(pre + "attn.proj_b", (d,))
            ones(pre + "norm2.g", (d,))
            zeros(pre + "norm2.b", (d,))
            w(pre + "mlp.w1", (d, 4 * d))
            zeros(pre + "mlp.b1", (4 * d,))
            w(pre + "mlp.w2", (4 * d, d))
            zeros(pre + "mlp.b2", (d,))
            if 2 * i > n - 1:  # second half: merges the long skip
                w(pre + "skip.w", (2 * d, d))
                zeros(pre + "skip.b", (d,))
        ones("final_norm.g", (d,))
        zeros("final_norm.b", (d,))
        zeros("head.w", (d, cfg.patch_dim))  # zero init: eps_pred starts at 0
        zeros("head.b", (cfg.patch_dim,))
        return p

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        if not trainable_only:
            return dict(self.params)
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def freeze(self) -> None:
        for v in self.params.values():
            v.requires_grad = False

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {v.shape} vs "
                                 f"{self.params[k].data.shape}")
            self.params[k].data = np.asarray(v, dtype=np.float32, order="C")

    # ------------------------------------------------------------------

    def time_embedding(self, t, batch: int) -> Tensor:
        """Sinusoidal features of t through the model's 2-layer MLP."""
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            t_arr = np.full(batch, int(t_arr), dtype=np.int64)
        feats = Tensor(sinusoidal_features(t_arr, self.config.embed_dim))
        p = self.params
        h = T.add(T.matmul(feats, p["time_mlp.w1"]), p["time_mlp.b1"])
        h = T.gelu(h)
        return T.add(T.matmul(h, p["time_mlp.w2"]), p["time_mlp.b2"])

    def _attention(self, i: int, x: Tensor) -> Tensor:
        cfg = self.config
        p = self.params
        b, s, d = x.shape
        nh = cfg.num_heads
        dh = d // nh
        qkv = T.add(T.matmul(x, p[f"block{i}.attn.qkv_w"]), p[f"block{i}.attn.qkv_b"])
        q, k, v = T.split(qkv, 3, axis=-1)

        def to_heads(z):
            z = T.reshape(z, (b, s, nh, dh))
            return T.transpose(z, (0, 2, 1, 3))

        q, k, v = to_heads(q), to_heads(k), to_heads(v)
        att = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        att = T.softmax(T.scale(att, 1.0 / math.sqrt(dh)))
        o = T.matmul(att, v)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, s, d))
        return T.add(T.matmul(o, p[f"block{i}.attn.proj_w"]), p[f"block{i}.attn.proj_b"])

    def apply_block(self, i: int, x: Tensor) -> Tensor:
        p = self.params
        a = T.layer_norm(x, p[f"block{i}.norm1.g"], p[f"block{i}.norm1.b"])
        x = T.add(x, self._attention(i, a))
        m = T.layer_norm(x, p[f"block{i}.norm2.g"], p[f"block{i}.norm2.b"])
        m = T.add(T.matmul(m, p[f"block{i}.mlp.w1"]), p[f"block{i}.mlp.b1"])
        m = T.gelu(m)
        m = T.add(T.matmul(m, p[f"block{i}.mlp.w2"]), p[f"block{i}.mlp.b2"])
        return T.add(x, m)

    def block_input(self, i: int, seq: Tensor, skips: dict[int, Tensor]) -> Tensor:
        """The sequence entering block i: merges the long skip in the second
        half and records first-half inputs for later pairing."""
        n = self.config.num_layers
        p = self.params
        if 2 * i > n - 1:
            merged = T.concat([seq, skips[n - 1 - i]], axis=-1)
            seq = T.add(T.matmul(merged, p[f"block{i}.skip.w"]),
                        p[f"block{i}.skip.b"])
        if 2 * i < n - 1:
            skips[i] = seq
        return seq

    def embed(self, x: np.ndarray, t, labels=None) -> Tensor:
        """Token sequence entering block 0: patches plus time/class token."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"input shape {x.shape} does not match config")
        if cfg.num_classes > 0 and labels is None:
            raise ValueError("conditional model requires class labels")
        if cfg.num_classes == 0 and labels is not None:
            raise ValueError("unconditional model got class labels")
        b = x.shape[0]
        p = self.params
        tokens = Tensor(patchify(np.asarray(x, dtype=np.float32), cfg.patch_size))
        h = T.add(T.matmul(tokens, p["patch_embed.w"]), p["patch_embed.b"])
        temb = self.time_embedding(t, b)
        if cfg.num_classes > 0:
            temb = T.add(temb, T.embedding(p["class_embed"], np.asarray(labels)))
        lead = T.reshape(temb, (b, 1, cfg.embed_dim))
        seq = T.concat([lead, h], axis=1)
        return T.add(seq, p["pos_embed"])

    def run_blocks(self, seq: Tensor, acts: list[Tensor] | None = None) -> Tensor:
        """Apply all blocks; ``acts`` (if given) collects the sequence entering
        each block, then the sequence entering the final head (N+1 entries)."""
        skips: dict[int, Tensor] = {}
        for i in range(self.config.num_layers):
            seq = self.block_input(i, seq, skips)
            if acts is not None:
                acts.append(seq)
            seq = self.apply_block(i, seq)
        if acts is not None:
            acts.append(seq)
        return seq

    def head(self, seq: Tensor) -> Tensor:
        """Final norm + per-token linear map + unpatchify (drops time token)."""
        cfg = self.config
        p = self.params
        y = T.layer_norm(seq, p["final_norm.g"], p["final_norm.b"])
        img = T.narrow(y, 1, 1, cfg.num_patches)
        out = T.add(T.matmul(img, p["head.w"]), p["head.b"])
        return _unpatchify_op(out, cfg.patch_size, cfg.in_channels)

    def forward(self, x: np.ndarray, t, labels=None,
                return_activations: bool = True):
        """Noise prediction plus the N+1 per-block input activations."""
        acts: list[Tensor] | None = [] if return_activations else None
        seq = self.embed(x, t, labels)
        seq = self.run_blocks(seq, acts=acts)
        eps = self.head(seq)
        if return_activations:
            return eps, acts
        return eps

    def predict(self, x: np.ndarray, t, labels=None) -> np.ndarray:
        """Inference helper: plain array out, no activations kept."""
        return self.forward(x, t, labels, return_activations=False).data
