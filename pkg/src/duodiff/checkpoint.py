"""Binary checkpoint format.

Layout: magic b"DUOD" | version u32 LE | header_len u64 LE | UTF-8 JSON
header | raw little-endian float32 payload | CRC32 of payload (u32 LE).

The header maps tensor name -> {dtype: "f32", shape, byte_offset}; the
reserved "__meta__" entry carries run metadata (config hash, seed, step)
so every checkpoint is self-describing. Round trips are bitwise lossless;
a wrong CRC or an unknown version refuses to load.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

__all__ = ["CheckpointError", "FORMAT_VERSION", "save_checkpoint",
           "load_checkpoint", "save_model", "load_model"]

MAGIC = b"DUOD"
FORMAT_VERSION = 1
META_KEY = "__meta__"


class CheckpointError(Exception):
    """Corrupt, truncated, or unsupported checkpoint file."""


def save_checkpoint(path, tensors: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write named float32 tensors plus a JSON metadata block."""
    header: dict[str, object] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        if name == META_KEY:
            raise CheckpointError(f"tensor name {META_KEY!r} is reserved")
        # note: ascontiguousarray would promote 0-d scalars to 1-d
        arr = np.asarray(tensors[name], dtype=np.float32, order="C")
        raw = arr.astype("<f4", copy=False).tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape),
                        "byte_offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header[META_KEY] = meta or {}
    payload = b"".join(chunks)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read tensors and metadata; verifies magic, version, and payload CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end + 4:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    payload = blob[header_end:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload CRC mismatch")
    meta = header.pop(META_KEY, {})
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{path}: unsupported dtype for {name!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["byte_offset"]
        raw = payload[off:off + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(
            np.float32, copy=True).reshape(shape)
    return tensors, meta


_EXTRA_PREFIX = "extra."


def save_model(path, model, meta: dict | None = None,
               extra: dict[str, np.ndarray] | None = None) -> None:
    """Persist a UVitModel or AdaDiffModel plus optional extra tensors
    (e.g. optimizer moments, saved under a reserved prefix)."""
    from .adadiff import AdaDiffModel
    from .uvit import UVitModel

    meta = dict(meta or {})
    if isinstance(model, UVitModel):
        meta["kind"] = "uvit"
        meta["denoiser_config"] = asdict(model.config)
        tensors = {k: v.data for k, v in model.params.items()}
    elif isinstance(model, AdaDiffModel):
        meta["kind"] = "adadiff"
        meta["denoiser_config"] = asdict(model.backbone.config)
        meta["lambda_u"] = model.lambda_u
        meta["beta_ual"] = model.beta_ual
        tensors = {k: v.data for k, v in model.parameters().items()}
    else:
        raise CheckpointError(f"cannot save object of type {type(model).__name__}")
    for k, v in (extra or {}).items():
        tensors[_EXTRA_PREFIX + k] = v
    save_checkpoint(path, tensors, meta)


def load_model(path):
    """Rebuild the persisted model. Returns (model, meta, extra_tensors)."""
    from .adadiff import AdaDiffModel, OutputHead, UncertaintyModule
    from .tensor import parameter
    from .uvit import DenoiserConfig, UVitModel

    tensors, meta = load_checkpoint(path)
    extra = {k[len(_EXTRA_PREFIX):]: v for k, v in tensors.items()
             if k.startswith(_EXTRA_PREFIX)}
    tensors = {k: v for k, v in tensors.items()
               if not k.startswith(_EXTRA_PREFIX)}
    if "denoiser_config" not in meta or "kind" not in meta:
        raise CheckpointError(f"{path}: not a model checkpoint")
    cfg = DenoiserConfig(**meta["denoiser_config"])
    kind = meta["kind"]
    if kind == "uvit":
        model = UVitModel(cfg, seed=0)
        try:
            model.load_arrays(tensors)
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        return model, meta, extra
    if kind == "adadiff":
        backbone_arrays = {k[len("backbone."):]: v for k, v in tensors.items()
                           if k.startswith("backbone.")}
        backbone = UVitModel(cfg, seed=0)
        try:
            backbone.load_arrays(backbone_arrays)
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        heads, uems = [], []
        for i in range(cfg.num_layers):
            hp = {k[len(f"head{i}."):]: parameter(v) for k, v in tensors.items()
                  if k.startswith(f"head{i}.")}
            up = {k[len(f"uem{i}."):]: parameter(v) for k, v in tensors.items()
                  if k.startswith(f"uem{i}.")}
            if set(hp) != {"norm.g", "norm.b", "w", "b"} or set(up) != {"w", "b"}:
                raise CheckpointError(f"{path}: missing head/uem tensors for "
                                      f"layer {i}")
            heads.append(OutputHead(cfg, i, params=hp))
            uems.append(UncertaintyModule(cfg, i, params=up))
        model = AdaDiffModel(backbone, lambda_u=meta.get("lambda_u", 1.0),
                             beta_ual=meta.get("beta_ual", 1.0),
                             heads=heads, uems=uems)
        return model, meta, extra
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")
