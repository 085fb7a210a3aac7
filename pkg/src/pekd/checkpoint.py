"""Binary checkpoint container.

Layout (little-endian)::

    b"PEKD" | u32 version | u32 block count |
    blocks: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f64 payload

Model configuration travels as rank-0 blocks under ``config/``; a PEFT
attachment stores its variant code and settings under ``peftcfg/`` and its
tensors under ``peft/``. A checkpoint may also carry the weights the model
was fine-tuned from under ``base/``, so students can be built on the same
starting point as their teacher.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import fields

import numpy as np

from . import peft as peftlib
from .encoder import DualEncoderModel, EncoderConfig

MAGIC = b"PEKD"
VERSION = 1
_PEFT_CONFIGS = {
    "adapter": peftlib.AdapterConfig,
    "prompt": peftlib.PromptConfig,
    "lora": peftlib.LoraConfig,
}


class CheckpointError(ValueError):
    pass


def dumps(blocks: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blocks)))
    for name, value in blocks.items():
        arr = np.asarray(value, dtype="<f8")  # ascontiguousarray would promote rank 0 to rank 1
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a PEKD checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        blocks[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last block")
    return blocks


def _scalar(v) -> np.ndarray:
    return np.array(float("nan") if v is None else float(v))


def model_blocks(model: DualEncoderModel, base_state: dict | None = None) -> dict[str, np.ndarray]:
    blocks = {f"config/{k}": _scalar(v) for k, v in model.config.to_dict().items()}
    blocks["meta/seed"] = _scalar(model.seed)
    att = model.attachment
    if att is not None:
        blocks["peftcfg/variant"] = _scalar(peftlib.VARIANTS.index(att.variant))
        for f in fields(att.config):
            blocks[f"peftcfg/{f.name}"] = _scalar(getattr(att.config, f.name))
    for name, t in model.named_parameters():
        blocks[name] = t.data
    for name, value in (base_state or {}).items():
        blocks[f"base/{name}"] = value
    return blocks


def base_state(blocks: dict[str, np.ndarray]) -> dict[str, np.ndarray] | None:
    """The ``base/`` weights stored alongside a model, or None."""
    state = {k[len("base/"):]: v for k, v in blocks.items() if k.startswith("base/")}
    return state or None


def _config_from(blocks, prefix, cls):
    out = {}
    for f in fields(cls):
        key = f"{prefix}/{f.name}"
        if key not in blocks:
            raise CheckpointError(f"missing {key}")
        v = float(blocks[key])
        if math.isnan(v):
            out[f.name] = None
        elif f.type in ("int", "int | None") or f.name in ("L", "d_v", "d_t", "d", "heads", "m", "n", "vocab", "C",
                                                           "mlp_ratio", "max_positions", "rank", "length", "bottleneck"):
            out[f.name] = int(v)
        else:
            out[f.name] = v
    return cls(**out)


def model_from_blocks(blocks: dict[str, np.ndarray]) -> DualEncoderModel:
    """Rebuild a model (and its attachment, if stored); every shape is checked against the config."""
    try:
        config = _config_from(blocks, "config", EncoderConfig)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config: {exc}") from exc
    seed = int(blocks.get("meta/seed", np.array(0.0)))
    model = DualEncoderModel(config, seed=seed)
    if "peftcfg/variant" in blocks:
        variant = peftlib.VARIANTS[int(blocks["peftcfg/variant"])]
        pcfg = _config_from(blocks, "peftcfg", _PEFT_CONFIGS[variant])
        peftlib.attach(model, variant, pcfg)
    state = {k: v for k, v in blocks.items() if not k.startswith(("config/", "meta/", "peftcfg/", "base/"))}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return model


def save_model(model: DualEncoderModel, path, base_state: dict | None = None) -> str:
    data = dumps(model_blocks(model, base_state))
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def read_blocks(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def load_model(path) -> DualEncoderModel:
    return model_from_blocks(read_blocks(path))
