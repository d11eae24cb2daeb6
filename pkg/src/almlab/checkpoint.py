"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes  b"ALMCKPT\\x00"
    version      u32
    config_len   u64, then config_len bytes of canonical JSON (sorted keys)
    n_records    u32
    per record:  name_len u16, name (utf-8), dtype tag u8, ndim u8,
                 ndim x u64 shape, payload (little-endian, row-major)

The config JSON carries the bundle config, LoRA/freeze settings, the step
counter and any run metadata. Tensor names are unique; model parameters are
stored under ``model/``, optimizer moments under ``optim/`` and the torch RNG
state under ``rng/torch``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adaptation import FreezeConfig, LoraConfig, attach_lora, set_trainable
from .errors import CheckpointError
from .model import BundleConfig, ModelBundle

MAGIC = b"ALMCKPT\x00"
FORMAT_VERSION = 1

DTYPE_TAGS = {
    torch.float32: (1, "<f4"),
    torch.float64: (2, "<f8"),
    torch.int64: (3, "<i8"),
    torch.uint8: (4, "u1"),
    torch.bool: (5, "?"),
    torch.int32: (6, "<i4"),
}
TAG_DTYPES = {tag: (dt, np_dt) for dt, (tag, np_dt) in DTYPE_TAGS.items()}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def write_records(path, config: dict, tensors: dict[str, torch.Tensor]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = canonical_json(config)
    buf.write(struct.pack("<Q", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        tag, np_dt = DTYPE_TAGS[t.dtype]
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", tag, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(t.numpy().astype(np_dt, copy=False).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_records(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse everything before returning, so a bad file never half-loads."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"{path}: no such checkpoint") from e
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (cfg_len,) = struct.unpack("<Q", take(8))
    try:
        config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt config block") from e
    (n,) = struct.unpack("<I", take(4))
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        torch_dt, np_dt = TAG_DTYPES[tag]
        count = int(np.prod(shape)) if ndim else 1
        itemsize = np.dtype(np_dt).itemsize
        arr = np.frombuffer(bytes(take(count * itemsize)), dtype=np_dt).reshape(shape)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name}")
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return config, tensors


@dataclass
class Checkpoint:
    bundle: ModelBundle
    step: int = 0
    config: dict = field(default_factory=dict)
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    rng_state: torch.Tensor | None = None


def save_checkpoint(
    bundle: ModelBundle,
    path,
    step: int = 0,
    optimizer=None,
    rng_state: torch.Tensor | None = None,
    meta: dict | None = None,
) -> None:
    config = {
        "bundle": bundle.cfg.to_dict(),
        "lora": bundle.lora_config.to_dict() if bundle.lora_config else None,
        "freeze": bundle.freeze_config.to_dict() if bundle.freeze_config else None,
        "step": int(step),
        "meta": meta or {},
    }
    tensors = {f"model/{k}": v for k, v in bundle.state_dict().items()}
    if optimizer is not None:
        state = optimizer.state_dict()
        config["optimizer"] = {"param_groups": state["param_groups"]}
        for idx, st in state["state"].items():
            for key, val in st.items():
                tensors[f"optim/{idx}/{key}"] = torch.as_tensor(val)
    if rng_state is not None:
        tensors["rng/torch"] = rng_state
    write_records(path, config, tensors)


def load_checkpoint(path) -> Checkpoint:
    config, tensors = read_records(path)
    try:
        cfg = BundleConfig.from_dict(config["bundle"])
        bundle = ModelBundle(cfg)
        if config.get("lora"):
            attach_lora(bundle, LoraConfig(**config["lora"]))
        model_state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
        bundle.load_state_dict(model_state, strict=True)
        if config.get("freeze"):
            set_trainable(bundle, FreezeConfig(**config["freeze"]))
    except (KeyError, TypeError, RuntimeError) as e:
        raise CheckpointError(f"{path}: checkpoint does not match its config: {e}") from e
    optim = {k: v for k, v in tensors.items() if k.startswith("optim/")}
    return Checkpoint(bundle, int(config.get("step", 0)), config, optim, tensors.get("rng/torch"))


def restore_optimizer(optimizer, ckpt: Checkpoint) -> None:
    """Load ``optim/`` records back into a freshly built optimizer."""
    meta = ckpt.config.get("optimizer")
    if not meta:
        return
    state: dict[int, dict] = {}
    for name, val in ckpt.optimizer_state.items():
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = val
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def inspect(path) -> dict:
    config, tensors = read_records(path)
    return {
        "format_version": FORMAT_VERSION,
        "config": config,
        "tensors": {k: {"dtype": str(v.dtype).replace("torch.", ""), "shape": list(v.shape)} for k, v in tensors.items()},
        "n_parameters": sum(v.numel() for k, v in tensors.items() if k.startswith("model/")),
    }
