"""Binary checkpoint format.

Layout::

    b"SVCM"                   magic
    uint32 LE                 format version
    uint64 LE                 header length in bytes
    UTF-8 JSON header         configs, counters, RNG state, array table
    raw little-endian arrays  in header order

Arrays are named ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``,
``avg/<name>`` and ``loss_log``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError
from .speakerspace import EMBEDDING_PREFIX, EmbeddingTable
from .synthnet import ModelConfig, ModelParams
from .trainer import AdamState, Checkpoint, TrainConfig

MAGIC = b"SVCM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _array_entry(name: str, arr: np.ndarray) -> tuple[dict, bytes]:
    dtype = np.dtype(arr.dtype).newbyteorder("<")
    data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    return {"name": name, "shape": list(arr.shape), "dtype": dtype.str}, data


def to_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    entries, blobs = [], []

    def put(name, arr):
        e, b = _array_entry(name, np.asarray(arr))
        entries.append(e)
        blobs.append(b)

    for name in p.weight_names():
        put(f"param/{name}", p.weights[name])
    put("param/embeddings", p.embeddings.rows)
    opt = ckpt.optimizer
    if opt is not None:
        for name in sorted(opt.m):
            put(f"adam_m/{name}", opt.m[name])
            put(f"adam_v/{name}", opt.v[name])
    if ckpt.averaged:
        for name in sorted(ckpt.averaged):
            put(f"avg/{name}", ckpt.averaged[name])
    put("loss_log", np.asarray(ckpt.loss_log, dtype=np.float64))

    header = {
        "model_config": p.config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "iteration": int(ckpt.iteration),
        "rng_state": ckpt.rng_state,
        "optimizer_step": opt.step if opt is not None else None,
        "has_average": bool(ckpt.averaged),
        "metadata": ckpt.metadata,
        "arrays": entries,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CorruptionError("checkpoint is shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CorruptionError("checkpoint header is truncated")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"checkpoint header is unreadable: {exc}") from exc

    entries = header["arrays"]
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(e["dtype"]).itemsize for e in entries]
    payload = len(data) - start - hlen
    if payload != sum(sizes):
        raise CorruptionError(f"payload holds {payload} bytes but the header lists {sum(sizes)}")

    arrays = {}
    off = start + hlen
    for e, size in zip(entries, sizes):
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=off).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        off += size

    config = ModelConfig.from_dict(header["model_config"])
    weights = {k[len("param/"):]: v for k, v in arrays.items()
               if k.startswith("param/") and k != "param/embeddings"}
    params = ModelParams(config, weights, EmbeddingTable(arrays["param/embeddings"]))
    opt = None
    if header["optimizer_step"] is not None:
        opt = AdamState(header["optimizer_step"],
                        {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                        {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")})
    averaged = {k[len("avg/"):]: v for k, v in arrays.items() if k.startswith("avg/")} or None
    tc = header["train_config"]
    return Checkpoint(
        params=params,
        train_config=TrainConfig.from_dict(tc) if tc else None,
        iteration=header["iteration"],
        rng_state=header["rng_state"],
        optimizer=opt,
        averaged=averaged,
        loss_log=arrays["loss_log"],
        metadata=header["metadata"],
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())


def theta_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Network weights (excluding speaker embeddings) used for evaluation."""
    return dict(ckpt.eval_params().weights)


def embedding_rows(ckpt: Checkpoint) -> np.ndarray:
    return ckpt.eval_params().embeddings.rows


__all__ = ["save_checkpoint", "load_checkpoint", "to_bytes", "from_bytes", "MAGIC", "VERSION",
           "EMBEDDING_PREFIX"]
