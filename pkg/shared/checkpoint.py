"""
Binary checkpoint codec for a ParamStore.

Layout (little-endian):
  magic b"G2TCKPT\\0" | uint32 version | uint32 entry count
  entry: uint32 name length | name (utf-8) | uint32 rank | rank x uint64 dims | float64 payload
Optimizer moments live under reserved name prefixes, run metadata under ``__meta__/``.
"""
import os
import struct
from typing import Dict, List, Optional, Tuple

import bittensor as bt
import numpy as np
import torch

from shared.errors import CheckpointError
from shared.tensor_core import ParamStore

MAGIC = b"G2TCKPT\0"
VERSION = 1

ADAM_M = "__adam_m__/"
ADAM_V = "__adam_v__/"
ADAM_STEP = "__adam_step__/"
META = "__meta__/"
RESERVED = (ADAM_M, ADAM_V, ADAM_STEP, META)


def _encode_entry(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    payload = np.ascontiguousarray(array, dtype="<f8")
    parts = [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", payload.ndim)]
    parts.extend(struct.pack("<Q", d) for d in payload.shape)
    parts.append(payload.tobytes())
    return b"".join(parts)


def encode_entries(entries: List[Tuple[str, np.ndarray]]) -> bytes:
    header = MAGIC + struct.pack("<II", VERSION, len(entries))
    return header + b"".join(_encode_entry(n, a) for n, a in entries)


def decode_entries(blob: bytes) -> "Dict[str, np.ndarray]":
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    offset = len(MAGIC) + 8
    entries: Dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(f"checkpoint truncated at byte {offset} (entry {len(entries)} of {count})")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        entries[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).copy()
    if offset != len(blob):
        raise CheckpointError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return entries


def save_checkpoint(store: ParamStore, path: str, meta: Optional[Dict[str, float]] = None):
    entries: List[Tuple[str, np.ndarray]] = []
    for name, param in store.items():
        entries.append((name, param.detach().cpu().numpy()))
    for name, _ in store.items():
        state = store.adam_state(name)
        if state is None:
            continue
        step, exp_avg, exp_avg_sq = state
        entries.append((ADAM_STEP + name, np.array(step)))
        entries.append((ADAM_M + name, exp_avg.detach().cpu().numpy()))
        entries.append((ADAM_V + name, exp_avg_sq.detach().cpu().numpy()))
    for key, value in sorted((meta or {}).items()):
        entries.append((META + key, np.array(float(value))))

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_entries(entries))
    bt.logging.info(f"checkpoint | saved {len(store)} parameters to {path}")


def load_checkpoint(store: ParamStore, path: str, strict: bool = True) -> Dict[str, float]:
    """Loads parameters (and optimizer moments when present) in place; returns run metadata."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    entries = decode_entries(blob)

    plain = {n: a for n, a in entries.items() if not n.startswith(RESERVED)}
    if strict:
        missing = [n for n in store if n not in plain]
        unexpected = [n for n in plain if n not in store]
        if missing:
            raise CheckpointError(f"checkpoint {path} is missing parameter '{missing[0]}'")
        if unexpected:
            raise CheckpointError(f"checkpoint {path} has unknown parameter '{unexpected[0]}'")

    store.reset_optimizer()
    with torch.no_grad():
        for name, array in plain.items():
            if name not in store:
                continue
            param = store[name]
            if tuple(param.shape) != array.shape:
                raise CheckpointError(
                    f"parameter '{name}' has shape {tuple(param.shape)} but checkpoint holds {array.shape}")
            param.copy_(torch.from_numpy(array))

    for name in store:
        if ADAM_STEP + name in entries:
            store.set_adam_state(
                name,
                float(entries[ADAM_STEP + name]),
                torch.from_numpy(entries[ADAM_M + name]),
                torch.from_numpy(entries[ADAM_V + name]),
            )

    meta = {n[len(META):]: float(a) for n, a in entries.items() if n.startswith(META)}
    bt.logging.info(f"checkpoint | loaded {len(plain)} parameters from {path}")
    return meta
