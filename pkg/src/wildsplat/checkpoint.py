"""Versioned checkpoint container.

Layout::

    WSCKPT <format_version> <header length in bytes>\\n
    <sorted-key JSON header>\\n
    <little-endian blob>

The header lists every named array with its dtype, shape and byte offset into
the blob, plus the step counter, the config echo, optimiser step counts and
the RNG state.  Parameters are stored at the training dtype (32-bit floats by
default); integer bookkeeping arrays keep their integer type.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .densify import DensifyStats
from .trainer import AdamState, TrainConfig, TrainState, init_state

MAGIC = "WSCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _named_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for name, (t, _) in state.groups().items():
        out[f"param/{name}"] = t.data
        out[f"adam_m/{name}"] = state.adam[name].m
        out[f"adam_v/{name}"] = state.adam[name].v
    out["static_ids"] = state.static_ids
    for k in ("grad_norm", "coverage", "count", "view_grad", "view_cover"):
        out[f"stats/{k}"] = getattr(state.stats, k)
    return out


def dumps(state: TrainState) -> bytes:
    arrays = _named_arrays(state)
    entries, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": state.step,
        "next_id": state.next_id,
        "skipped_updates": state.skipped_updates,
        "n_static": len(state.static),
        "n_seeds": len(state.seeds),
        "n_views": len(state.embeddings),
        "adam_t": {k: s.t for k, s in sorted(state.adam.items())},
        "rng": state.rng.bit_generator.state,
        "config": json.loads(state.config.to_json()),
        "arrays": entries,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return f"{MAGIC} {FORMAT_VERSION} {len(text)}\n".encode() + text + b"\n" + b"".join(chunks)


def loads(blob: bytes, data) -> TrainState:
    """Rebuild a training state; ``data`` supplies the view count for shaping."""
    first, _, rest = blob.partition(b"\n")
    parts = first.decode(errors="replace").split()
    if len(parts) != 3 or parts[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(parts[1]) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {parts[1]}")
    n = int(parts[2])
    try:
        header = json.loads(rest[:n])
    except ValueError as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    body = rest[n + 1:]
    need = max((e["offset"] + e["nbytes"] for e in header["arrays"].values()), default=0)
    if len(body) != need:
        raise CheckpointError(f"checkpoint body is {len(body)} bytes, header describes {need}")
    config = TrainConfig.from_dict(header["config"])

    def arr(name):
        e = header["arrays"][name]
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        return np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()

    if header["n_views"] != data.n_views:
        raise CheckpointError(f"checkpoint has {header['n_views']} views, dataset {data.n_views}")
    state = init_state(config, data)
    from .splat import StaticGaussians
    state.static = StaticGaussians.from_arrays(
        **{k: arr(f"param/static.{k}") for k in StaticGaussians.FIELDS})
    for name, (t, _) in state.groups().items():
        if name.startswith("static."):
            continue
        src = arr(f"param/{name}")
        if src.shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {t.data.shape}")
        t.data[...] = src
    state.adam = {name: AdamState(arr(f"adam_m/{name}"), arr(f"adam_v/{name}"), header["adam_t"][name])
                  for name in state.groups()}
    state.static_ids = arr("static_ids")
    state.stats = DensifyStats(*(arr(f"stats/{k}") for k in
                                 ("grad_norm", "coverage", "count", "view_grad", "view_cover")))
    state.step = header["step"]
    state.next_id = header["next_id"]
    state.skipped_updates = header["skipped_updates"]
    state.rng.bit_generator.state = header["rng"]
    return state


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(state))
    return path


def load_checkpoint(path, data) -> TrainState:
    return loads(Path(path).read_bytes(), data)


def read_header(path) -> dict:
    blob = Path(path).read_bytes()
    first, _, rest = blob.partition(b"\n")
    n = int(first.split()[2])
    return json.loads(rest[:n])
