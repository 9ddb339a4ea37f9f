"""Binary checkpoint container.

Layout (little-endian)::

    "PGCK" | uint32 version | uint32 meta_length | meta (UTF-8 JSON)
    then every array listed in meta["arrays"], float64 row-major, in order

The metadata carries the stack structure, epoch, learning rate, RNG state
and the momentum buffer, so a restored state resumes bit-identically.
"""

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from propgcn.errors import CheckpointError, ConfigError, PropGcnError
from propgcn.gcn import GcnLayerParams, GcnStack
from propgcn.heads import HeadParams
from propgcn.model import ProposalModel
from propgcn.trainer import EpochMetrics, TrainState

log = logging.getLogger(__name__)

MAGIC = b"PGCK"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def _stack_meta(stack: GcnStack) -> dict:
    return {
        "num_layers": len(stack.layers),
        "mode": stack.mode,
        "dropout_rate": stack.dropout_rate,
        "concat_input": stack.concat_input,
        "self_add": stack.self_add,
    }


def save_checkpoint(state: TrainState, path, extra: Optional[dict] = None) -> Path:
    """Write ``state`` to ``path``; ``extra`` lands in the metadata untouched."""
    path = Path(path)
    model = state.model
    arrays: Dict[str, np.ndarray] = dict(model.parameters())
    for name, value in sorted(state.velocity.items()):
        arrays[f"velocity/{name}"] = value

    meta = {
        "epoch": state.epoch,
        "learning_rate": state.learning_rate,
        "rng_state": state.rng.bit_generator.state,
        "stack1": _stack_meta(model.stack1),
        "stack2": _stack_meta(model.stack2),
        "model_meta": model.meta,
        "history": [asdict(m) for m in state.history],
        "extra": extra or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        for value in arrays.values():
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    log.debug(f"checkpoint written to {path} (epoch {state.epoch})")
    return path


def read_checkpoint(path):
    """Parse a checkpoint into (metadata, arrays) without building a model."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(path, f"cannot read checkpoint: {e.strerror or e}") from None

    if len(data) < _HEADER.size:
        raise CheckpointError(path, "truncated header")
    magic, version, meta_length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(path, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(path, f"unsupported version {version}, expected {VERSION}")

    offset = _HEADER.size
    if len(data) < offset + meta_length:
        raise CheckpointError(path, "truncated metadata")
    try:
        meta = json.loads(data[offset : offset + meta_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(path, f"corrupt metadata: {e}") from None
    offset += meta_length
    if not isinstance(meta, dict):
        raise CheckpointError(path, "metadata is not a JSON object")

    table = meta.get("arrays", [])
    if not isinstance(table, list):
        raise CheckpointError(path, "metadata array table is not a list")

    arrays: Dict[str, np.ndarray] = {}
    for index, entry in enumerate(table):
        try:
            name = str(entry["name"])
            shape = tuple(int(n) for n in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(path, f"array table entry {index} is malformed: {e!r}") from None
        if any(n < 0 for n in shape):
            raise CheckpointError(path, f"array {name} has negative shape {shape}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(data) < offset + nbytes:
            raise CheckpointError(path, f"truncated payload at array {name}")
        arrays[name] = (
            np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(path, f"{len(data) - offset} trailing bytes after payload")
    return meta, arrays


def _build_stack(meta: dict, arrays: Dict[str, np.ndarray], prefix: str) -> GcnStack:
    layers = [
        GcnLayerParams(arrays[f"{prefix}.layer{k}"]) for k in range(meta["num_layers"])
    ]
    return GcnStack(
        layers=layers,
        dropout_rate=meta["dropout_rate"],
        concat_input=meta["concat_input"],
        mode=meta["mode"],
        self_add=meta["self_add"],
    )


def restore_checkpoint(path) -> TrainState:
    meta, arrays = read_checkpoint(path)
    try:
        stack1 = _build_stack(meta["stack1"], arrays, "stack1")
        stack2 = _build_stack(meta["stack2"], arrays, "stack2")
        heads = HeadParams(
            **{
                name.split(".", 1)[1]: value
                for name, value in arrays.items()
                if name.startswith("heads.")
            }
        )
        model = ProposalModel(stack1, stack2, heads, meta=meta.get("model_meta", {}))

        rng_state = meta["rng_state"]
        rng = np.random.Generator(getattr(np.random, rng_state["bit_generator"])())
        rng.bit_generator.state = rng_state
        epoch = int(meta["epoch"])
        learning_rate = float(meta["learning_rate"])
        history = [EpochMetrics(**m) for m in meta.get("history", [])]
    except KeyError as e:
        raise CheckpointError(path, f"missing entry {e}") from None
    except (ConfigError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(path, f"inconsistent model structure: {e}") from None
    except PropGcnError as e:
        raise CheckpointError(path, str(e)) from None

    velocity = {
        name.split("/", 1)[1]: value
        for name, value in arrays.items()
        if name.startswith("velocity/")
    }
    return TrainState(
        epoch=epoch,
        learning_rate=learning_rate,
        model=model,
        rng=rng,
        velocity=velocity,
        history=history,
    )


def checkpoint_extra(path) -> dict:
    return read_checkpoint(path)[0].get("extra", {})
