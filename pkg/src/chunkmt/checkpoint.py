"""Binary checkpoint container.

Layout: 8-byte magic, little-endian uint32 format version, little-endian
uint64 header length, a UTF-8 JSON header (both character vocabularies,
the model configuration, and a table of parameter name / shape / byte
offset), then the concatenated parameter data as row-major little-endian
float32.  The header JSON is serialized with sorted keys and parameters
are written in sorted-name order, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ModelConfig, ModelParams
from .vocab import CharVocab

MAGIC = b"CHUNKMT\x00"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


def save_checkpoint(path, params: ModelParams) -> None:
    arrays = {name: np.ascontiguousarray(v, dtype="<f4") for name, v in params.arrays().items()}
    table = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "src_vocab": params.src_vocab.chars(),
        "trg_vocab": params.trg_vocab.chars(),
        "config": {
            "hidden_dim": params.config.hidden_dim,
            "char_embed_dim": params.config.char_embed_dim,
            "max_chunk_chars": params.config.max_chunk_chars,
        },
        "params": table,
    }
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(arrays):
            fh.write(arrays[name].tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        data = fh.read()

    try:
        config = ModelConfig(**header["config"])
        src_vocab = CharVocab(header["src_vocab"])
        trg_vocab = CharVocab(header["trg_vocab"])
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            end = start + 4 * count
            if end > len(data):
                raise CheckpointError(f"{path}: parameter {entry['name']!r} overruns file")
            arrays[entry["name"]] = np.frombuffer(
                data[start:end], dtype="<f4"
            ).reshape(shape).copy()
        return ModelParams.from_arrays(config, src_vocab, trg_vocab, arrays)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
