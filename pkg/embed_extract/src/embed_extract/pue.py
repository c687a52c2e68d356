"""Writers for the PUE1 corpus format and its tokens companion file.

This is an independent implementation of the consuming toolkit's documented
on-disk interface (see the main package README): little-endian, magic
"PUE1", u32 version 1, u32 dimension, u64 count, then per record a u16 id
length, the UTF-8 id, a u8 truth flag (0 unknown / 1 positive / 2 negative)
and `dimension` float32 values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TRUTH_FLAGS = {None: 0, "positive": 1, "negative": 2}


def write_pue1(
    path: str | Path,
    dim: int,
    records: Iterable[tuple[str, int, np.ndarray]],
) -> int:
    """Write (id, truth flag, float32 vector) records; returns the count."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(b"PUE1")
        fh.write(struct.pack("<IIQ", 1, dim, len(records)))
        for doc_id, flag, vector in records:
            vector = np.asarray(vector, dtype="<f4")
            if vector.shape != (dim,):
                raise ValueError(f"{doc_id}: vector shape {vector.shape} != ({dim},)")
            if not np.all(np.isfinite(vector)):
                raise ValueError(f"{doc_id}: non-finite embedding value")
            raw = doc_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", flag))
            fh.write(vector.tobytes())
    return len(records)


def write_tokens_jsonl(path: str | Path, tokens: Mapping[str, Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id in sorted(tokens):
            fh.write(json.dumps({"id": doc_id, "tokens": list(tokens[doc_id])}, sort_keys=True))
            fh.write("\n")
