"""Turn title/abstract JSON-lines into a PUE1 embedding corpus.

Each input line is {"id": ..., "title": ..., "abstract": ..., "truth": ...}
with truth one of "positive", "negative" or null/absent. The document text
is the title and abstract joined by one space; embeddings are mean-pooled
token states by default (CLS pooling selectable). Inference runs in the
encoder's native precision in eval mode and is cast to float32 for storage,
so identical inputs produce bitwise-identical vectors.

A word-token companion file (lowercased alphanumeric tokens) is emitted for
lexical baselines in the consuming toolkit.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .pue import TRUTH_FLAGS, write_pue1, write_tokens_jsonl

DEFAULT_ENCODER = "allenai/scibert_scivocab_uncased"
_WORD_RE = re.compile(r"\w+")


class ExtractError(ValueError):
    """Malformed input record or invalid extraction request."""


class EncoderError(RuntimeError):
    """The encoder could not be loaded or produced unusable output."""


@dataclass(frozen=True)
class RawDoc:
    id: str
    title: str
    abstract: str
    truth: str | None = None

    @property
    def text(self) -> str:
        return f"{self.title} {self.abstract}".strip()


def _parse_record(lineno: int, raw: str) -> RawDoc:
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ExtractError(f"line {lineno}: not valid JSON") from exc
    if not isinstance(payload, dict):
        raise ExtractError(f"line {lineno}: expected a JSON object")
    doc_id = payload.get("id")
    if not isinstance(doc_id, str) or not doc_id:
        raise ExtractError(f"line {lineno}: missing or empty id")
    title = payload.get("title") or ""
    abstract = payload.get("abstract") or ""
    if not isinstance(title, str) or not isinstance(abstract, str):
        raise ExtractError(f"line {lineno}: title/abstract must be strings")
    doc = RawDoc(doc_id, title, abstract, payload.get("truth"))
    if not doc.text:
        raise ExtractError(f"line {lineno}: empty text after stripping")
    if doc.truth not in TRUTH_FLAGS:
        raise ExtractError(
            f"line {lineno}: truth must be 'positive', 'negative' or null"
        )
    return doc


def read_raw_docs(path: str | Path, lenient: bool = False) -> list[RawDoc]:
    """Parse the input JSON-lines; bad records raise, or warn+skip with lenient."""
    docs: list[RawDoc] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = _parse_record(lineno, line)
                if doc.id in seen:
                    raise ExtractError(f"line {lineno}: duplicate id {doc.id!r}")
            except ExtractError as exc:
                if lenient:
                    warnings.warn(f"skipping record: {exc}", stacklevel=2)
                    continue
                raise
            seen.add(doc.id)
            docs.append(doc)
    return docs


def word_tokens(text: str) -> list[str]:
    return [t.lower() for t in _WORD_RE.findall(text)]


class Encoder:
    """A pretrained text encoder with mean or CLS pooling."""

    def __init__(
        self,
        name_or_path: str = DEFAULT_ENCODER,
        pooling: str = "mean",
        max_length: int = 512,
    ):
        if pooling not in ("mean", "cls"):
            raise ExtractError(f"pooling must be 'mean' or 'cls'; got {pooling!r}")
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - environment guard
            raise EncoderError("torch and transformers are required") from exc
        self._torch = torch
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(name_or_path)
            self.model = AutoModel.from_pretrained(name_or_path)
        except Exception as exc:
            raise EncoderError(f"cannot load encoder {name_or_path!r}: {exc}") from exc
        self.model.eval()
        self.name = str(name_or_path)
        self.pooling = pooling
        self.max_length = max_length

    @property
    def hidden_size(self) -> int:
        return int(self.model.config.hidden_size)

    def embed(self, texts: Sequence[str], batch_size: int = 32) -> np.ndarray:
        """(n, hidden_size) float32 embeddings; deterministic in eval mode."""
        torch = self._torch
        out = np.empty((len(texts), self.hidden_size), dtype=np.float32)
        row = 0
        with torch.no_grad():
            for start in range(0, len(texts), batch_size):
                chunk = list(texts[start : start + batch_size])
                enc = self.tokenizer(
                    chunk,
                    return_tensors="pt",
                    padding=True,
                    truncation=True,
                    max_length=self.max_length,
                )
                hidden = self.model(**enc).last_hidden_state
                if self.pooling == "cls":
                    pooled = hidden[:, 0, :]
                else:
                    mask = enc["attention_mask"].unsqueeze(-1).to(hidden.dtype)
                    pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1)
                arr = pooled.cpu().numpy().astype(np.float32)
                out[row : row + arr.shape[0]] = arr
                row += arr.shape[0]
        return out


def extract(
    input_path: str | Path,
    output_path: str | Path,
    encoder: Encoder | None = None,
    encoder_name: str = DEFAULT_ENCODER,
    pooling: str = "mean",
    batch_size: int = 32,
    tokens_path: str | Path | None = None,
    lenient: bool = False,
) -> dict:
    """Read raw docs, embed them, and write the PUE1 (+ tokens) files."""
    docs = read_raw_docs(input_path, lenient=lenient)
    if encoder is None:
        encoder = Encoder(encoder_name, pooling=pooling)
    vectors = (
        encoder.embed([d.text for d in docs], batch_size=batch_size)
        if docs
        else np.empty((0, encoder.hidden_size), dtype=np.float32)
    )
    count = write_pue1(
        output_path,
        encoder.hidden_size,
        (
            (doc.id, TRUTH_FLAGS[doc.truth], vectors[i])
            for i, doc in enumerate(docs)
        ),
    )
    if tokens_path is not None:
        write_tokens_jsonl(tokens_path, {d.id: word_tokens(d.text) for d in docs})
    return {
        "documents": count,
        "dimension": encoder.hidden_size,
        "encoder": encoder.name,
        "pooling": encoder.pooling,
        "output": str(output_path),
        "tokens": str(tokens_path) if tokens_path else None,
    }
