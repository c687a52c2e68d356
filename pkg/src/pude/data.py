"""Corpus representation, the PUE1 binary corpus format, and PU task assembly.

A corpus is an ordered collection of documents, each a dense float32
embedding vector with a unique string id and an optional hidden ground-truth
class. Truth labels travel with the corpus but are meant to be read only by
task assembly (which designs the experiment) and by evaluation-stage metric
code; training code consumes vectors and labeled/unlabeled membership only.

The on-disk format (PUE1) is binary little-endian and stores vectors as
float32, so a save followed by a load reproduces the in-memory corpus
bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

TRUTH_UNKNOWN = 0
TRUTH_POSITIVE = 1
TRUTH_NEGATIVE = 2

_PUE1_MAGIC = b"PUE1"
_PUE1_VERSION = 1


class CorpusError(ValueError):
    """A corpus or corpus file violates its contract."""


class CorpusLoadError(CorpusError):
    """A PUE1 file is malformed; the message names the offending record."""


class TaskError(ValueError):
    """A PU task request is invalid (bad label frequency, too few positives, ...)."""


@dataclass(frozen=True)
class EmbeddedDoc:
    """One document: id, embedding vector, optional hidden truth and tokens."""

    id: str
    vector: np.ndarray
    truth: int = TRUTH_UNKNOWN
    tokens: tuple[str, ...] | None = None


class Corpus:
    """Ordered, immutable collection of embedded documents.

    Vectors are stored columnar as one float32 matrix of shape (n, d).
    ``truth`` is an int8 array of TRUTH_* flags; it is deliberately not part
    of the training-facing surface — use :meth:`hidden_truth` in evaluation
    or task-assembly code only.
    """

    def __init__(
        self,
        ids: Sequence[str],
        vectors: np.ndarray,
        truth: Sequence[int] | np.ndarray | None = None,
        dim: int | None = None,
        tokens: Mapping[str, Sequence[str]] | None = None,
    ):
        ids = list(ids)
        vectors = np.array(vectors, dtype=np.float32, copy=True)
        if vectors.ndim == 1 and len(ids) == 0:
            vectors = vectors.reshape(0, dim if dim is not None else 0)
        if vectors.ndim != 2:
            raise CorpusError(f"vectors must be 2-d (n, d); got shape {vectors.shape}")
        if len(ids) != vectors.shape[0]:
            raise CorpusError(f"{len(ids)} ids but {vectors.shape[0]} vectors")
        if dim is None:
            dim = vectors.shape[1]
        if vectors.shape[0] > 0 and vectors.shape[1] != dim:
            raise CorpusError(f"vector dimension {vectors.shape[1]} != declared dim {dim}")
        if dim < 1:
            raise CorpusError("dimension must be >= 1")
        if vectors.size and not np.all(np.isfinite(vectors)):
            bad = int(np.argwhere(~np.isfinite(vectors).all(axis=1))[0][0])
            raise CorpusError(f"record {bad}: non-finite vector entry")
        seen: set[str] = set()
        for i, doc_id in enumerate(ids):
            if not doc_id:
                raise CorpusError(f"record {i}: empty id")
            if doc_id in seen:
                raise CorpusError(f"record {i}: duplicate id {doc_id!r}")
            seen.add(doc_id)
        if truth is None:
            truth_arr = np.zeros(len(ids), dtype=np.int8)
        else:
            truth_arr = np.array(truth, dtype=np.int8, copy=True)
            if truth_arr.shape != (len(ids),):
                raise CorpusError("truth length must match document count")
            if truth_arr.size and not np.all((truth_arr >= 0) & (truth_arr <= 2)):
                raise CorpusError("truth flags must be 0 (unknown), 1 (positive) or 2 (negative)")

        vectors = vectors.reshape(len(ids), dim)
        vectors.setflags(write=False)
        truth_arr.setflags(write=False)
        self._ids = ids
        self._vectors = vectors
        self._truth = truth_arr
        self._dim = int(dim)
        self._index = {doc_id: i for i, doc_id in enumerate(ids)}
        self._tokens = {k: list(v) for k, v in tokens.items()} if tokens else {}

    # -- basic container surface -------------------------------------------

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def dim(self) -> int:
        return self._dim

    def __len__(self) -> int:
        return len(self._ids)

    def __iter__(self) -> Iterator[EmbeddedDoc]:
        for i in range(len(self._ids)):
            yield self[i]

    def __getitem__(self, i: int) -> EmbeddedDoc:
        doc_id = self._ids[i]
        toks = self._tokens.get(doc_id)
        return EmbeddedDoc(
            id=doc_id,
            vector=self._vectors[i],
            truth=int(self._truth[i]),
            tokens=tuple(toks) if toks is not None else None,
        )

    def index_of(self, doc_id: str) -> int:
        try:
            return self._index[doc_id]
        except KeyError:
            raise KeyError(f"unknown document id {doc_id!r}") from None

    def vectors_for(self, doc_ids: Sequence[str]) -> np.ndarray:
        """Vectors for the given ids, in the given order."""
        rows = [self.index_of(d) for d in doc_ids]
        return self._vectors[rows]

    # -- evaluation / task-assembly surface --------------------------------

    def hidden_truth(self) -> np.ndarray:
        """Ground-truth flags, for evaluation and task assembly only."""
        return self._truth

    def truth_map(self) -> dict[str, int]:
        """id -> TRUTH_* flag, for evaluation and task assembly only."""
        return {doc_id: int(t) for doc_id, t in zip(self._ids, self._truth)}

    def ids_with_truth(self, flag: int) -> list[str]:
        return [doc_id for doc_id, t in zip(self._ids, self._truth) if t == flag]

    # -- tokens (BM25 companion) -------------------------------------------

    @property
    def tokens(self) -> dict[str, list[str]]:
        return {k: list(v) for k, v in self._tokens.items()}

    def with_tokens(self, tokens: Mapping[str, Sequence[str]]) -> "Corpus":
        return Corpus(self._ids, self._vectors, self._truth, self._dim, tokens)

    def subset(self, doc_ids: Sequence[str]) -> "Corpus":
        """New corpus containing exactly ``doc_ids``, in the given order."""
        rows = [self.index_of(d) for d in doc_ids]
        toks = {d: self._tokens[d] for d in doc_ids if d in self._tokens}
        return Corpus(
            [self._ids[r] for r in rows],
            self._vectors[rows],
            self._truth[rows],
            self._dim,
            toks or None,
        )

    def same_documents(self, other: "Corpus") -> bool:
        """Bit-exact equality of ids, vectors and truth (tokens excluded)."""
        return (
            self._ids == other._ids
            and self._dim == other._dim
            and self._vectors.tobytes() == other._vectors.tobytes()
            and np.array_equal(self._truth, other._truth)
        )


@dataclass(frozen=True)
class PuTask:
    """A transductive PU task: labeled-positive ids and unlabeled ids.

    ``lp_ids`` and ``u_ids`` are disjoint and together cover exactly the
    corpus used for a run. Membership is the only label information training
    code may see (s = 1 iff the id is in ``lp_ids``).
    """

    lp_ids: frozenset[str]
    u_ids: frozenset[str]
    label_frequency_hint: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "lp_ids", frozenset(self.lp_ids))
        object.__setattr__(self, "u_ids", frozenset(self.u_ids))
        if not self.lp_ids:
            raise TaskError("a PU task needs at least one labeled positive")
        if self.lp_ids & self.u_ids:
            raise TaskError("lp_ids and u_ids must be disjoint")
        hint = self.label_frequency_hint
        if hint is not None and not (0.0 < hint <= 1.0):
            raise TaskError(f"label frequency hint must lie in (0, 1]; got {hint}")

    @property
    def lp_sorted(self) -> list[str]:
        return sorted(self.lp_ids)

    @property
    def u_sorted(self) -> list[str]:
        return sorted(self.u_ids)

    def all_ids(self) -> frozenset[str]:
        return self.lp_ids | self.u_ids


@dataclass(frozen=True)
class SynthSpec:
    """Two isotropic Gaussian components in d dimensions with class prior."""

    dim: int
    pos_mean: tuple[float, ...]
    neg_mean: tuple[float, ...]
    pos_std: float = 1.0
    neg_std: float = 1.0
    class_prior: float = 0.5
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise CorpusError("dimension must be >= 1")
        if len(self.pos_mean) != self.dim or len(self.neg_mean) != self.dim:
            raise CorpusError("component means must have length dim")
        if self.pos_std <= 0 or self.neg_std <= 0:
            raise CorpusError("component standard deviations must be positive")
        # π = 1 is allowed (degenerate all-positive corpus); π > 1 never is.
        if not (0.0 < self.class_prior <= 1.0):
            raise CorpusError(f"class prior must lie in (0, 1]; got {self.class_prior}")
        if self.n < 2:
            raise CorpusError("need at least 2 documents")


# ---------------------------------------------------------------------------
# PUE1 corpus files
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus as a PUE1 file.

    Layout (little-endian): magic "PUE1", u32 version, u32 d, u64 count,
    then per record: u16 id-length, UTF-8 id bytes, u8 truth flag,
    d float32 vector entries.
    """
    if not np.all(np.isfinite(corpus.vectors)):
        raise CorpusError("refusing to write corpus with non-finite entries")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PUE1_MAGIC)
        fh.write(struct.pack("<IIQ", _PUE1_VERSION, corpus.dim, len(corpus)))
        for i, doc_id in enumerate(corpus.ids):
            raw = doc_id.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CorpusError(f"record {i}: id longer than 65535 bytes")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", int(corpus.hidden_truth()[i])))
            fh.write(corpus.vectors[i].astype("<f4", copy=False).tobytes())


def load_corpus(path: str | Path) -> Corpus:
    """Read a PUE1 file. Raises :class:`CorpusLoadError` naming the bad record."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 20 or data[:4] != _PUE1_MAGIC:
        raise CorpusLoadError(f"{path}: not a PUE1 file (bad magic or truncated header)")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != _PUE1_VERSION:
        raise CorpusLoadError(f"{path}: unsupported PUE1 version {version}")
    if dim < 1:
        raise CorpusLoadError(f"{path}: header dimension {dim} is invalid")
    off = 20
    ids: list[str] = []
    truth = np.zeros(count, dtype=np.int8)
    vectors = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for i in range(count):
        if off + 2 > len(data):
            raise CorpusLoadError(f"record {i}: unexpected end of file in id length")
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + id_len + 1 > len(data):
            raise CorpusLoadError(f"record {i}: unexpected end of file in id/truth")
        try:
            doc_id = data[off : off + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusLoadError(f"record {i}: id is not valid UTF-8") from exc
        off += id_len
        flag = data[off]
        off += 1
        if flag > 2:
            raise CorpusLoadError(f"record {i}: truth flag {flag} out of range")
        if off + vec_bytes > len(data):
            raise CorpusLoadError(
                f"record {i}: vector truncated (header says d={dim}, file ends early)"
            )
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
        off += vec_bytes
        if not np.all(np.isfinite(vec)):
            raise CorpusLoadError(f"record {i}: non-finite vector entry")
        ids.append(doc_id)
        truth[i] = flag
        vectors[i] = vec
    if off != len(data):
        raise CorpusLoadError(f"{path}: {len(data) - off} trailing bytes after last record")
    try:
        return Corpus(ids, vectors, truth, dim=dim)
    except CorpusError as exc:
        raise CorpusLoadError(str(exc)) from exc


def save_tokens(tokens: Mapping[str, Sequence[str]], path: str | Path) -> None:
    """Write the BM25 companion tokens file (JSON-lines, sorted by id)."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id in sorted(tokens):
            fh.write(json.dumps({"id": doc_id, "tokens": list(tokens[doc_id])}, sort_keys=True))
            fh.write("\n")


def load_tokens(path: str | Path) -> dict[str, list[str]]:
    tokens: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                doc_id = rec["id"]
                toks = rec["tokens"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusLoadError(f"tokens line {lineno}: malformed record") from exc
            if doc_id in tokens:
                raise CorpusLoadError(f"tokens line {lineno}: duplicate id {doc_id!r}")
            tokens[doc_id] = [str(t) for t in toks]
    return tokens


def save_task(task: PuTask, path: str | Path) -> None:
    payload = {
        "lp_ids": task.lp_sorted,
        "u_ids": task.u_sorted,
        "label_frequency_hint": task.label_frequency_hint,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=0) + "\n", encoding="utf-8")


def load_task(path: str | Path) -> PuTask:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return PuTask(
        lp_ids=frozenset(payload["lp_ids"]),
        u_ids=frozenset(payload["u_ids"]),
        label_frequency_hint=payload.get("label_frequency_hint"),
    )


# ---------------------------------------------------------------------------
# Task assembly
# ---------------------------------------------------------------------------


def scar_sample(
    positive_ids: Sequence[str],
    negative_ids: Sequence[str],
    label_frequency: float,
    seed: int,
) -> PuTask:
    """Label each positive independently with probability c (SCAR propensity).

    Positives that stay unlabeled join the negatives in the unlabeled set.
    Sampling is deterministic given the seed and invariant to the input
    ordering (ids are processed sorted).
    """
    if not (0.0 < label_frequency <= 1.0):
        raise TaskError(f"label frequency must lie in (0, 1]; got {label_frequency}")
    pos = sorted(set(positive_ids))
    neg = sorted(set(negative_ids))
    if not pos:
        raise TaskError("need at least one positive id")
    if set(pos) & set(neg):
        raise TaskError("positive and negative id sets overlap")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(pos))
    lp = {doc_id for doc_id, u in zip(pos, draws) if u < label_frequency}
    if not lp:
        raise TaskError(
            "SCAR draw labeled no positives (small c, unlucky seed); use another seed"
        )
    u = (set(pos) - lp) | set(neg)
    return PuTask(frozenset(lp), frozenset(u), label_frequency_hint=label_frequency)


def make_transductive_task(corpus: Corpus, lp_count: int, seed: int) -> PuTask:
    """Draw exactly ``lp_count`` labeled positives; everything else is U.

    LP is a uniform without-replacement sample of the corpus's true
    positives. U keeps its hidden truth for evaluation only.
    """
    if lp_count < 1:
        raise TaskError("lp_count must be >= 1")
    positives = sorted(corpus.ids_with_truth(TRUTH_POSITIVE))
    if len(positives) < lp_count:
        raise TaskError(
            f"corpus has {len(positives)} true positives; cannot label {lp_count}"
        )
    rng = np.random.default_rng(seed)
    lp = set(rng.permutation(positives)[:lp_count].tolist())
    u = set(corpus.ids) - lp
    return PuTask(frozenset(lp), frozenset(u))


def make_pool_task(
    corpus: Corpus,
    u_ids: Sequence[str],
    pool_ids: Sequence[str],
    lp_count: int,
    seed: int,
) -> tuple[Corpus, PuTask]:
    """Fixed-U protocol: LP is drawn from a positive pool disjoint from U.

    Mirrors the setup where the unlabeled set is a fixed collection and the
    seed documents come from a separate labeled pool. Returns the run corpus
    (U plus the sampled LP only) and the task over it.
    """
    u_set = set(u_ids)
    pool = sorted(set(pool_ids) - u_set)
    if lp_count < 1:
        raise TaskError("lp_count must be >= 1")
    if len(pool) < lp_count:
        raise TaskError(f"positive pool has {len(pool)} docs; cannot draw {lp_count}")
    rng = np.random.default_rng(seed)
    lp = sorted(rng.permutation(pool)[:lp_count].tolist())
    run_corpus = corpus.subset(sorted(u_set) + lp)
    return run_corpus, PuTask(frozenset(lp), frozenset(u_set))


def gen_synthetic(spec: SynthSpec) -> Corpus:
    """Sample a labeled two-component Gaussian corpus, bit-reproducible by seed."""
    rng = np.random.default_rng(spec.seed)
    is_pos = rng.random(spec.n) < spec.class_prior
    noise = rng.standard_normal((spec.n, spec.dim))
    pos_mean = np.asarray(spec.pos_mean, dtype=np.float64)
    neg_mean = np.asarray(spec.neg_mean, dtype=np.float64)
    means = np.where(is_pos[:, None], pos_mean[None, :], neg_mean[None, :])
    stds = np.where(is_pos, spec.pos_std, spec.neg_std)[:, None]
    vectors = (means + stds * noise).astype(np.float32)
    ids = [f"syn-{i:06d}" for i in range(spec.n)]
    truth = np.where(is_pos, TRUTH_POSITIVE, TRUTH_NEGATIVE).astype(np.int8)
    return Corpus(ids, vectors, truth, dim=spec.dim)
