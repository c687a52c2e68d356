"""Comparison methods: BM25 query-by-documents and the nnPU classifier.

BM25 treats the concatenated labeled-positive documents as one extended
query (a term multiset, so repeated seed terms weigh more) and ranks the
unlabeled documents. The idf is the Robertson/Sparck-Jones form with 0.5
smoothing wrapped as ln(1 + .) so scores stay nonnegative.

nnPU is the class-prior-dependent contrast: it minimizes the non-negative
PU risk

    pi * R_P^+(g) + max(0, R_U^-(g) - pi * R_P^-(g))

with the sigmoid surrogate loss l(z) = sigmoid(-z). The formula is the
standard published estimator; this paper-set only cites it, so the
definition here follows the external source. When the bracketed term is
negative the corrected contribution is exactly zero (value and gradient).
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import neural
from .data import Corpus, PuTask
from .neural import DenseNet, sigmoid


class BaselineError(ValueError):
    """Invalid baseline configuration or missing inputs."""


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bm25Index:
    doc_ids: tuple[str, ...]
    term_freqs: tuple[Counter, ...]  # aligned with doc_ids
    doc_lengths: tuple[int, ...]
    doc_freq: Mapping[str, int]
    avg_doc_length: float
    k1: float = 1.2
    b: float = 0.75

    @classmethod
    def build(
        cls,
        docs: Mapping[str, Sequence[str]],
        k1: float = 1.2,
        b: float = 0.75,
    ) -> "Bm25Index":
        doc_ids = tuple(sorted(docs))
        term_freqs = tuple(Counter(docs[d]) for d in doc_ids)
        doc_lengths = tuple(sum(tf.values()) for tf in term_freqs)
        df: Counter = Counter()
        for tf in term_freqs:
            df.update(tf.keys())
        avg = (sum(doc_lengths) / len(doc_ids)) if doc_ids else 0.0
        return cls(doc_ids, term_freqs, doc_lengths, dict(df), avg, k1, b)

    @property
    def size(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: str) -> float:
        n = self.size
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def bm25_rank(
    index: Bm25Index,
    query_docs: Sequence[Sequence[str]],
    u_ids: Sequence[str] | None = None,
) -> list[tuple[str, float]]:
    """Score documents against the concatenated query docs, best first.

    Query term frequency multiplies the per-term contribution (the query is
    a multiset). Ties break by ascending id.
    """
    query: Counter = Counter()
    for doc in query_docs:
        query.update(doc)
    if u_ids is None:
        targets = list(index.doc_ids)
    else:
        targets = sorted(u_ids)
        known = set(index.doc_ids)
        missing = [d for d in targets if d not in known]
        if missing:
            raise BaselineError(f"documents not in the index: {missing[:5]}")
    row = {d: i for i, d in enumerate(index.doc_ids)}
    idf = {t: index.idf(t) for t in query}
    scored = []
    for doc_id in targets:
        i = row[doc_id]
        tf = index.term_freqs[i]
        norm = index.k1 * (
            1.0 - index.b + index.b * index.doc_lengths[i] / index.avg_doc_length
        ) if index.avg_doc_length > 0 else index.k1
        score = 0.0
        for term, qtf in query.items():
            f = tf.get(term, 0)
            if f:
                score += qtf * idf[term] * (f * (index.k1 + 1.0)) / (f + norm)
        scored.append((doc_id, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


@dataclass(frozen=True)
class Bm25SweepResult:
    mean_f1: float
    std_f1: float
    per_k: tuple[tuple[int, float, float, float], ...]  # (K, precision, recall, F1)


def bm25_f1_sweep(
    ranked_ids: Sequence[str],
    truth: Mapping[str, bool],
    k_min: int,
    k_max: int = 5000,
) -> Bm25SweepResult:
    """F1 of the top-K cut for every K in [k_min, k_max], plus mean and std.

    K beyond the ranking length is clamped (with a warning) rather than
    rejected.
    """
    n = len(ranked_ids)
    if n == 0:
        raise BaselineError("ranking is empty")
    if k_min < 1 or k_min > k_max:
        raise BaselineError(f"bad sweep range [{k_min}, {k_max}]")
    if k_max > n:
        import warnings

        warnings.warn(f"k_max {k_max} exceeds |U|={n}; clamping", stacklevel=2)
        k_max = n
    unknown = [d for d in ranked_ids if d not in truth]
    if unknown:
        raise BaselineError(f"truth missing for ranked ids: {unknown[:5]}")
    total_pos = sum(1 for d in ranked_ids if truth[d])
    per_k = []
    tp = 0
    f1s = []
    for i, doc_id in enumerate(ranked_ids[:k_max], start=1):
        if truth[doc_id]:
            tp += 1
        if i < k_min:
            continue
        precision = tp / i
        recall = tp / total_pos if total_pos else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        per_k.append((i, precision, recall, f1))
        f1s.append(f1)
    arr = np.asarray(f1s)
    return Bm25SweepResult(float(arr.mean()), float(arr.std()), tuple(per_k))


def write_bm25_sweep_csv(result: Bm25SweepResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["K", "precision", "recall", "F1"])
        for k, p, r, f1 in result.per_k:
            writer.writerow([k, repr(p), repr(r), repr(f1)])


# ---------------------------------------------------------------------------
# nnPU
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NnpuConfig:
    class_prior: float  # REQUIRED: the knowledge puDE methods do without
    hidden: int = 512
    depth: int = 4
    batch_norm: bool = True
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.class_prior < 1.0):
            raise BaselineError(
                f"class prior must lie strictly in (0, 1); got {self.class_prior}"
            )
        if self.depth < 1:
            raise BaselineError("need at least one layer")


@dataclass
class NnpuScorer:
    net: DenseNet

    def score(self, x: np.ndarray) -> float | np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = neural.forward(self.net, x, mode="eval")[:, 0]
        return float(out[0]) if single else out


def _sigmoid_loss(z: np.ndarray) -> np.ndarray:
    # l(z) = sigmoid(-z); small for confidently-correct z.
    return sigmoid(-z)


def train_nnpu(
    task: PuTask,
    corpus: Corpus,
    config: NnpuConfig,
) -> tuple[NnpuScorer, list[dict]]:
    """Train the nnPU classifier; returns the scorer and a per-epoch trace.

    Each step forwards the full LP set together with one U minibatch (one
    batch-norm pass over both), computes the clamped risk, and backpropagates
    through the unclamped terms only.
    """
    missing = task.all_ids() - set(corpus.ids)
    if missing:
        raise BaselineError(f"task references {len(missing)} ids missing from the corpus")
    pi = config.class_prior
    lp_vec = corpus.vectors_for(task.lp_sorted).astype(np.float64)
    u_vec = corpus.vectors_for(task.u_sorted).astype(np.float64)
    if u_vec.shape[0] == 0:
        raise BaselineError("nnPU needs a non-empty unlabeled set")
    d = lp_vec.shape[1]
    rng = np.random.default_rng(config.seed)
    dims = [d] + [config.hidden] * (config.depth - 1) + [1]
    net = DenseNet.build(dims, rng, batch_norm=config.batch_norm)
    state = neural.AdamState.init(net.get_params(), lr=config.lr)

    n_lp = lp_vec.shape[0]
    n_u = u_vec.shape[0]
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_u)
        risk_sum = 0.0
        clamped = 0
        steps = 0
        for start in range(0, n_u, config.batch_size):
            u_batch = u_vec[order[start : start + config.batch_size]]
            nb = u_batch.shape[0]
            stacked = np.concatenate([lp_vec, u_batch], axis=0)
            out, caches = neural.forward_cached(net, stacked, "train", update_stats=True)
            z = out[:, 0]
            z_p, z_u = z[:n_lp], z[n_lp:]

            r_p_pos = float(_sigmoid_loss(z_p).mean())
            r_p_neg = float(_sigmoid_loss(-z_p).mean())
            r_u_neg = float(_sigmoid_loss(-z_u).mean())
            neg_term = r_u_neg - pi * r_p_neg

            # d l(z)/dz = -sigmoid(z) sigmoid(-z); d l(-z)/dz = +sigmoid(z) sigmoid(-z)
            sz_p = sigmoid(z_p) * sigmoid(-z_p)
            sz_u = sigmoid(z_u) * sigmoid(-z_u)
            up_p = pi * (-sz_p) / n_lp
            up_u = np.zeros(nb)
            if neg_term >= 0.0:
                up_u = sz_u / nb
                up_p = up_p - pi * sz_p / n_lp
                risk = pi * r_p_pos + neg_term
            else:
                clamped += 1
                risk = pi * r_p_pos
            upstream = np.concatenate([up_p, up_u])[:, None]
            grads, _ = neural.backward_cached(net, caches, upstream, "train")
            new_params, state = neural.adam_step(net.get_params(), grads, state)
            net.set_params(new_params)
            if not np.isfinite(risk):
                raise neural.DivergenceError(f"nnPU risk diverged at epoch {epoch}")
            risk_sum += risk
            steps += 1
        trace.append({"epoch": epoch, "risk": risk_sum / steps, "clamped_steps": clamped})
    return NnpuScorer(net), trace
