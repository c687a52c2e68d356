"""Transductive experiment runner and metrics.

The unlabeled set is both training input and evaluation target: methods see
(vectors, LP/U membership) for training, and this module alone reads hidden
truth to compute precision/recall/F1 and the ranking metrics P@k% / R@k%.

Reports are JSON-lines with one record per unlabeled document followed by a
summary record, serialized with sorted keys so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, asdict, is_dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import baselines, ebm, kde
from .data import Corpus, PuTask, TRUTH_POSITIVE, TRUTH_UNKNOWN
from .neural import sigmoid

METHODS = ("pude-kde", "pude-em", "nnpu", "bm25")

RATIO_GRID = tuple(round(0.01 * i, 2) for i in range(1, 10)) + tuple(
    round(0.1 * i, 1) for i in range(1, 11)
)


class EvalError(ValueError):
    """Invalid evaluation request (unknown truth, bad policy, ...)."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def f1_score(
    decisions: Mapping[str, bool], truth: Mapping[str, bool]
) -> dict[str, float]:
    """Precision, recall and F1 of a decision set against known truth.

    Degenerate cases follow the usual conventions: no predicted positives
    gives precision 0 (undefined) and F1 0; precision+recall 0 gives F1 0.
    """
    missing = [d for d in decisions if d not in truth]
    if missing:
        raise EvalError(f"truth unknown for ids: {sorted(missing)[:5]}")
    tp = fp = fn = 0
    for doc_id, pred in decisions.items():
        if pred and truth[doc_id]:
            tp += 1
        elif pred:
            fp += 1
        elif truth[doc_id]:
            fn += 1
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if (precision + recall)
        else 0.0
    )
    return {"precision": precision, "recall": recall, "f1": f1}


def precision_recall_at_pct(
    ranking: Sequence[str], truth: Mapping[str, bool], k_pct: float
) -> dict[str, float]:
    """Precision and recall of the top ceil(k% of |U|) ranked documents."""
    if not ranking:
        raise EvalError("ranking is empty")
    if not (0.0 < k_pct <= 100.0):
        raise EvalError(f"k_pct must lie in (0, 100]; got {k_pct}")
    missing = [d for d in ranking if d not in truth]
    if missing:
        raise EvalError(f"truth unknown for ids: {sorted(missing)[:5]}")
    cutoff = math.ceil(k_pct / 100.0 * len(ranking))
    top = ranking[:cutoff]
    tp = sum(1 for d in top if truth[d])
    total_pos = sum(1 for d in ranking if truth[d])
    return {
        "cutoff": cutoff,
        "precision": tp / cutoff,
        "recall": tp / total_pos if total_pos else 0.0,
    }


def rank_ids(scores: Mapping[str, float]) -> list[str]:
    """Ids by descending score; ties broken by ascending id."""
    return [d for d, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


# ---------------------------------------------------------------------------
# Threshold policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdPolicy:
    """How scores become decisions.

    kinds: "fixed-logit" (score >= value, default 0), "sigmoid-0.5"
    (sigmoid(score) >= 0.5, i.e. score >= 0), "top-fraction" (top value of
    the ranking, value in (0, 1]), "top-count" (top value documents).
    """

    kind: str = "fixed-logit"
    value: float | None = None

    def __post_init__(self):
        if self.kind not in ("fixed-logit", "sigmoid-0.5", "top-fraction", "top-count"):
            raise EvalError(f"unknown threshold policy {self.kind!r}")
        if self.kind == "top-fraction":
            if self.value is None or not (0.0 < self.value <= 1.0):
                raise EvalError("top-fraction needs a fraction in (0, 1]")
        if self.kind == "top-count":
            if self.value is None or self.value < 1 or self.value != int(self.value):
                raise EvalError("top-count needs a positive integer count")

    @classmethod
    def parse(cls, text: str) -> "ThresholdPolicy":
        """Parse e.g. "fixed-logit:0.5", "sigmoid-0.5", "top-count:50"."""
        kind, _, raw = text.partition(":")
        if kind in ("fixed-logit",):
            return cls(kind, float(raw) if raw else 0.0)
        if kind == "sigmoid-0.5":
            return cls(kind)
        if kind == "top-fraction":
            return cls(kind, float(raw))
        if kind == "top-count":
            return cls(kind, int(raw))
        raise EvalError(f"cannot parse threshold policy {text!r}")

    def describe(self) -> str:
        if self.kind == "sigmoid-0.5":
            return self.kind
        if self.kind == "top-count":
            return f"{self.kind}:{int(self.value)}"
        return f"{self.kind}:{self.value}"


def apply_policy(
    policy: ThresholdPolicy, scores: Mapping[str, float], ranking: Sequence[str]
) -> set[str]:
    """The predicted-positive id set under the policy."""
    if policy.kind == "fixed-logit":
        tau = policy.value if policy.value is not None else 0.0
        return {d for d, s in scores.items() if s >= tau}
    if policy.kind == "sigmoid-0.5":
        return {d for d, s in scores.items() if sigmoid(s) >= 0.5}
    if policy.kind == "top-fraction":
        count = math.ceil(policy.value * len(ranking))
        return set(ranking[:count])
    count = min(int(policy.value), len(ranking))
    return set(ranking[:count])


DEFAULT_POLICIES = {
    "pude-kde": ThresholdPolicy("fixed-logit", 0.0),
    "pude-em": ThresholdPolicy("sigmoid-0.5"),
    "nnpu": ThresholdPolicy("sigmoid-0.5"),
}


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    name: str
    config: object | None = None

    def __post_init__(self):
        if self.name not in METHODS:
            raise EvalError(f"unknown method {self.name!r}; expected one of {METHODS}")


@dataclass(frozen=True)
class ScoreReport:
    method: str
    seed: int
    policy: str
    records: tuple[dict, ...]  # per U document: id, score, decision, truth
    ranking: tuple[str, ...]
    metrics: dict[str, float]
    lp_size: int
    u_size: int
    config_hash: str


def config_fingerprint(payload: Mapping) -> str:
    """Stable hash of the semantic run configuration."""
    canon = json.dumps(payload, sort_keys=True, default=_jsonable)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return asdict(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj)!r}")


def _derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def score_task(
    method: MethodSpec, corpus: Corpus, task: PuTask, seed: int
) -> dict[str, float]:
    """Train (where applicable) and score every unlabeled document.

    Any seed field in the supplied method config is replaced by a seed
    derived from the experiment seed, so one seed controls the whole run.
    """
    u_sorted = task.u_sorted
    train_seed = _derive_seed(seed, 1)
    if method.name == "pude-kde":
        cfg = method.config or kde.KdeConfig()
        cfg = replace(cfg, seed=train_seed)
        pipeline = kde.train_pude_kde(task, corpus, cfg)
        scores = pipeline.score(corpus.vectors_for(u_sorted).astype(np.float64))
    elif method.name == "pude-em":
        cfg = method.config or ebm.EmTrainConfig()
        cfg = replace(cfg, seed=train_seed)
        pair, _ = ebm.train_pude_em(task, corpus, cfg)
        scores = ebm.score_em(pair, corpus.vectors_for(u_sorted).astype(np.float64))
    elif method.name == "nnpu":
        if method.config is None:
            raise EvalError("nnpu needs a config carrying the class prior")
        cfg = replace(method.config, seed=train_seed)
        scorer, _ = baselines.train_nnpu(task, corpus, cfg)
        scores = scorer.score(corpus.vectors_for(u_sorted).astype(np.float64))
    elif method.name == "bm25":
        tokens = corpus.tokens
        needed = set(u_sorted) | task.lp_ids
        missing = [d for d in sorted(needed) if d not in tokens]
        if missing:
            raise EvalError(f"bm25 needs tokens; missing for: {missing[:5]}")
        index = baselines.Bm25Index.build({d: tokens[d] for d in u_sorted})
        query = [tokens[d] for d in task.lp_sorted]
        return dict(baselines.bm25_rank(index, query))
    else:  # pragma: no cover - guarded by MethodSpec
        raise EvalError(method.name)
    return {d: float(s) for d, s in zip(u_sorted, np.atleast_1d(scores))}


def run_experiment(
    corpus: Corpus,
    task: PuTask,
    method: MethodSpec,
    policy: ThresholdPolicy | None = None,
    seed: int = 0,
) -> ScoreReport:
    """Full transductive run: train, score U, decide, and measure.

    F1 uses the threshold policy (the method's natural default when none is
    given); ranking metrics are P@k% and R@k% for k in {10, 20}.
    """
    if not task.all_ids() <= set(corpus.ids):
        raise EvalError("task references ids missing from the corpus")
    if policy is None:
        if method.name == "bm25":
            policy = ThresholdPolicy("top-count", float(len(task.lp_ids)))
        else:
            policy = DEFAULT_POLICIES[method.name]
    scores = score_task(method, corpus, task, seed)
    ranking = rank_ids(scores)
    decided = apply_policy(policy, scores, ranking)
    truth_flags = corpus.truth_map()
    unknown = [d for d in ranking if truth_flags[d] == TRUTH_UNKNOWN]
    if unknown:
        raise EvalError(
            f"transductive evaluation needs truth for every U document; "
            f"unknown for {unknown[:5]}"
        )
    truth = {d: truth_flags[d] == TRUTH_POSITIVE for d in ranking}
    decisions = {d: d in decided for d in ranking}
    metrics = f1_score(decisions, truth)
    for k in (10, 20):
        pr = precision_recall_at_pct(ranking, truth, k)
        metrics[f"p_at_{k}"] = pr["precision"]
        metrics[f"r_at_{k}"] = pr["recall"]
    cfg_hash = config_fingerprint(
        {
            "method": method.name,
            "config": method.config,
            "policy": policy.describe(),
            "seed": seed,
            "lp": task.lp_sorted,
            "u_size": len(task.u_ids),
        }
    )
    records = tuple(
        {
            "id": d,
            "score": scores[d],
            "decision": bool(decisions[d]),
            "truth": "positive" if truth[d] else "negative",
        }
        for d in sorted(scores)
    )
    return ScoreReport(
        method=method.name,
        seed=seed,
        policy=policy.describe(),
        records=records,
        ranking=tuple(ranking),
        metrics=metrics,
        lp_size=len(task.lp_ids),
        u_size=len(task.u_ids),
        config_hash=cfg_hash,
    )


def write_report_jsonl(report: ScoreReport, path: str | Path) -> None:
    """One JSON line per document, then one summary line; byte-deterministic."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
        summary = {
            "summary": True,
            "method": report.method,
            "lp_size": report.lp_size,
            "u_size": report.u_size,
            "f1": report.metrics["f1"],
            "precision": report.metrics["precision"],
            "recall": report.metrics["recall"],
            "p_at_10": report.metrics["p_at_10"],
            "p_at_20": report.metrics["p_at_20"],
            "r_at_10": report.metrics["r_at_10"],
            "r_at_20": report.metrics["r_at_20"],
            "seed": report.seed,
            "threshold": report.policy,
            "config_hash": report.config_hash,
        }
        fh.write(json.dumps(summary, sort_keys=True))
        fh.write("\n")


# ---------------------------------------------------------------------------
# Label-ratio sweep (fixed U, LP drawn from a held-out positive pool)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    ratio: float
    method: str
    seed: int
    f1: float


def run_ratio_sweep(
    corpus: Corpus,
    u_ids: Sequence[str],
    pool_ids: Sequence[str],
    methods: Sequence[MethodSpec],
    ratios: Sequence[float] = RATIO_GRID,
    seeds: Sequence[int] = (0,),
    policy: ThresholdPolicy | None = None,
) -> list[SweepRow]:
    """F1 per (ratio, method, seed) with U fixed and |LP| = round(ratio * |U|).

    LP documents come from ``pool_ids`` (positives held out of U), so growing
    the seed set never shrinks the evaluation target.
    """
    from .data import make_pool_task

    rows = []
    for ratio in ratios:
        lp_count = max(1, round(ratio * len(u_ids)))
        for seed in seeds:
            run_corpus, task = make_pool_task(
                corpus, u_ids, pool_ids, lp_count, seed=_derive_seed(seed, 77)
            )
            for method in methods:
                report = run_experiment(run_corpus, task, method, policy, seed)
                rows.append(SweepRow(ratio, method.name, seed, report.metrics["f1"]))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "method", "f1"])
        for row in rows:
            writer.writerow([row.ratio, row.method, repr(row.f1)])
