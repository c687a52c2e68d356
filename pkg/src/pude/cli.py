"""Command-line entry point: synth | embed-check | train | eval | sweep | rank.

All defaults mirror the intended operating point (bandwidth 1.9, 50 latent
dimensions, 512-wide 4-layer nets, Adam at 1e-3, alpha = beta = gamma0 = 1),
so a bare invocation runs the reference configuration. Every run writes a
config fingerprint sufficient to reproduce it. Exit codes: 0 success,
2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, data, ebm, evaluation, kde, neural

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliConfigError(ValueError):
    """Invalid flag combination; maps to exit code 2."""


def _parse_vector(text: str, dim: int, name: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    vals = tuple(float(p) for p in parts)
    if len(vals) == 1 and dim > 1:
        vals = vals + (0.0,) * (dim - 1)
    if len(vals) != dim:
        raise CliConfigError(f"{name} needs {dim} values; got {len(vals)}")
    return vals


def _write_config(out_dir: Path, payload: dict) -> str:
    fingerprint = evaluation.config_fingerprint(
        {k: v for k, v in payload.items() if k not in ("out", "corpus", "task_file")}
    )
    payload = dict(payload, fingerprint=fingerprint)
    (out_dir / "config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=evaluation._jsonable) + "\n",
        encoding="utf-8",
    )
    return fingerprint


def _write_sidecar_config(out_file: Path, payload: dict) -> str:
    """Fingerprint file next to a single-file output (synth, rank)."""
    fingerprint = evaluation.config_fingerprint(
        {k: v for k, v in payload.items() if k != "out"}
    )
    payload = dict(payload, fingerprint=fingerprint)
    out_file.with_suffix(out_file.suffix + ".config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=evaluation._jsonable) + "\n",
        encoding="utf-8",
    )
    return fingerprint


def _load_task_for(args, corpus: data.Corpus) -> data.PuTask:
    if getattr(args, "task", None):
        return data.load_task(args.task)
    if getattr(args, "lp_count", None):
        return data.make_transductive_task(corpus, args.lp_count, args.seed)
    raise CliConfigError("need either --task FILE or --lp-count N")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    dim = args.dim
    spec = data.SynthSpec(
        dim=dim,
        pos_mean=_parse_vector(args.pos_mean, dim, "--pos-mean"),
        neg_mean=_parse_vector(args.neg_mean, dim, "--neg-mean"),
        pos_std=args.pos_std,
        neg_std=args.neg_std,
        class_prior=args.pi,
        n=args.n,
        seed=args.seed,
    )
    corpus = data.gen_synthetic(spec)
    data.save_corpus(corpus, args.out)
    _write_sidecar_config(
        Path(args.out), {"command": "synth", "spec": spec, "out": str(args.out)}
    )
    print(f"wrote {len(corpus)} docs (d={corpus.dim}) to {args.out}")
    return EXIT_OK


def cmd_embed_check(args) -> int:
    corpus = data.load_corpus(args.corpus)
    truth = corpus.hidden_truth()
    counts = {
        "positive": int((truth == data.TRUTH_POSITIVE).sum()),
        "negative": int((truth == data.TRUTH_NEGATIVE).sum()),
        "unknown": int((truth == data.TRUTH_UNKNOWN).sum()),
    }
    print(f"{args.corpus}: {len(corpus)} docs, d={corpus.dim}, truth={counts}")
    if args.tokens:
        tokens = data.load_tokens(args.tokens)
        missing = [d for d in corpus.ids if d not in tokens]
        if missing:
            print(f"tokens file missing {len(missing)} ids (first: {missing[:3]})")
            return EXIT_RUNTIME
        print(f"{args.tokens}: tokens cover all {len(corpus)} docs")
    return EXIT_OK


def _kde_config(args, seed: int) -> kde.KdeConfig:
    return kde.KdeConfig(
        bandwidth=args.bandwidth,
        latent_dim=args.latent_dim,
        vae_epochs=args.vae_epochs,
        vae_batch_size=args.batch_size,
        vae_lr=args.lr,
        seed=seed,
    )


def _em_config(args, seed: int) -> ebm.EmTrainConfig:
    return ebm.EmTrainConfig(
        alpha=args.alpha,
        beta=args.beta,
        gamma0=args.gamma0,
        gamma_schedule=args.gamma_schedule,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        hidden=args.hidden,
        depth=args.depth,
        langevin=ebm.LangevinConfig(
            step_size=args.langevin_eps,
            steps=args.langevin_steps,
            init=args.langevin_init,
            seed=seed,
        ),
        seed=seed,
    )


def cmd_train(args) -> int:
    if args.method == "nnpu" and args.prior is None:
        raise CliConfigError("nnpu requires --prior (the class prior)")
    if args.method != "nnpu" and args.prior is not None:
        raise CliConfigError(
            f"{args.method} does not accept --prior; it trains without a class prior"
        )
    corpus = data.load_corpus(args.corpus)
    task = _load_task_for(args, corpus)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data.save_task(task, out_dir / "task.json")

    if args.method == "pude-kde":
        cfg = _kde_config(args, args.seed)
        pipeline = kde.train_pude_kde(task, corpus, cfg)
        model_path = out_dir / "model.puk"
        kde.save_pipeline(pipeline, model_path)
        trace = []
    elif args.method == "pude-em":
        cfg = _em_config(args, args.seed)
        pair, trace = ebm.train_pude_em(task, corpus, cfg)
        model_path = out_dir / "model.pun"
        ebm.save_pair(pair, model_path)
        ebm.write_trace_csv(trace, out_dir / "trace.csv")
    elif args.method == "nnpu":
        cfg = baselines.NnpuConfig(
            class_prior=args.prior,
            hidden=args.hidden,
            depth=args.depth,
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr=args.lr,
            seed=args.seed,
        )
        scorer, trace = baselines.train_nnpu(task, corpus, cfg)
        model_path = out_dir / "model.pun"
        neural.save_nets(model_path, neural.KIND_NET, [scorer.net])
        with open(out_dir / "trace.csv", "w") as fh:
            fh.write("epoch,risk,clamped_steps\n")
            for row in trace:
                fh.write(f"{row['epoch']},{row['risk']!r},{row['clamped_steps']}\n")
    else:
        raise CliConfigError(f"cannot train method {args.method!r} (bm25 has no training)")

    fingerprint = _write_config(
        out_dir,
        {
            "command": "train",
            "method": args.method,
            "config": cfg,
            "seed": args.seed,
            "corpus": str(args.corpus),
            "out": str(out_dir),
        },
    )
    print(f"trained {args.method}: {model_path} (config {fingerprint})")
    return EXIT_OK


def _load_model_scorer(path: Path):
    """Infer the method from the checkpoint and return (method, score_fn)."""
    raw = path.read_bytes()[:4]
    if raw == b"PUK1":
        pipeline = kde.load_pipeline(path)
        return "pude-kde", lambda x: pipeline.score(x)
    if raw == b"PUN1":
        kind, nets = neural.load_nets(path)
        if kind == neural.KIND_ENERGY_PAIR:
            pair = ebm.EnergyPair(g_p=nets[0], g_q=nets[1])
            return "pude-em", lambda x: ebm.score_em(pair, x)
        if kind == neural.KIND_NET:
            scorer = baselines.NnpuScorer(nets[0])
            return "nnpu", lambda x: scorer.score(x)
    raise CliConfigError(f"{path}: not a recognized model checkpoint")


def _scores_for(args, corpus: data.Corpus, task: data.PuTask) -> tuple[str, dict[str, float]]:
    u_sorted = task.u_sorted
    if args.method == "bm25" or (args.model is None and args.tokens):
        tokens = data.load_tokens(args.tokens) if args.tokens else {}
        missing = [d for d in u_sorted + task.lp_sorted if d not in tokens]
        if missing:
            raise CliConfigError(f"bm25 needs --tokens covering LP and U; missing {missing[:3]}")
        index = baselines.Bm25Index.build({d: tokens[d] for d in u_sorted})
        ranked = baselines.bm25_rank(index, [tokens[d] for d in task.lp_sorted])
        return "bm25", dict(ranked)
    if args.model is None:
        raise CliConfigError("need --model CHECKPOINT (or --method bm25 with --tokens)")
    method, score_fn = _load_model_scorer(Path(args.model))
    vec = corpus.vectors_for(u_sorted).astype(np.float64)
    scores = np.atleast_1d(score_fn(vec))
    return method, {d: float(s) for d, s in zip(u_sorted, scores)}


def cmd_eval(args) -> int:
    corpus = data.load_corpus(args.corpus)
    task = _load_task_for(args, corpus)
    method, scores = _scores_for(args, corpus, task)
    ranking = evaluation.rank_ids(scores)
    policy = (
        evaluation.ThresholdPolicy.parse(args.threshold)
        if args.threshold
        else evaluation.DEFAULT_POLICIES.get(
            method, evaluation.ThresholdPolicy("top-count", float(len(task.lp_ids)))
        )
    )
    decided = evaluation.apply_policy(policy, scores, ranking)
    truth_flags = corpus.truth_map()
    truth = {d: truth_flags[d] == data.TRUTH_POSITIVE for d in ranking}
    unknown = [d for d in ranking if truth_flags[d] == data.TRUTH_UNKNOWN]
    if unknown:
        raise CliConfigError(f"corpus lacks truth labels for evaluation: {unknown[:3]}")
    decisions = {d: d in decided for d in ranking}
    metrics = evaluation.f1_score(decisions, truth)
    for k in (10, 20):
        pr = evaluation.precision_recall_at_pct(ranking, truth, k)
        metrics[f"p_at_{k}"] = pr["precision"]
        metrics[f"r_at_{k}"] = pr["recall"]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = _write_config(
        out_dir,
        {
            "command": "eval",
            "method": method,
            "policy": policy.describe(),
            "seed": args.seed,
            "lp": task.lp_sorted,
            "u_size": len(task.u_ids),
            "corpus": str(args.corpus),
            "out": str(out_dir),
        },
    )
    report = evaluation.ScoreReport(
        method=method,
        seed=args.seed,
        policy=policy.describe(),
        records=tuple(
            {
                "id": d,
                "score": scores[d],
                "decision": bool(decisions[d]),
                "truth": "positive" if truth[d] else "negative",
            }
            for d in sorted(scores)
        ),
        ranking=tuple(ranking),
        metrics=metrics,
        lp_size=len(task.lp_ids),
        u_size=len(task.u_ids),
        config_hash=fingerprint,
    )
    evaluation.write_report_jsonl(report, out_dir / "report.jsonl")
    if args.bm25_sweep:
        if method != "bm25":
            raise CliConfigError("--bm25-sweep applies to --method bm25 only")
        sweep = baselines.bm25_f1_sweep(
            ranking, truth, k_min=len(task.lp_ids), k_max=min(5000, len(ranking))
        )
        baselines.write_bm25_sweep_csv(sweep, args.bm25_sweep)
    print(
        f"{method}: F1={metrics['f1']:.4f} P@10%={metrics['p_at_10']:.4f} "
        f"R@10%={metrics['r_at_10']:.4f} -> {out_dir / 'report.jsonl'}"
    )
    return EXIT_OK


def cmd_rank(args) -> int:
    corpus = data.load_corpus(args.corpus)
    task = _load_task_for(args, corpus)
    method, scores = _scores_for(args, corpus, task)
    ranking = evaluation.rank_ids(scores)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("rank,id,score\n")
        for i, doc_id in enumerate(ranking, start=1):
            fh.write(f"{i},{doc_id},{scores[doc_id]!r}\n")
    _write_sidecar_config(
        out,
        {
            "command": "rank",
            "method": method,
            "seed": args.seed,
            "lp": task.lp_sorted,
            "u_size": len(task.u_ids),
            "out": str(out),
        },
    )
    print(f"{method}: wrote ranking of {len(ranking)} docs to {out}")
    return EXIT_OK


def _parse_ratios(text: str) -> tuple[float, ...]:
    if not text:
        return evaluation.RATIO_GRID
    return tuple(float(p) for p in text.replace(",", " ").split())


def cmd_sweep(args) -> int:
    corpus = data.load_corpus(args.corpus)
    rng = np.random.default_rng(args.seed)
    ids = corpus.ids
    if args.u_size >= len(ids):
        raise CliConfigError(f"--u-size must be below the corpus size {len(ids)}")
    u_ids = sorted(rng.permutation(ids)[: args.u_size].tolist())
    pool_ids = sorted(set(corpus.ids_with_truth(data.TRUTH_POSITIVE)) - set(u_ids))
    ratios = _parse_ratios(args.ratios)
    seeds = tuple(int(s) for s in args.seeds.replace(",", " ").split())
    policy = evaluation.ThresholdPolicy.parse(args.threshold) if args.threshold else None
    methods = []
    for name in args.methods.replace(",", " ").split():
        if name == "pude-em":
            methods.append(evaluation.MethodSpec(name, _em_config(args, args.seed)))
        elif name == "pude-kde":
            methods.append(evaluation.MethodSpec(name, _kde_config(args, args.seed)))
        elif name == "nnpu":
            if args.prior is None:
                raise CliConfigError("nnpu in the sweep needs --prior")
            methods.append(
                evaluation.MethodSpec(
                    name,
                    baselines.NnpuConfig(
                        class_prior=args.prior,
                        hidden=args.hidden,
                        depth=args.depth,
                        epochs=args.epochs,
                        batch_size=args.batch_size,
                        lr=args.lr,
                    ),
                )
            )
        else:
            raise CliConfigError(f"sweep cannot run method {name!r}")
    workers = int(os.environ.get("PUDE_THREADS", "1"))
    rows = _sweep_rows(corpus, u_ids, pool_ids, methods, ratios, seeds, policy, workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_sweep_csv(rows, out_dir / "sweep.csv")
    _write_config(
        out_dir,
        {
            "command": "sweep",
            "methods": [m.name for m in methods],
            "ratios": list(ratios),
            "seeds": list(seeds),
            "u_size": args.u_size,
            "seed": args.seed,
            "corpus": str(args.corpus),
            "out": str(out_dir),
        },
    )
    print(f"wrote {len(rows)} sweep rows to {out_dir / 'sweep.csv'}")
    return EXIT_OK


def _sweep_rows(corpus, u_ids, pool_ids, methods, ratios, seeds, policy, workers):
    if workers <= 1:
        return evaluation.run_ratio_sweep(
            corpus, u_ids, pool_ids, methods, ratios, seeds, policy
        )
    # Worker pool over ratios; per-run seeds stay isolated either way.
    from concurrent.futures import ProcessPoolExecutor

    rows = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(
                evaluation.run_ratio_sweep,
                corpus,
                u_ids,
                pool_ids,
                methods,
                (ratio,),
                seeds,
                policy,
            )
            for ratio in ratios
        ]
        for fut in futures:
            rows.extend(fut.result())
    return rows


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bandwidth", type=float, default=kde.DEFAULT_BANDWIDTH)
    p.add_argument("--latent-dim", type=int, default=50)
    p.add_argument("--vae-epochs", type=int, default=20)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma0", type=float, default=1.0)
    p.add_argument(
        "--gamma-schedule",
        choices=["constant", "linear", "exponential"],
        default="linear",
    )
    p.add_argument("--langevin-eps", type=float, default=0.01)
    p.add_argument("--langevin-steps", type=int, default=20)
    p.add_argument(
        "--langevin-init", choices=["noise", "data", "persistent"], default="data"
    )
    p.add_argument("--prior", type=float, default=None,
                   help="class prior (nnpu only; puDE methods reject it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pude",
        description="Expand a seed set of documents through a large unlabeled "
        "collection with prior-free PU scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled two-Gaussian corpus")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--pi", type=float, default=0.5)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pos-mean", default="2,0")
    p.add_argument("--neg-mean", default="-2,0")
    p.add_argument("--pos-std", type=float, default=1.0)
    p.add_argument("--neg-std", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed-check", help="validate a PUE1 corpus file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokens", default=None)
    p.set_defaults(func=cmd_embed_check)

    p = sub.add_parser("train", help="train a scorer on a PU task")
    p.add_argument("--method", required=True, choices=["pude-kde", "pude-em", "nnpu"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", default=None, help="task JSON (else use --lp-count)")
    p.add_argument("--lp-count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score U with a trained model and report metrics")
    p.add_argument("--model", default=None)
    p.add_argument("--method", default=None, choices=[None, "bm25"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", default=None)
    p.add_argument("--lp-count", type=int, default=None)
    p.add_argument("--tokens", default=None)
    p.add_argument("--threshold", default=None,
                   help="fixed-logit[:T] | sigmoid-0.5 | top-fraction:F | top-count:K")
    p.add_argument("--bm25-sweep", default=None, help="write per-K sweep CSV here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="write the score ranking of U as CSV")
    p.add_argument("--model", default=None)
    p.add_argument("--method", default=None, choices=[None, "bm25"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", default=None)
    p.add_argument("--lp-count", type=int, default=None)
    p.add_argument("--tokens", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("sweep", help="F1 across a grid of |LP|/|U| ratios")
    p.add_argument("--corpus", required=True)
    p.add_argument("--u-size", type=int, required=True)
    p.add_argument("--methods", default="pude-kde,pude-em")
    p.add_argument("--ratios", default="", help="space/comma list; default: paper grid")
    p.add_argument("--seeds", default="0")
    p.add_argument("--threshold", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        CliConfigError,
        data.CorpusError,
        data.TaskError,
        evaluation.EvalError,
        ebm.EbmError,
        kde.KdeError,
        baselines.BaselineError,
        neural.NeuralError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures: IO, divergence, sampling
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
