"""Gaussian kernel density estimation and the KDE density-ratio scorer.

The estimator stores its fit points verbatim and evaluates

    log f(x) = logsumexp_i( -||x - x_i||^2 / (2 h^2) )
               - log n - d log h - (d/2) log(2 pi)

i.e. the isotropic product-Gaussian extension of the averaged-kernel
density. The log-sum-exp path never underflows for finite inputs.

The ratio scorer holds one model fit on the labeled positives and one fit
on the whole collection; its score is the log density ratio. The unknown
class-prior factor is a constant additive shift in log space, so rankings
and threshold families are unaffected by dropping it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural
from .data import Corpus, PuTask

DEFAULT_BANDWIDTH = 1.9
REDUCE_DIM_THRESHOLD = 64

_PUK1_MAGIC = b"PUK1"
_PUK1_VERSION = 1


class KdeError(ValueError):
    """Invalid KDE construction or query."""


@dataclass(frozen=True)
class KdeModel:
    support: np.ndarray  # (n, d) float64, read-only
    bandwidth: float

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.float64)
        if support.ndim != 2 or support.shape[0] < 1:
            raise KdeError("support must be a non-empty (n, d) matrix")
        if not np.all(np.isfinite(support)):
            raise KdeError("support points must be finite")
        if not (self.bandwidth > 0):
            raise KdeError(f"bandwidth must be positive; got {self.bandwidth}")
        support = support.copy()
        support.setflags(write=False)
        object.__setattr__(self, "support", support)

    @property
    def n(self) -> int:
        return self.support.shape[0]

    @property
    def dim(self) -> int:
        return self.support.shape[1]


def fit(points: np.ndarray, bandwidth: float = DEFAULT_BANDWIDTH) -> KdeModel:
    """Store the points; KDE is lazy, there is nothing to train."""
    return KdeModel(np.asarray(points, dtype=np.float64), float(bandwidth))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def log_density(model: KdeModel, x: np.ndarray) -> float | np.ndarray:
    """Log of the kernel density estimate at x (a vector or an (m, d) batch)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.dim:
        raise KdeError(f"query dimension {x.shape[1]} != model dimension {model.dim}")
    h = model.bandwidth
    d = model.dim
    # Squared distances query-vs-support without materializing differences.
    sq = (
        (x**2).sum(axis=1)[:, None]
        - 2.0 * x @ model.support.T
        + (model.support**2).sum(axis=1)[None, :]
    )
    np.maximum(sq, 0.0, out=sq)
    log_kernel = -sq / (2.0 * h * h)
    out = (
        _logsumexp(log_kernel, axis=1)
        - np.log(model.n)
        - d * np.log(h)
        - 0.5 * d * np.log(2.0 * np.pi)
    )
    return float(out[0]) if single else out


@dataclass(frozen=True)
class KdeRatioScorer:
    """log f_p - log f, with f_p fit on LP and f fit on the whole collection."""

    p_model: KdeModel
    q_model: KdeModel
    shared_bandwidth: bool = True

    def __post_init__(self):
        if self.p_model.dim != self.q_model.dim:
            raise KdeError("both models must share one dimension")
        if self.shared_bandwidth and self.p_model.bandwidth != self.q_model.bandwidth:
            raise KdeError("shared_bandwidth set but bandwidths differ")


def ratio_score(scorer: KdeRatioScorer, x: np.ndarray) -> float | np.ndarray:
    """Log density ratio; positive means more positive-like than typical."""
    return log_density(scorer.p_model, x) - log_density(scorer.q_model, x)


# ---------------------------------------------------------------------------
# Full scoring pipeline (VAE reduction + ratio scorer)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KdeConfig:
    bandwidth: float = DEFAULT_BANDWIDTH
    latent_dim: int = 50
    reduce_threshold: int = REDUCE_DIM_THRESHOLD
    vae_hidden: int = 256
    vae_epochs: int = 20
    vae_batch_size: int = 128
    vae_lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class KdePipeline:
    """Optional VAE reduction followed by the KDE ratio scorer."""

    scorer: KdeRatioScorer
    vae: neural.VaeModel | None = None

    def reduce(self, x: np.ndarray) -> np.ndarray:
        if self.vae is None:
            return np.asarray(x, dtype=np.float64)
        return neural.encode(self.vae, x)

    def score(self, x: np.ndarray) -> float | np.ndarray:
        return ratio_score(self.scorer, self.reduce(x))


def train_pude_kde(task: PuTask, corpus: Corpus, config: KdeConfig | None = None) -> KdePipeline:
    """Fit the KDE ratio scorer for a task, reducing dimension first if needed.

    High-dimensional corpora (d above the reduce threshold) are compressed
    with a VAE trained on all vectors of the run — LP and U alike, no labels
    involved — and both densities are then estimated in the latent space
    with the shared bandwidth.
    """
    cfg = config or KdeConfig()
    missing = task.all_ids() - set(corpus.ids)
    if missing:
        raise KdeError(f"task references {len(missing)} ids missing from the corpus")
    all_ids = sorted(task.all_ids())
    all_vec = corpus.vectors_for(all_ids).astype(np.float64)
    vae = None
    if corpus.dim > cfg.reduce_threshold:
        vae, _ = neural.train_vae(
            all_vec,
            neural.VaeConfig(
                latent_dim=cfg.latent_dim,
                hidden=cfg.vae_hidden,
                epochs=cfg.vae_epochs,
                batch_size=cfg.vae_batch_size,
                lr=cfg.vae_lr,
                seed=cfg.seed,
            ),
        )
        all_vec = neural.encode(vae, all_vec)
    row_of = {doc_id: i for i, doc_id in enumerate(all_ids)}
    lp_rows = [row_of[d] for d in task.lp_sorted]
    p_model = fit(all_vec[lp_rows], cfg.bandwidth)
    q_model = fit(all_vec, cfg.bandwidth)
    return KdePipeline(KdeRatioScorer(p_model, q_model), vae)


# ---------------------------------------------------------------------------
# PUK1 checkpoints
# ---------------------------------------------------------------------------


def _write_kde_block(fh, model: KdeModel) -> None:
    fh.write(struct.pack("<IQd", model.dim, model.n, model.bandwidth))
    fh.write(model.support.astype("<f8", copy=False).tobytes())


def save_pipeline(pipeline: KdePipeline, path: str | Path) -> None:
    """PUK1 file: magic, version, vae flag, [vae nets], p block, q block."""
    with open(path, "wb") as fh:
        fh.write(_PUK1_MAGIC)
        has_vae = pipeline.vae is not None
        fh.write(struct.pack("<IB", _PUK1_VERSION, 1 if has_vae else 0))
        if has_vae:
            neural._write_net(fh, pipeline.vae.encoder)
            neural._write_net(fh, pipeline.vae.decoder)
        _write_kde_block(fh, pipeline.scorer.p_model)
        _write_kde_block(fh, pipeline.scorer.q_model)


def load_pipeline(path: str | Path) -> KdePipeline:
    data = Path(path).read_bytes()
    if data[:4] != _PUK1_MAGIC:
        raise KdeError(f"{path}: not a PUK1 checkpoint")
    r = neural._Reader(data, 4)
    version, has_vae = r.unpack("<IB")
    if version != _PUK1_VERSION:
        raise KdeError(f"{path}: unsupported PUK1 version {version}")
    vae = None
    if has_vae:
        enc = neural._read_net(r)
        dec = neural._read_net(r)
        vae = neural.VaeModel(encoder=enc, decoder=dec)
    models = []
    for _ in range(2):
        dim, n, bandwidth = r.unpack("<IQd")
        support = r.array(n * dim).reshape(n, dim)
        models.append(KdeModel(support, bandwidth))
    shared = models[0].bandwidth == models[1].bandwidth
    return KdePipeline(KdeRatioScorer(models[0], models[1], shared), vae)
