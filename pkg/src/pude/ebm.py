"""Energy-based PU scorer: two energy networks trained by MLE with MCMC.

One network models the energy of the labeled-positive distribution, the
other the energy of the whole collection. Scores are the energy difference
(whole-data energy minus positive energy); the normalizing constants and
the class prior only contribute a constant factor to the underlying density
ratio, so they shift every score equally and never change a ranking.

Maximum-likelihood gradients use the contrastive estimator

    grad = mean_data[dE/dtheta] - mean_model_samples[dE/dtheta]

with model samples drawn by Langevin dynamics

    x_{t+1} = x_t - (eps/2) dE/dx (x_t) + noise,   noise ~ N(0, eps I)

(noise standard deviation sqrt(eps) by default; the std = eps reading is
available via the config). An auxiliary classification risk on the score
with the label status s as target is added with a decaying weight.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import neural
from .data import Corpus, PuTask
from .neural import DenseNet, NeuralError, sigmoid


class EbmError(ValueError):
    """Invalid EBM configuration or query."""


class SamplingError(RuntimeError):
    """Langevin sampling produced a non-finite state."""


@dataclass
class EnergyPair:
    """Energy networks for the positive-data and whole-data densities."""

    g_p: DenseNet
    g_q: DenseNet

    def __post_init__(self):
        if self.g_p.out_dim != 1 or self.g_q.out_dim != 1:
            raise EbmError("energy networks must map to a scalar")
        if self.g_p.in_dim != self.g_q.in_dim:
            raise EbmError("energy networks must share the input dimension")

    @property
    def dim(self) -> int:
        return self.g_p.in_dim


@dataclass(frozen=True)
class LangevinConfig:
    step_size: float = 0.01
    steps: int = 20
    init: str = "data"  # "noise" | "data" | "persistent"
    noise: str = "sqrt-eps"  # noise std sqrt(eps); "eps" uses std = eps
    data_jitter: float = 0.1  # std of the perturbation for "data" init
    buffer_size: int = 8192  # "persistent" only
    seed: int = 0

    def __post_init__(self):
        if not (self.step_size > 0):
            raise EbmError(f"step size must be positive; got {self.step_size}")
        if self.steps < 1:
            raise EbmError(f"need at least one Langevin step; got {self.steps}")
        if self.init not in ("noise", "data", "persistent"):
            raise EbmError(f"unknown init policy {self.init!r}")
        if self.noise not in ("sqrt-eps", "eps"):
            raise EbmError(f"unknown noise reading {self.noise!r}")

    @property
    def noise_std(self) -> float:
        return self.step_size**0.5 if self.noise == "sqrt-eps" else self.step_size


def _gamma_value(gamma0: float, schedule: str, epoch: int, total: int) -> float:
    if schedule == "constant":
        return gamma0
    if schedule == "linear":
        return gamma0 * (1.0 - epoch / total)
    if schedule == "exponential":
        return gamma0 * 0.95**epoch
    raise EbmError(f"unknown gamma schedule {schedule!r}")


@dataclass(frozen=True)
class EmTrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma0: float = 1.0
    gamma_schedule: str = "linear"  # "constant" | "linear" | "exponential"
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    hidden: int = 512
    depth: int = 4  # number of weight layers
    batch_norm: bool = False
    energy_reg: float = 0.0  # optional L2 penalty on energy outputs
    grad_clip: float | None = None
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma0 < 0:
            raise EbmError("loss weights must be nonnegative")
        if self.gamma_schedule not in ("constant", "linear", "exponential"):
            raise EbmError(f"unknown gamma schedule {self.gamma_schedule!r}")
        if self.depth < 1:
            raise EbmError("need at least one layer")


def build_energy_net(dim: int, hidden: int, depth: int, rng: np.random.Generator,
                     batch_norm: bool = False) -> DenseNet:
    dims = [dim] + [hidden] * (depth - 1) + [1]
    return DenseNet.build(dims, rng, batch_norm=batch_norm)


# ---------------------------------------------------------------------------
# Energy evaluation and sampling
# ---------------------------------------------------------------------------


def energy(net, x: np.ndarray) -> float | np.ndarray:
    """Energy of one point (scalar) or of each row of a batch."""
    if isinstance(net, DenseNet):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = neural.forward(net, x, mode="eval")[:, 0]
        return float(out[0]) if single else out
    return net.value(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def energy_input_grad(net, x: np.ndarray) -> np.ndarray:
    """dE/dx for each row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(net, DenseNet):
        _, input_grad = neural.backward(net, x, np.ones((x.shape[0], 1)), mode="eval")
        return input_grad
    return net.grad(x)


def langevin_sample(
    net,
    config: LangevinConfig,
    count: int,
    *,
    init_points: np.ndarray | None = None,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run ``config.steps`` Langevin updates on ``count`` parallel chains.

    ``net`` is a DenseNet or any object with value/grad methods. Chains start
    per the init policy: "noise" draws uniformly inside ``bounds``; "data"
    and "persistent" start from ``init_points`` (a jittered copy for "data",
    verbatim for "persistent" replay states). Deterministic given the rng.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if config.init == "noise":
        if bounds is None:
            raise EbmError("noise init needs data bounds")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        x = lo + (hi - lo) * rng.random((count, lo.shape[0]))
    else:
        if init_points is None:
            raise EbmError(f"{config.init!r} init needs init_points")
        pts = np.atleast_2d(np.asarray(init_points, dtype=np.float64))
        if pts.shape[0] < count:
            picks = rng.integers(pts.shape[0], size=count)
            x = pts[picks].copy()
        else:
            x = pts[:count].copy()
        if config.init == "data":
            x = x + config.data_jitter * rng.standard_normal(x.shape)
    eps = config.step_size
    std = config.noise_std
    for t in range(config.steps):
        grad = energy_input_grad(net, x)
        x = x - 0.5 * eps * grad + std * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite chain state at Langevin step {t}")
    return x


def mle_grad(
    net: DenseNet,
    data_batch: np.ndarray,
    sample_batch: np.ndarray,
) -> list[np.ndarray]:
    """Contrastive estimate of the negative log-likelihood gradient.

    mean parameter gradient of the energy over the data batch minus the mean
    over the model-sample batch. Identical batches cancel exactly.
    """
    data_batch = np.atleast_2d(np.asarray(data_batch, dtype=np.float64))
    sample_batch = np.atleast_2d(np.asarray(sample_batch, dtype=np.float64))
    if data_batch.shape[0] == 0 or sample_batch.shape[0] == 0:
        raise EbmError("both batches must be non-empty")
    if data_batch.shape[1] != sample_batch.shape[1]:
        raise EbmError("data and sample batches must share the dimension")
    n_d, n_s = data_batch.shape[0], sample_batch.shape[0]
    g_data, _ = neural.backward(net, data_batch, np.full((n_d, 1), 1.0 / n_d), mode="eval")
    g_samp, _ = neural.backward(net, sample_batch, np.full((n_s, 1), 1.0 / n_s), mode="eval")
    return [gd - gs for gd, gs in zip(g_data, g_samp)]


def score_em(pair: EnergyPair, x: np.ndarray) -> float | np.ndarray:
    """Whole-data energy minus positive energy; larger means more positive."""
    return energy(pair.g_q, x) - energy(pair.g_p, x)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _clip(grads: list[np.ndarray], limit: float | None) -> list[np.ndarray]:
    if limit is None:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= limit or total == 0.0:
        return grads
    scale = limit / total
    return [g * scale for g in grads]


def train_pude_em(
    task: PuTask,
    corpus: Corpus,
    config: EmTrainConfig | None = None,
) -> tuple[EnergyPair, list[dict]]:
    """Train the energy pair on a PU task; returns the pair and an epoch trace.

    Each step takes one batch of the full collection, draws model samples by
    Langevin dynamics for both networks, applies the contrastive MLE
    gradients (weighted alpha for the positive net, beta for the whole-data
    net), and adds the gamma-weighted classification-risk gradient computed
    on the batch with the label status as target. Gamma follows the decay
    schedule. Fully deterministic given the seed.
    """
    cfg = config or EmTrainConfig()
    missing = task.all_ids() - set(corpus.ids)
    if missing:
        raise EbmError(f"task references {len(missing)} ids missing from the corpus")
    lp_ids = task.lp_sorted
    all_ids = sorted(task.all_ids())
    lp_vec = corpus.vectors_for(lp_ids).astype(np.float64)
    all_vec = corpus.vectors_for(all_ids).astype(np.float64)
    s_flag = np.array([1.0 if d in task.lp_ids else 0.0 for d in all_ids])
    n_all = all_vec.shape[0]
    d = all_vec.shape[1]

    rng = np.random.default_rng(cfg.seed)
    g_p = build_energy_net(d, cfg.hidden, cfg.depth, rng, cfg.batch_norm)
    g_q = build_energy_net(d, cfg.hidden, cfg.depth, rng, cfg.batch_norm)
    pair = EnergyPair(g_p, g_q)
    pstate = neural.AdamState.init(g_p.get_params(), lr=cfg.lr)
    qstate = neural.AdamState.init(g_q.get_params(), lr=cfg.lr)

    bounds = (all_vec.min(axis=0), all_vec.max(axis=0))
    buffers = {}
    if cfg.langevin.init == "persistent":
        size = min(cfg.langevin.buffer_size, max(cfg.batch_size, 256))
        buffers["p"] = lp_vec[rng.integers(lp_vec.shape[0], size=size)].copy()
        buffers["q"] = all_vec[rng.integers(n_all, size=size)].copy()

    def draw_samples(which: str, net: DenseNet, data_batch: np.ndarray) -> np.ndarray:
        count = data_batch.shape[0]
        if cfg.langevin.init == "persistent":
            buf = buffers[which]
            picks = rng.integers(buf.shape[0], size=count)
            out = langevin_sample(
                net, cfg.langevin, count, init_points=buf[picks], rng=rng
            )
            buf[picks] = out
            return out
        return langevin_sample(
            net, cfg.langevin, count, init_points=data_batch, bounds=bounds, rng=rng
        )

    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        gamma = _gamma_value(cfg.gamma0, cfg.gamma_schedule, epoch, cfg.epochs)
        order = rng.permutation(n_all)
        lp_order = rng.permutation(lp_vec.shape[0])
        lp_pos = 0
        sums = {"mle_loss_p": 0.0, "mle_loss_q": 0.0, "risk_loss": 0.0}
        n_steps = 0
        for start in range(0, n_all, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = all_vec[idx]
            s = s_flag[idx]

            # LP batch for the positive net, cycling through a shuffled LP.
            take = min(cfg.batch_size, lp_vec.shape[0])
            if lp_pos + take > lp_vec.shape[0]:
                lp_order = rng.permutation(lp_vec.shape[0])
                lp_pos = 0
            lp_batch = lp_vec[lp_order[lp_pos : lp_pos + take]]
            lp_pos += take

            samples_p = draw_samples("p", g_p, lp_batch)
            samples_q = draw_samples("q", g_q, batch)

            gp_grads = [cfg.alpha * g for g in mle_grad(g_p, lp_batch, samples_p)]
            gq_grads = [cfg.beta * g for g in mle_grad(g_q, batch, samples_q)]

            e_p_data = energy(g_p, lp_batch)
            e_p_samp = energy(g_p, samples_p)
            e_q_data = energy(g_q, batch)
            e_q_samp = energy(g_q, samples_q)
            loss_p = float(np.mean(e_p_data) - np.mean(e_p_samp))
            loss_q = float(np.mean(e_q_data) - np.mean(e_q_samp))

            if cfg.energy_reg > 0:
                # Keeps energies near zero scale; stabilizes long runs.
                for grads, net, batches in (
                    (gp_grads, g_p, (lp_batch, samples_p)),
                    (gq_grads, g_q, (batch, samples_q)),
                ):
                    for b in batches:
                        e = energy(net, b)
                        reg_up = (2.0 * cfg.energy_reg / b.shape[0]) * e[:, None]
                        reg_grads, _ = neural.backward(net, b, reg_up, mode="eval")
                        for i, rg in enumerate(reg_grads):
                            grads[i] = grads[i] + rg

            risk = 0.0
            if gamma > 0.0:
                phi = e_q_data - energy(g_p, batch)
                # Logistic surrogate for the 0-1 risk with target s.
                risk = float(
                    np.mean(np.maximum(phi, 0.0) - phi * s + np.log1p(np.exp(-np.abs(phi))))
                )
                dphi = (sigmoid(phi) - s)[:, None] / batch.shape[0]
                rq_grads, _ = neural.backward(g_q, batch, dphi, mode="eval")
                rp_grads, _ = neural.backward(g_p, batch, -dphi, mode="eval")
                gq_grads = [gq + gamma * rq for gq, rq in zip(gq_grads, rq_grads)]
                gp_grads = [gp + gamma * rp for gp, rp in zip(gp_grads, rp_grads)]

            if not (np.isfinite(loss_p) and np.isfinite(loss_q) and np.isfinite(risk)):
                raise neural.DivergenceError(
                    f"non-finite loss at epoch {epoch}: "
                    f"mle_p={loss_p} mle_q={loss_q} risk={risk}"
                )

            new_p, pstate = neural.adam_step(
                g_p.get_params(), _clip(gp_grads, cfg.grad_clip), pstate
            )
            g_p.set_params(new_p)
            new_q, qstate = neural.adam_step(
                g_q.get_params(), _clip(gq_grads, cfg.grad_clip), qstate
            )
            g_q.set_params(new_q)

            sums["mle_loss_p"] += loss_p
            sums["mle_loss_q"] += loss_q
            sums["risk_loss"] += risk
            n_steps += 1
        trace.append(
            {
                "epoch": epoch,
                "mle_loss_p": sums["mle_loss_p"] / n_steps,
                "mle_loss_q": sums["mle_loss_q"] / n_steps,
                "risk_loss": sums["risk_loss"] / n_steps,
                "gamma": gamma,
            }
        )
    return pair, trace


def write_trace_csv(trace: Sequence[dict], path: str | Path) -> None:
    fields = ["epoch", "mle_loss_p", "mle_loss_q", "risk_loss", "gamma"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row[k] for k in fields})


def save_pair(pair: EnergyPair, path: str | Path) -> None:
    neural.save_nets(path, neural.KIND_ENERGY_PAIR, [pair.g_p, pair.g_q])


def load_pair(path: str | Path) -> EnergyPair:
    kind, nets = neural.load_nets(path)
    if kind != neural.KIND_ENERGY_PAIR or len(nets) != 2:
        raise EbmError(f"{path}: not an energy-pair checkpoint")
    return EnergyPair(g_p=nets[0], g_q=nets[1])
