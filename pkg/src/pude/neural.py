"""Minimal dense-network engine: forward/backward, Adam, and a small VAE.

Everything runs in float64 numpy so analytic gradients can be checked
against central finite differences at tight tolerances. Layers are
linear -> (optional batch norm) -> activation, with leaky ReLU (slope 0.01)
or identity activations. No autograd: backward passes are hand-derived.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

LEAKY_SLOPE = 0.01

ACT_IDENTITY = "identity"
ACT_LEAKY_RELU = "leaky-relu"
_ACT_TAGS = {ACT_IDENTITY: 0, ACT_LEAKY_RELU: 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}

_PUN1_MAGIC = b"PUN1"
_PUN1_VERSION = 1
KIND_NET = 0
KIND_VAE = 1
KIND_ENERGY_PAIR = 2


class NeuralError(ValueError):
    """Shape mismatch or invalid network configuration."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or state."""


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def identity(cls, width: int, momentum: float = 0.1) -> "BatchNorm":
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
        )


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = ACT_LEAKY_RELU
    bn: BatchNorm | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise NeuralError("layer weight must be (out, in) with bias (out,)")
        if self.activation not in _ACT_TAGS:
            raise NeuralError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise NeuralError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class DenseNet:
    """A fixed feed-forward chain of dense layers."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise NeuralError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise NeuralError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def build(
        cls,
        dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = ACT_LEAKY_RELU,
        output_activation: str = ACT_IDENTITY,
        batch_norm: bool = False,
    ) -> "DenseNet":
        """He-initialized chain dims[0] -> dims[1] -> ... -> dims[-1].

        Batch norm, when requested, is applied on hidden layers only.
        """
        if len(dims) < 2:
            raise NeuralError("need an input and an output dimension")
        layers = []
        last = len(dims) - 2
        for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            w = rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)
            act = output_activation if i == last else hidden_activation
            bn = BatchNorm.identity(d_out) if (batch_norm and i != last) else None
            layers.append(Layer(w, np.zeros(d_out), act, bn))
        return cls(layers)

    # Parameter order per layer: weight, bias, then gamma, beta when present.
    def get_params(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
            if layer.bn is not None:
                params.append(layer.bn.gamma)
                params.append(layer.bn.beta)
        return params

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        it = iter(params)
        for layer in self.layers:
            layer.weight = np.asarray(next(it), dtype=np.float64)
            layer.bias = np.asarray(next(it), dtype=np.float64)
            if layer.bn is not None:
                layer.bn.gamma = np.asarray(next(it), dtype=np.float64)
                layer.bn.beta = np.asarray(next(it), dtype=np.float64)
        rest = list(it)
        if rest:
            raise NeuralError(f"{len(rest)} unused parameter arrays")

    def copy(self) -> "DenseNet":
        layers = []
        for l in self.layers:
            bn = None
            if l.bn is not None:
                bn = BatchNorm(
                    l.bn.gamma.copy(),
                    l.bn.beta.copy(),
                    l.bn.running_mean.copy(),
                    l.bn.running_var.copy(),
                    l.bn.momentum,
                    l.bn.eps,
                )
            layers.append(Layer(l.weight.copy(), l.bias.copy(), l.activation, bn))
        return DenseNet(layers)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == ACT_IDENTITY:
        return z
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == ACT_IDENTITY:
        return np.ones_like(z)
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


def _check_batch(net: DenseNet, batch: np.ndarray, mode: str) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise NeuralError(f"mode must be 'train' or 'eval'; got {mode!r}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != net.in_dim:
        raise NeuralError(
            f"batch shape {batch.shape} incompatible with input dim {net.in_dim}"
        )
    if batch.shape[0] < 1:
        raise NeuralError("batch must contain at least one row")
    return batch


def forward_cached(
    net: DenseNet, batch: np.ndarray, mode: str, update_stats: bool
) -> tuple[np.ndarray, list[dict]]:
    x = batch
    caches = []
    for layer in net.layers:
        z = x @ layer.weight.T + layer.bias
        cache = {"x": x, "z": z}
        if layer.bn is not None:
            bn = layer.bn
            if mode == "train":
                if z.shape[0] < 2:
                    raise NeuralError("train-mode batch norm needs a batch of >= 2")
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    m = bn.momentum
                    bn.running_mean = (1 - m) * bn.running_mean + m * mean
                    bn.running_var = (1 - m) * bn.running_var + m * var
            else:
                mean = bn.running_mean
                var = bn.running_var
            inv_std = 1.0 / np.sqrt(var + bn.eps)
            z_hat = (z - mean) * inv_std
            pre_act = bn.gamma * z_hat + bn.beta
            cache.update(z_hat=z_hat, inv_std=inv_std, pre_act=pre_act)
        else:
            pre_act = z
            cache["pre_act"] = pre_act
        x = _activate(pre_act, layer.activation)
        caches.append(cache)
    return x, caches


def forward(net: DenseNet, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Run the network. Train mode updates batch-norm running statistics."""
    batch = _check_batch(net, batch, mode)
    out, _ = forward_cached(net, batch, mode, update_stats=(mode == "train"))
    return out


def backward_cached(
    net: DenseNet,
    caches: list[dict],
    upstream: np.ndarray,
    mode: str,
) -> tuple[list[np.ndarray], np.ndarray]:
    grads_rev: list[np.ndarray] = []
    delta = upstream
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        delta = delta * _activate_grad(cache["pre_act"], layer.activation)
        if layer.bn is not None:
            bn = layer.bn
            z_hat = cache["z_hat"]
            dgamma = (delta * z_hat).sum(axis=0)
            dbeta = delta.sum(axis=0)
            if mode == "train":
                dz_hat = delta * bn.gamma
                # d/dz of the batch-statistics normalization.
                delta = cache["inv_std"] * (
                    dz_hat
                    - dz_hat.mean(axis=0)
                    - z_hat * (dz_hat * z_hat).mean(axis=0)
                )
            else:
                delta = delta * bn.gamma * cache["inv_std"]
            grads_rev.append(dbeta)
            grads_rev.append(dgamma)
        x = cache["x"]
        dw = delta.T @ x
        db = delta.sum(axis=0)
        grads_rev.append(db)
        grads_rev.append(dw)
        delta = delta @ layer.weight
    return list(reversed(grads_rev)), delta


def backward(
    net: DenseNet,
    batch: np.ndarray,
    upstream: np.ndarray,
    mode: str = "eval",
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of sum(upstream * output) w.r.t. parameters and input.

    Returns (parameter gradients in ``get_params`` order, input gradient).
    Running batch-norm statistics are left untouched.
    """
    batch = _check_batch(net, batch, mode)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        # One gradient per row for scalar outputs, else a single-sample gradient.
        upstream = upstream[:, None] if net.out_dim == 1 else upstream[None, :]
    if upstream.shape != (batch.shape[0], net.out_dim):
        raise NeuralError(
            f"upstream shape {upstream.shape} incompatible with output "
            f"({batch.shape[0]}, {net.out_dim})"
        )
    _, caches = forward_cached(net, batch, mode, update_stats=False)
    return backward_cached(net, caches, upstream, mode)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
            lr=lr,
            **kw,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Functional: returns new params/state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise NeuralError("params, grads and state must have matching lengths")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise NeuralError(f"gradient shape {g.shape} != param shape {p.shape}")
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------------------
# VAE for dimensionality reduction
# ---------------------------------------------------------------------------


@dataclass
class VaeModel:
    """Diagonal-Gaussian VAE; encoder emits (mean, log-variance) stacked."""

    encoder: DenseNet
    decoder: DenseNet

    def __post_init__(self):
        if self.encoder.out_dim != 2 * self.decoder.in_dim:
            raise NeuralError(
                "encoder must emit 2 * latent dim (mean and log-variance)"
            )
        if self.decoder.out_dim != self.encoder.in_dim:
            raise NeuralError("decoder must map back to the input dimension")

    @property
    def latent_dim(self) -> int:
        return self.decoder.in_dim

    @property
    def input_dim(self) -> int:
        return self.encoder.in_dim


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 50
    hidden: int = 256
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0


def gaussian_kl(mean: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-sample KL(q(z|x) || N(0, I)) for a diagonal Gaussian posterior.

    0.5 * sum_j (mu_j^2 + sigma_j^2 - 1 - log sigma_j^2); each summand is
    nonnegative, so the KL is too.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    return 0.5 * (mean**2 + np.exp(logvar) - 1.0 - logvar).sum(axis=1)


def encode(vae: VaeModel, x: np.ndarray) -> np.ndarray:
    """Posterior mean (no sampling), so downstream scores are deterministic."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = forward(vae.encoder, x, mode="eval")
    mean = out[:, : vae.latent_dim]
    return mean[0] if single else mean


def train_vae(
    vectors: np.ndarray, config: VaeConfig
) -> tuple[VaeModel, list[dict]]:
    """Maximize the ELBO (negated reconstruction SSE plus negated KL) by Adam.

    Reconstruction is squared error summed over dimensions, averaged over the
    batch; KL is the closed diagonal-Gaussian form. Returns the model and a
    per-epoch trace of both terms.
    """
    x_all = np.asarray(vectors, dtype=np.float64)
    if x_all.ndim != 2 or x_all.shape[0] == 0:
        raise NeuralError("training data must be a non-empty (n, d) matrix")
    n, d = x_all.shape
    if config.latent_dim >= d:
        raise NeuralError(
            f"latent dim {config.latent_dim} must be smaller than input dim {d}"
        )
    rng = np.random.default_rng(config.seed)
    enc = DenseNet.build([d, config.hidden, 2 * config.latent_dim], rng)
    dec = DenseNet.build([config.latent_dim, config.hidden, d], rng)
    vae = VaeModel(enc, dec)
    params = enc.get_params() + dec.get_params()
    n_enc = len(enc.get_params())
    state = AdamState.init(params, lr=config.lr)
    L = config.latent_dim
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        recon_sum = 0.0
        kl_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = x_all[idx]
            bs = x.shape[0]

            enc_out, enc_caches = forward_cached(enc, x, "eval", False)
            mean, logvar = enc_out[:, :L], enc_out[:, L:]
            noise = rng.standard_normal((bs, L))
            std = np.exp(0.5 * logvar)
            z = mean + std * noise
            x_hat, dec_caches = forward_cached(dec, z, "eval", False)

            resid = x_hat - x
            recon = (resid**2).sum(axis=1).mean()
            kl = gaussian_kl(mean, logvar).mean()
            loss = recon + kl
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"VAE loss diverged at epoch {epoch} (recon={recon}, kl={kl})"
                )
            recon_sum += recon * bs
            kl_sum += kl * bs

            d_xhat = 2.0 * resid / bs
            dec_grads, dz = backward_cached(dec, dec_caches, d_xhat, "eval")
            d_mean = dz + mean / bs
            d_logvar = dz * noise * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / bs
            enc_grads, _ = backward_cached(
                enc, enc_caches, np.concatenate([d_mean, d_logvar], axis=1), "eval"
            )
            params, state = adam_step(params, enc_grads + dec_grads, state)
            enc.set_params(params[:n_enc])
            dec.set_params(params[n_enc:])
        trace.append(
            {"epoch": epoch, "recon": recon_sum / n, "kl": kl_sum / n}
        )
    return vae, trace


# ---------------------------------------------------------------------------
# PUN1 checkpoints
# ---------------------------------------------------------------------------


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(arr.astype("<f8", copy=False).tobytes())


def _write_net(fh, net: DenseNet) -> None:
    fh.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        fh.write(
            struct.pack(
                "<IIBB",
                layer.in_dim,
                layer.out_dim,
                _ACT_TAGS[layer.activation],
                1 if layer.bn is not None else 0,
            )
        )
        _write_array(fh, layer.weight)
        _write_array(fh, layer.bias)
        if layer.bn is not None:
            fh.write(struct.pack("<dd", layer.bn.momentum, layer.bn.eps))
            for arr in (
                layer.bn.gamma,
                layer.bn.beta,
                layer.bn.running_mean,
                layer.bn.running_var,
            ):
                _write_array(fh, arr)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.off = offset

    def unpack(self, fmt: str):
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def array(self, count: int) -> np.ndarray:
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.off)
        self.off += 8 * count
        return arr.astype(np.float64)


def _read_net(r: _Reader) -> DenseNet:
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        d_in, d_out, act_tag, has_bn = r.unpack("<IIBB")
        if act_tag not in _TAG_ACTS:
            raise NeuralError(f"unknown activation tag {act_tag}")
        w = r.array(d_out * d_in).reshape(d_out, d_in)
        b = r.array(d_out)
        bn = None
        if has_bn:
            momentum, eps = r.unpack("<dd")
            bn = BatchNorm(
                gamma=r.array(d_out),
                beta=r.array(d_out),
                running_mean=r.array(d_out),
                running_var=r.array(d_out),
                momentum=momentum,
                eps=eps,
            )
        layers.append(Layer(w, b, _TAG_ACTS[act_tag], bn))
    return DenseNet(layers)


def save_nets(path: str | Path, kind: int, nets: Sequence[DenseNet]) -> None:
    """Write a PUN1 checkpoint: header, kind tag, then the net blocks."""
    with open(path, "wb") as fh:
        fh.write(_PUN1_MAGIC)
        fh.write(struct.pack("<IBI", _PUN1_VERSION, kind, len(nets)))
        for net in nets:
            _write_net(fh, net)


def load_nets(path: str | Path) -> tuple[int, list[DenseNet]]:
    data = Path(path).read_bytes()
    if data[:4] != _PUN1_MAGIC:
        raise NeuralError(f"{path}: not a PUN1 checkpoint")
    r = _Reader(data, 4)
    version, kind, count = r.unpack("<IBI")
    if version != _PUN1_VERSION:
        raise NeuralError(f"{path}: unsupported PUN1 version {version}")
    nets = [_read_net(r) for _ in range(count)]
    return kind, nets


def save_vae(vae: VaeModel, path: str | Path) -> None:
    save_nets(path, KIND_VAE, [vae.encoder, vae.decoder])


def load_vae(path: str | Path) -> VaeModel:
    kind, nets = load_nets(path)
    if kind != KIND_VAE or len(nets) != 2:
        raise NeuralError(f"{path}: not a VAE checkpoint")
    return VaeModel(encoder=nets[0], decoder=nets[1])
