"""Small dense networks with hand-written backprop, the (conditional) VAE built
from them, Adam, and JSON checkpoints. Everything is float64."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT = "violin-hpr-vae"
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.1


class CheckpointError(ValueError):
    pass


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)

    @property
    def shape(self):
        return self.weights.shape


@dataclass
class MlpParams:
    layers: list
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if not 0.0 < self.slope < 1.0:
            raise ValueError("leaky slope must be in (0, 1)")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.weights.shape[1] != a.weights.shape[0]:
                raise ValueError("layer dimensions do not chain")

    @property
    def dims(self) -> list:
        return [self.layers[0].weights.shape[1]] + [l.weights.shape[0] for l in self.layers]

    def arrays(self) -> list:
        out = []
        for l in self.layers:
            out += [l.weights, l.bias]
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(dims: Sequence[int], rng: np.random.Generator, slope: float = LEAKY_SLOPE) -> MlpParams:
    """He-style weights for the rectified layers; unit-gain scaling for the linear output layer."""
    layers = []
    last = len(dims) - 2
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        gain = 1.0 if i == last else 2.0 / (1.0 + slope**2)
        scale = np.sqrt(gain / n_in)
        layers.append(DenseLayer(rng.normal(0.0, scale, (n_out, n_in)), np.zeros(n_out)))
    return MlpParams(layers, slope)


def _leaky(u, a):
    return np.where(u > 0, u, a * u)


def mlp_forward(params: MlpParams, x):
    """Affine layers with leaky ReLU between them; the last layer is linear.

    ``x`` is (batch, in). The cache holds each layer's input and
    pre-activation for :func:`mlp_backward`.
    """
    h = np.asarray(x, dtype=float)
    if h.ndim != 2 or h.shape[1] != params.layers[0].weights.shape[1]:
        raise ValueError(f"input has shape {h.shape}, expected (batch, {params.layers[0].weights.shape[1]})")
    cache = []
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        u = h @ layer.weights.T + layer.bias
        cache.append((h, u))
        h = u if i == last else _leaky(u, params.slope)
    return h, cache


def mlp_backward(params: MlpParams, cache, grad_out):
    """Gradients ``[(dW, db), ...]`` and the gradient with respect to the input."""
    g = np.asarray(grad_out, dtype=float)
    grads = [None] * len(params.layers)
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        h, u = cache[i]
        if i != last:
            g = g * np.where(u > 0, 1.0, params.slope)
        layer = params.layers[i]
        grads[i] = (g.T @ h, g.sum(axis=0))
        g = g @ layer.weights
    return grads, g


# ---------------------------------------------------------------- VAE

@dataclass
class VaeParams:
    encoder: MlpParams   # emits [mu, logvar]
    decoder: MlpParams
    latent_dim: int = 32
    beta: float = 1e-3
    cond_dim: int = 0

    @property
    def x_dim(self) -> int:
        return self.encoder.dims[0] - self.cond_dim

    def arrays(self) -> list:
        return self.encoder.arrays() + self.decoder.arrays()

    def n_params(self) -> int:
        return self.encoder.n_params() + self.decoder.n_params()


def init_vae(x_dim: int, cond_dim: int, rng: np.random.Generator, latent_dim: int = 32,
             hidden: Sequence[int] = (64, 48), beta: float = 1e-3, slope: float = LEAKY_SLOPE) -> VaeParams:
    enc = init_mlp([x_dim + cond_dim, *hidden, 2 * latent_dim], rng, slope)
    # start from unit posterior variance; large initial log-variances make
    # exp(logvar) overflow the KL term on unbounded inputs
    enc.layers[-1].weights[latent_dim:] = 0.0
    dec = init_mlp([latent_dim + cond_dim, *reversed(hidden), x_dim], rng, slope)
    return VaeParams(enc, dec, latent_dim, beta, cond_dim)


def reparam_sample(mu, logvar, rng: np.random.Generator):
    mu = np.asarray(mu, dtype=float)
    eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * np.asarray(logvar, dtype=float)) * eps


def vae_loss(x_hat, x, mu, logvar, beta: float):
    """(total, mse, kl): mse over every entry, kl averaged over the batch."""
    x_hat, x = np.asarray(x_hat, dtype=float), np.asarray(x, dtype=float)
    if x_hat.shape != x.shape:
        raise ValueError("reconstruction and target shapes differ")
    mse = float(np.mean((x_hat - x) ** 2))
    lv = np.asarray(logvar, dtype=float)
    kl = float(np.mean(0.5 * np.sum(np.asarray(mu) ** 2 + np.exp(lv) - lv - 1.0, axis=1)))
    return mse + beta * kl, mse, kl


def _join(x, cond):
    if cond is None or np.size(cond) == 0:
        return np.asarray(x, dtype=float)
    return np.hstack([x, cond])


@dataclass
class VaeForward:
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray
    x_hat: np.ndarray
    enc_cache: list
    dec_cache: list


def vae_encode(vae: VaeParams, x, cond=None):
    h, _ = mlp_forward(vae.encoder, _join(x, cond))
    return h[:, :vae.latent_dim], h[:, vae.latent_dim:]


def vae_decode(vae: VaeParams, z, cond=None):
    out, _ = mlp_forward(vae.decoder, _join(z, cond))
    return out


def vae_forward(vae: VaeParams, x, cond=None, rng: Optional[np.random.Generator] = None,
                eps=None) -> VaeForward:
    """Encode, sample (``eps`` given, drawn from ``rng``, or zero), decode."""
    h, enc_cache = mlp_forward(vae.encoder, _join(x, cond))
    mu, lv = h[:, :vae.latent_dim], h[:, vae.latent_dim:]
    if eps is None:
        eps = rng.standard_normal(mu.shape) if rng is not None else np.zeros_like(mu)
    z = mu + np.exp(0.5 * lv) * eps
    x_hat, dec_cache = mlp_forward(vae.decoder, _join(z, cond))
    return VaeForward(mu, lv, eps, z, x_hat, enc_cache, dec_cache)


def vae_backward(vae: VaeParams, fwd: VaeForward, x, beta: Optional[float] = None,
                 include_kl: bool = True) -> list:
    """Gradients of :func:`vae_loss` for all encoder then decoder arrays (flat list)."""
    beta = vae.beta if beta is None else beta
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    d_xhat = 2.0 * (fwd.x_hat - x) / x.size
    dec_grads, d_in = mlp_backward(vae.decoder, fwd.dec_cache, d_xhat)
    dz = d_in[:, :vae.latent_dim]
    std = np.exp(0.5 * fwd.logvar)
    d_mu = dz.copy()
    d_lv = dz * fwd.eps * 0.5 * std
    if include_kl and beta != 0.0:
        d_mu += beta * fwd.mu / n
        d_lv += beta * 0.5 * (np.exp(fwd.logvar) - 1.0) / n
    enc_grads, _ = mlp_backward(vae.encoder, fwd.enc_cache, np.hstack([d_mu, d_lv]))
    flat = []
    for dw, db in enc_grads + dec_grads:
        flat += [dw, db]
    return flat


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, arrays: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- checkpoints

def _mlp_to_dict(p: MlpParams) -> dict:
    return {"slope": p.slope,
            "layers": [{"weights": l.weights.tolist(), "bias": l.bias.tolist()} for l in p.layers]}


def _mlp_from_dict(d: dict) -> MlpParams:
    layers = [DenseLayer(np.array(l["weights"], dtype=float).reshape(len(l["weights"]), -1),
                         np.array(l["bias"], dtype=float)) for l in d["layers"]]
    return MlpParams(layers, float(d["slope"]))


def checkpoint_dict(vae: VaeParams, adam: Optional[AdamState] = None, rng_state=None, extra=None) -> dict:
    d = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "latent_dim": vae.latent_dim,
        "beta": vae.beta,
        "cond_dim": vae.cond_dim,
        "encoder_dims": vae.encoder.dims,
        "decoder_dims": vae.decoder.dims,
        "encoder": _mlp_to_dict(vae.encoder),
        "decoder": _mlp_to_dict(vae.decoder),
        "adam": None,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    if adam is not None:
        d["adam"] = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                     "m": [a.tolist() for a in adam.m], "v": [a.tolist() for a in adam.v]}
    return d


def save_checkpoint(path, vae: VaeParams, adam: Optional[AdamState] = None, rng_state=None, extra=None) -> None:
    """Canonical JSON (sorted keys, shortest round-trip floats): re-saving is byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(checkpoint_dict(vae, adam, rng_state, extra), sort_keys=True, separators=(",", ":"))
    path.write_text(text + "\n")


def load_checkpoint(path):
    """Returns ``(vae, adam_or_None, rng_state, extra)``."""
    try:
        d = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {d.get('version')} != {CHECKPOINT_VERSION}")
    try:
        enc = _mlp_from_dict(d["encoder"])
        dec = _mlp_from_dict(d["decoder"])
        vae = VaeParams(enc, dec, int(d["latent_dim"]), float(d["beta"]), int(d["cond_dim"]))
        if (enc.dims != d["encoder_dims"] or dec.dims != d["decoder_dims"]
                or enc.dims[-1] != 2 * vae.latent_dim or dec.dims[0] != vae.latent_dim + vae.cond_dim):
            raise CheckpointError(f"{path}: stored dimensions disagree with the weights")
        adam = None
        if d["adam"] is not None:
            a = d["adam"]
            shapes = [x.shape for x in vae.arrays()]
            adam = AdamState([np.array(x, dtype=float).reshape(s) for x, s in zip(a["m"], shapes)],
                             [np.array(x, dtype=float).reshape(s) for x, s in zip(a["v"], shapes)],
                             int(a["t"]), float(a["lr"]), float(a["beta1"]), float(a["beta2"]), float(a["eps"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return vae, adam, d.get("rng_state"), d.get("extra", {})
