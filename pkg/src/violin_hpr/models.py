"""The three envelope-modelling architectures, their training and reconstruction.

* INet: a harmonic (C)VAE on ``cc_h`` and a residual VAE on ``cc_r``.
* ConcatNet: one (C)VAE on ``[cc_h, cc_r]``.
* JNet: two (C)VAEs on the sum and difference of the zero-padded vectors.

All networks see standardized coefficients (train-split mean and std per
entry); reconstruction MSE is measured in that same space.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .envelope import HARMONIC_WIDTH, K_RESIDUAL, choose_k_harmonic
from .nn import (AdamState, VaeParams, adam_step, init_vae, load_checkpoint, save_checkpoint,
                 vae_backward, vae_decode, vae_encode, vae_forward, vae_loss)

KINDS = ("INet", "ConcatNet", "JNet")
COMMON_WIDTH = max(HARMONIC_WIDTH, K_RESIDUAL)
BUNDLE_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, network: str, epoch: int, loss: float):
        self.network, self.epoch, self.loss = network, epoch, loss
        super().__init__(f"network {network!r} diverged at epoch {epoch} (loss {loss})")


@dataclass
class ArchSpec:
    kind: str = "INet"
    condition_on_f0: bool = True
    latent_dim: int = 32
    beta: float = 1e-3
    epochs: int = 2000
    batch_size: int = 512
    lr: float = 1e-3
    hidden: tuple = (64, 48)
    condition_residual: bool = False
    f0_min_hz: float = 120.0
    f0_max_hz: float = 1300.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    def networks(self) -> list:
        return {"INet": ["harmonic", "residual"], "ConcatNet": ["concat"], "JNet": ["sum", "diff"]}[self.kind]

    def conditioned(self, net: str) -> bool:
        if net == "residual":
            return self.condition_residual
        return self.condition_on_f0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def f0_condition(f0_hz, f0_min: float = 120.0, f0_max: float = 1300.0) -> np.ndarray:
    """log2(f0 / f0_min) scaled so the analysis range maps to [0, 1]; shape (n, 1)."""
    f0 = np.asarray(f0_hz, dtype=float).reshape(-1, 1)
    return np.log2(f0 / f0_min) / np.log2(f0_max / f0_min)


@dataclass
class NormStats:
    mean_h: np.ndarray
    std_h: np.ndarray
    mean_r: np.ndarray
    std_r: np.ndarray

    @staticmethod
    def _guard(s):
        return np.where(s > 1e-12, s, 1.0)

    @classmethod
    def fit(cls, cc_h, cc_r) -> "NormStats":
        return cls(cc_h.mean(axis=0), cls._guard(cc_h.std(axis=0)), cc_r.mean(axis=0), cls._guard(cc_r.std(axis=0)))

    def norm_h(self, cc_h):
        return (cc_h - self.mean_h) / self.std_h

    def norm_r(self, cc_r):
        return (cc_r - self.mean_r) / self.std_r

    def denorm_h(self, z):
        return z * self.std_h + self.mean_h

    def denorm_r(self, z):
        return z * self.std_r + self.mean_r

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(*(np.array(d[k], dtype=float) for k in ("mean_h", "std_h", "mean_r", "std_r")))


def _pad(a, width):
    out = np.zeros((a.shape[0], width))
    out[:, :a.shape[1]] = a
    return out


def harmonic_valid_mask(f0_hz, sample_rate_hz: float = 44100.0) -> np.ndarray:
    """True where a cc_h entry lies below its frame's K_H."""
    k = np.array([choose_k_harmonic(f, sample_rate_hz) for f in np.atleast_1d(f0_hz)])
    return np.arange(HARMONIC_WIDTH)[None, :] < k[:, None]


def assemble_inputs(f0_hz, h_n, r_n, arch: ArchSpec) -> dict:
    """Network inputs ``{name: (x, condition)}`` from normalized cc_h and cc_r.

    The condition is an (n, 0) array for unconditioned networks.
    """
    n = h_n.shape[0]
    cond = f0_condition(f0_hz, arch.f0_min_hz, arch.f0_max_hz)
    empty = np.zeros((n, 0))
    out = {}
    if arch.kind == "INet":
        out["harmonic"] = (h_n, cond if arch.conditioned("harmonic") else empty)
        out["residual"] = (r_n, cond if arch.conditioned("residual") else empty)
    elif arch.kind == "ConcatNet":
        out["concat"] = (np.hstack([h_n, r_n]), cond if arch.condition_on_f0 else empty)
    else:
        hp, rp = _pad(h_n, COMMON_WIDTH), _pad(r_n, COMMON_WIDTH)
        c = cond if arch.condition_on_f0 else empty
        out["sum"] = (hp + rp, c)
        out["diff"] = (hp - rp, c)
    return out


def jnet_recombine(s_hat, d_hat):
    """Exact inverse of sum/difference forming, truncated to the native widths."""
    h = 0.5 * (s_hat + d_hat)
    r = 0.5 * (s_hat - d_hat)
    return h[:, :HARMONIC_WIDTH], r[:, :K_RESIDUAL]


def split_outputs(outputs: dict, arch: ArchSpec):
    """Normalized (cc_h_hat, cc_r_hat) from per-network outputs."""
    if arch.kind == "INet":
        return outputs["harmonic"], outputs["residual"]
    if arch.kind == "ConcatNet":
        o = outputs["concat"]
        return o[:, :HARMONIC_WIDTH], o[:, HARMONIC_WIDTH:HARMONIC_WIDTH + K_RESIDUAL]
    return jnet_recombine(outputs["sum"], outputs["diff"])


@dataclass
class TrainedModel:
    arch: ArchSpec
    networks: dict
    norm: NormStats
    curves: dict = field(default_factory=dict)   # name -> {"train": [...], "test": [...]}
    split: dict = field(default_factory=dict)
    seed: int = 0

    def total_curve(self, which: str = "test") -> np.ndarray:
        return np.sum([np.asarray(c[which]) for c in self.curves.values()], axis=0)


def _eval_loss(vae: VaeParams, x, cond) -> float:
    f = vae_forward(vae, x, cond)  # posterior mean: eps = 0
    return vae_loss(f.x_hat, x, f.mu, f.logvar, vae.beta)[0]


def train_network(name: str, x_tr, c_tr, x_te, c_te, arch: ArchSpec, rng: np.random.Generator):
    vae = init_vae(x_tr.shape[1], c_tr.shape[1], rng, arch.latent_dim, arch.hidden, arch.beta)
    adam = AdamState.for_params(vae.arrays(), lr=arch.lr)
    params = vae.arrays()
    n = x_tr.shape[0]
    curve = {"train": [], "test": []}
    for epoch in range(1, arch.epochs + 1):
        perm = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, arch.batch_size):
            b = perm[s:s + arch.batch_size]
            f = vae_forward(vae, x_tr[b], c_tr[b], rng=rng)
            loss = vae_loss(f.x_hat, x_tr[b], f.mu, f.logvar, vae.beta)[0]
            if not np.isfinite(loss):
                raise TrainingDiverged(name, epoch, loss)
            adam_step(adam, params, vae_backward(vae, f, x_tr[b]))
            tot += loss * b.size
        test = _eval_loss(vae, x_te, c_te) if x_te.shape[0] else float("nan")
        if x_te.shape[0] and not np.isfinite(test):
            raise TrainingDiverged(name, epoch, test)
        curve["train"].append(tot / n)
        curve["test"].append(test)
    return vae, adam, curve


def network_seeds(seed: int, names: Sequence[str]) -> dict:
    ss = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: s for n, s in zip(names, ss)}


def train(f0_tr, cc_h_tr, cc_r_tr, arch: ArchSpec, seed: int = 0,
          f0_te=None, cc_h_te=None, cc_r_te=None, split: Optional[dict] = None,
          only: Optional[Sequence[str]] = None) -> TrainedModel:
    """Train every network of ``arch`` (or those named in ``only``).

    Test curves use the posterior mean. Each network draws from its own
    stream spawned from ``seed``, so training a subset gives the same
    networks as training all of them.
    """
    if len(f0_tr) == 0:
        raise ValueError("empty training split")
    norm = NormStats.fit(cc_h_tr, cc_r_tr)
    tr = assemble_inputs(f0_tr, norm.norm_h(cc_h_tr), norm.norm_r(cc_r_tr), arch)
    if f0_te is not None and len(f0_te):
        te = assemble_inputs(f0_te, norm.norm_h(cc_h_te), norm.norm_r(cc_r_te), arch)
    else:
        te = {k: (np.zeros((0, x.shape[1])), np.zeros((0, c.shape[1]))) for k, (x, c) in tr.items()}
    nets, curves = {}, {}
    seeds = network_seeds(seed, arch.networks())
    for name in arch.networks():
        if only is not None and name not in only:
            continue
        rng = np.random.default_rng(seeds[name])
        vae, _, curve = train_network(name, *tr[name], *te[name], arch, rng)
        nets[name] = vae
        curves[name] = curve
    return TrainedModel(arch, nets, norm, curves, split or {}, seed)


def _encode_all(model: TrainedModel, f0, cc_h, cc_r):
    ins = assemble_inputs(f0, model.norm.norm_h(cc_h), model.norm.norm_r(cc_r), model.arch)
    return ins, {k: vae_encode(model.networks[k], *ins[k]) for k in ins if k in model.networks}


def reconstruct(model: TrainedModel, f0, cc_h, cc_r, normalized: bool = False):
    """Posterior-mean reconstruction ``(cc_h_hat, cc_r_hat)``.

    Harmonic entries at or beyond a frame's K_H are set to zero, as in the
    analysis features. With ``normalized=True`` the results stay in the
    standardized space.
    """
    ins, codes = _encode_all(model, f0, cc_h, cc_r)
    outs = {k: vae_decode(model.networks[k], codes[k][0], ins[k][1]) for k in ins}
    h_n, r_n = split_outputs(outs, model.arch)
    h = model.norm.denorm_h(h_n)
    h[~harmonic_valid_mask(f0)] = 0.0
    r = model.norm.denorm_r(r_n)
    if normalized:
        return model.norm.norm_h(h), r_n
    return h, r


def latent_codes(model: TrainedModel, f0, cc_h, cc_r, network: Optional[str] = None) -> np.ndarray:
    """Posterior means of one network (default: the first)."""
    network = network or model.arch.networks()[0]
    if network not in model.networks:
        raise KeyError(f"model has no {network!r} network")
    _, codes = _encode_all(model, f0, cc_h, cc_r)
    return codes[network][0]


# ---------------------------------------------------------------- bundles

def save_bundle(model: TrainedModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"version": BUNDLE_VERSION, "arch": model.arch.to_dict(), "seed": model.seed,
            "networks": list(model.networks)}
    (out / "arch.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    (out / "norm.json").write_text(json.dumps(model.norm.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    (out / "split.json").write_text(json.dumps(model.split, sort_keys=True, indent=1) + "\n")
    for name, vae in model.networks.items():
        save_checkpoint(out / f"{name}.ckpt.json", vae)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        names = list(model.curves)
        wr.writerow(["epoch"] + [f"{n}_{w}" for n in names for w in ("train", "test")])
        epochs = len(next(iter(model.curves.values()))["train"]) if names else 0
        for e in range(epochs):
            wr.writerow([e + 1] + [f"{model.curves[n][w][e]:.9g}" for n in names for w in ("train", "test")])


def load_bundle(path) -> TrainedModel:
    p = Path(path)
    meta = json.loads((p / "arch.json").read_text())
    if meta.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{p}: bundle version {meta.get('version')} unsupported")
    a = meta["arch"]
    arch = ArchSpec(**a)
    norm = NormStats.from_dict(json.loads((p / "norm.json").read_text()))
    split = json.loads((p / "split.json").read_text())
    nets = {name: load_checkpoint(p / f"{name}.ckpt.json")[0] for name in meta["networks"]}
    return TrainedModel(arch, nets, norm, {}, split, int(meta["seed"]))
