"""Evaluation artefacts: per-note reconstruction MSE, exact t-SNE embeddings
with silhouette scores, and spectral-envelope dumps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .dataset import NOTES
from .envelope import CepstralEnvelope, envelope_eval
from .models import ArchSpec, TrainedModel, latent_codes, reconstruct, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- MSE

@dataclass
class MseRow:
    architecture: str
    note: str
    component: str
    mse: float
    n_frames: int


def mse_rows(arch_name: str, notes: Sequence[str], h_true, h_hat, r_true, r_hat) -> list:
    """Per-note mean squared error over frames and coefficients (both components)."""
    notes = np.asarray(notes)
    rows = []
    for note in [n for n in NOTES if n in set(notes.tolist())] + sorted(set(notes.tolist()) - set(NOTES)):
        sel = notes == note
        k = int(sel.sum())
        if k == 0:
            log.warning("note %s has no frames; omitted", note)
            continue
        rows.append(MseRow(arch_name, note, "harmonic", float(np.mean((h_hat[sel] - h_true[sel]) ** 2)), k))
        rows.append(MseRow(arch_name, note, "residual", float(np.mean((r_hat[sel] - r_true[sel]) ** 2)), k))
    return rows


def mse_report(model: TrainedModel, f0, cc_h, cc_r, notes: Sequence[str], name: Optional[str] = None) -> list:
    """MSE in the standardized coefficient space, per note and component."""
    if len(f0) == 0:
        raise ValueError("empty test split")
    h_hat, r_hat = reconstruct(model, f0, cc_h, cc_r, normalized=True)
    return mse_rows(name or model.arch.kind, notes, model.norm.norm_h(cc_h), h_hat, model.norm.norm_r(cc_r), r_hat)


def write_mse_csv(path, rows: Sequence[MseRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["architecture", "note", "component", "mse", "n_frames"])
        for r in rows:
            wr.writerow([r.architecture, r.note, r.component, f"{r.mse:.9g}", r.n_frames])


# ---------------------------------------------------------------- t-SNE

def _conditional_p(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity)."""
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            e = np.exp(-(di - di.min()) * beta)
            s = e.sum()
            h = np.log(s) + beta * np.sum((di - di.min()) * e) / s
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        p[i, np.arange(n) != i] = e / s
    return p


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_history: list


def tsne_embed(x, perplexity: float = 30.0, n_iter: int = 1000, seed: int = 0, learning_rate: float = 200.0,
               exaggeration: float = 12.0, exaggeration_iters: int = 250, return_history: bool = False):
    """Exact t-SNE to two dimensions."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 3 * perplexity:
        raise ValueError(f"t-SNE needs at least {3 * perplexity:g} points, got {n}")
    p = _conditional_p(squareform(pdist(x, "sqeuclidean")), perplexity)
    p = (p + p.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, (n, 2))
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    hist = []
    for it in range(n_iter):
        ex = exaggeration if it < exaggeration_iters else 1.0
        mom = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + squareform(pdist(y, "sqeuclidean")))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (ex * p - q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        same = np.sign(grad) == np.sign(vel)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        vel = mom * vel - learning_rate * gains * grad
        y = y + vel
        y = y - y.mean(axis=0)
        if return_history:
            hist.append(float(np.sum(p * np.log(p / q))))
    return TsneResult(y, hist) if return_history else y


def silhouette(x, labels) -> float:
    """Mean silhouette coefficient; points in singleton clusters count as 0."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    d = cdist(x, x)
    s = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = d[i, own].sum() / n_own
        b = min(d[i, labels == u].mean() for u in uniq if u != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


def write_embedding_csv(path, y, labels) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "y", "c"])
        for (a, b), c in zip(y, labels):
            wr.writerow([f"{a:.9g}", f"{b:.9g}", int(c)])


# ---------------------------------------------------------------- envelope dumps

def _write_xy(path, header, cols) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in zip(*cols):
            wr.writerow([f"{v:.9g}" for v in row])


def dump_envelopes(out_dir, stem: str, features, hframes=None, fft_size: int = 2048,
                   sample_rate_hz: float = 44100.0, frame_indices: Optional[Sequence[int]] = None) -> list:
    """Per-frame envelope CSVs on the bin grid plus harmonic-location samples.

    Writes ``<stem>_f<k>_taeH.csv`` (f,taeH), ``<stem>_f<k>_taeR.csv``
    (f,taeR) and, when harmonic frames are given, ``<stem>_f<k>_harm.csv``
    (nF,nM). Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = np.fft.rfftfreq(fft_size, 1.0 / sample_rate_hz)
    idx = range(len(features)) if frame_indices is None else frame_indices
    paths = []
    for k in idx:
        ft = features[k]
        eh = envelope_eval(CepstralEnvelope(ft.cc_h, sample_rate_hz), grid)
        er = envelope_eval(CepstralEnvelope(ft.cc_r, sample_rate_hz), grid)
        base = out / f"{stem}_f{ft.frame_index:04d}"
        _write_xy(f"{base}_taeH.csv", ["f", "taeH"], [grid, eh])
        _write_xy(f"{base}_taeR.csv", ["f", "taeR"], [grid, er])
        paths += [Path(f"{base}_taeH.csv"), Path(f"{base}_taeR.csv")]
        if hframes is not None:
            h = hframes[k]
            _write_xy(f"{base}_harm.csv", ["nF", "nM"], [h.harm_freqs, h.harm_mags_db])
            paths.append(Path(f"{base}_harm.csv"))
    return paths


def read_xy_csv(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        vals = np.array([[float(v) for v in row] for row in rd])
    return header, vals


# ---------------------------------------------------------------- conditioning study

@dataclass
class ConditioningReport:
    embeddings: dict            # "unconditioned", "conditioned" -> (n, 2)
    silhouettes: dict           # same keys -> float
    labels: np.ndarray          # note index 0-11 per embedded point
    residual_embedding: Optional[np.ndarray] = None
    residual_silhouette: Optional[float] = None
    seed: int = 0


def conditioning_study(f0, cc_h, cc_r, note_labels, arch: ArchSpec, seed: int = 0,
                       max_points: int = 600, perplexity: float = 30.0, tsne_iters: int = 1000,
                       with_residual: bool = True) -> ConditioningReport:
    """Harmonic latents with and without pitch conditioning, plus the residual latents.

    Both INet harmonic networks are trained on all given frames; t-SNE and
    the note silhouette run on a seeded subsample of ``max_points`` frames.
    """
    labels = np.asarray(note_labels)
    rng = np.random.default_rng(seed)
    n = len(f0)
    pick = np.sort(rng.choice(n, size=min(max_points, n), replace=False))
    embeds, sils = {}, {}
    res_y = res_s = None
    for key, cond in (("unconditioned", False), ("conditioned", True)):
        a = ArchSpec(**{**arch.to_dict(), "kind": "INet", "condition_on_f0": cond})
        only = ["harmonic", "residual"] if (with_residual and not cond) else ["harmonic"]
        model = train(f0, cc_h, cc_r, a, seed, only=only)
        z = latent_codes(model, f0[pick], cc_h[pick], cc_r[pick], "harmonic")
        embeds[key] = tsne_embed(z, perplexity, tsne_iters, seed)
        sils[key] = silhouette(embeds[key], labels[pick])
        if "residual" in only:
            zr = latent_codes(model, f0[pick], cc_h[pick], cc_r[pick], "residual")
            res_y = tsne_embed(zr, perplexity, tsne_iters, seed)
            res_s = silhouette(res_y, labels[pick])
    return ConditioningReport(embeds, sils, labels[pick], res_y, res_s, seed)
