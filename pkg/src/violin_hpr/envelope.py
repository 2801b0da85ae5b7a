"""Sub-sampled spectra, true-amplitude envelopes and their cepstral coefficients.

Envelopes live in the dB domain as a cosine series with period ``Fs``:

    V(f) = c0 + 2 * sum_{k=1..K} c_k cos(2 pi k f / Fs)

so coefficients from different frames and components are directly comparable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .hpr import HarmonicFrame

RESIDUAL_STEP_HZ = 430.0
K_RESIDUAL = 51
HARMONIC_WIDTH = 60
K_HARMONIC_MIN = 8
TAE_TOL_DB = 2.0
TAE_MAX_ITERS = 100
TAE_RCOND = 1e-3


@dataclass
class SampledSpectrum:
    freqs_hz: np.ndarray
    mags_db: np.ndarray

    def __post_init__(self):
        self.freqs_hz = np.asarray(self.freqs_hz, dtype=float)
        self.mags_db = np.asarray(self.mags_db, dtype=float)
        if self.freqs_hz.shape != self.mags_db.shape:
            raise ValueError("frequency and magnitude vectors differ in length")

    def __len__(self):
        return self.freqs_hz.size


@dataclass
class CepstralEnvelope:
    coeffs: np.ndarray
    sample_rate_hz: float = 44100.0

    @property
    def order(self) -> int:
        return self.coeffs.size - 1

    def __call__(self, freqs_hz) -> np.ndarray:
        return envelope_eval(self, freqs_hz)


@dataclass
class TaeResult:
    envelope: CepstralEnvelope
    iterations: int
    violations: list = field(default_factory=list)
    converged: bool = True


def subsample_residual(res_mag_db, step_hz: float = RESIDUAL_STEP_HZ,
                       sample_rate_hz: float = 44100.0, band_average: bool = False) -> SampledSpectrum:
    """Residual magnitudes at the bins nearest to 0, step, 2*step, ... up to Nyquist.

    With ``band_average`` each point instead carries the mean power of the
    bins within half a step of it, which is what decimating the spectrum
    with an anti-alias average gives. That removes most of the per-bin
    random fluctuation of a noise spectrum and the notches that harmonic
    subtraction leaves at partial frequencies.
    """
    if step_hz <= 0:
        raise ValueError("step must be positive")
    mag = np.asarray(res_mag_db, dtype=float)
    n_fft = 2 * (mag.size - 1)
    bin_hz = sample_rate_hz / n_fft
    nyq = sample_rate_hz / 2.0
    n_points = int(np.floor(nyq / step_hz + 1e-9)) + 1
    targets = step_hz * np.arange(n_points)
    bins = np.unique(np.clip(np.rint(targets / bin_hz).astype(int), 0, mag.size - 1))
    if not band_average:
        return SampledSpectrum(bins * bin_hz, mag[bins])
    f = np.arange(mag.size) * bin_hz
    power = 10.0 ** (mag / 10.0)
    vals = np.empty(bins.size)
    for i, b in enumerate(bins):
        sel = np.abs(f - b * bin_hz) < step_hz / 2.0
        sel[b] = True
        vals[i] = 10.0 * np.log10(power[sel].mean())
    return SampledSpectrum(bins * bin_hz, vals)


def harmonic_samples(hframe: HarmonicFrame) -> SampledSpectrum:
    return SampledSpectrum(hframe.harm_freqs.copy(), hframe.harm_mags_db.copy())


def cosine_basis(freqs_hz, order: int, sample_rate_hz: float = 44100.0) -> np.ndarray:
    f = np.asarray(freqs_hz, dtype=float)
    k = np.arange(order + 1)
    basis = np.cos(2.0 * np.pi * np.outer(f, k) / sample_rate_hz)
    basis[:, 1:] *= 2.0
    return basis


def envelope_eval(cep: CepstralEnvelope, freqs_hz) -> np.ndarray:
    return cosine_basis(freqs_hz, cep.order, cep.sample_rate_hz) @ cep.coeffs


def tae_fit(samples: SampledSpectrum, order: int, tol_db: float = TAE_TOL_DB,
            max_iters: int = TAE_MAX_ITERS, sample_rate_hz: float = 44100.0,
            return_trace: bool = False, rcond: float = TAE_RCOND):
    """True amplitude envelope of irregularly spaced spectral samples.

    Each pass fits the order-``order`` cosine series by least squares and then
    raises every sample that lies below the fit to the fit, until no sample
    sits more than ``tol_db`` above the envelope. With more coefficients than
    samples the minimum-norm solution is used, which interpolates.

    ``rcond`` truncates small singular values of the basis. Harmonic grids
    that stop well short of Nyquist (low f0 with a capped harmonic count) are
    otherwise so ill-conditioned that the envelope explodes between samples.
    """
    if len(samples) == 0:
        raise ValueError("no spectral samples to fit")
    if order < 1:
        raise ValueError("order must be at least 1")
    # a single sample admits only the constant term
    order = 0 if len(samples) == 1 else order
    basis = cosine_basis(samples.freqs_hz, order, sample_rate_hz)
    pinv = np.linalg.pinv(basis, rcond=rcond)
    a0 = samples.mags_db
    a = a0.copy()
    violations = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        coeffs = pinv @ a
        fit = basis @ coeffs
        violations.append(float(np.max(a0 - fit)))
        if np.max(a - fit) <= tol_db:
            converged = True
            break
        a = np.maximum(a, fit)
    env = CepstralEnvelope(coeffs, sample_rate_hz)
    if return_trace:
        return TaeResult(env, it, violations, converged)
    return env


def choose_k_harmonic(f0_hz: float, sample_rate_hz: float = 44100.0,
                      width: int = HARMONIC_WIDTH, k_min: int = K_HARMONIC_MIN,
                      f0_range: Optional[tuple] = None) -> int:
    """Harmonic cepstral order floor(Fs / (2 f0)), clamped to [k_min, width]."""
    if f0_hz <= 0 or (f0_range is not None and not f0_range[0] <= f0_hz <= f0_range[1]):
        raise ValueError(f"f0 {f0_hz} Hz outside the analysis range")
    k = int(np.floor(sample_rate_hz / (2.0 * f0_hz)))
    return int(min(max(k, k_min), width))


def pad_coeffs(coeffs, width: int) -> np.ndarray:
    """Cepstral vector of exactly ``width`` entries: c0..c_{width-1}, zero padded.

    Coefficient ``c_width`` and beyond would not fit; callers keep
    ``order < width``.
    """
    c = np.asarray(coeffs, dtype=float)
    out = np.zeros(width)
    n = min(width, c.size)
    out[:n] = c[:n]
    return out


@dataclass
class FrameFeatures:
    """Per-frame network features of one note.

    ``cc_h`` holds c0..c_{K_H - 1} zero padded to ``HARMONIC_WIDTH``; ``cc_r`` is
    c0..c_{K_R - 1} of the residual envelope (``K_RESIDUAL`` values).
    """

    note_id: str
    frame_index: int
    f0_hz: float
    cc_h: np.ndarray
    cc_r: np.ndarray


def harmonic_order_for(f0_hz: float, sample_rate_hz: float = 44100.0) -> int:
    # K_H counts coefficients c0..c_{K_H-1}, so the cosine order is K_H - 1
    return choose_k_harmonic(f0_hz, sample_rate_hz) - 1


def frame_features(note_id: str, frame_index: int, hframe: HarmonicFrame, res_mag_db,
                   sample_rate_hz: float = 44100.0, step_hz: float = RESIDUAL_STEP_HZ,
                   tol_db: float = TAE_TOL_DB, max_iters: int = TAE_MAX_ITERS,
                   band_average: bool = True) -> FrameFeatures:
    k_h = harmonic_order_for(hframe.f0_hz, sample_rate_hz)
    cep_h = tae_fit(harmonic_samples(hframe), k_h, tol_db, max_iters, sample_rate_hz)
    sub = subsample_residual(res_mag_db, step_hz, sample_rate_hz, band_average)
    cep_r = tae_fit(sub, K_RESIDUAL - 1, tol_db, max_iters, sample_rate_hz)
    return FrameFeatures(note_id, frame_index, float(hframe.f0_hz),
                         pad_coeffs(cep_h.coeffs, HARMONIC_WIDTH),
                         pad_coeffs(cep_r.coeffs, K_RESIDUAL))


FEATURE_HEADER = (["note_id", "frame_index", "f0_hz"]
                  + [f"cc_h_{i}" for i in range(HARMONIC_WIDTH)]
                  + [f"cc_r_{i}" for i in range(K_RESIDUAL)])


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_features_csv(path, features: Iterable[FrameFeatures]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(FEATURE_HEADER)
        for ft in features:
            wr.writerow([ft.note_id, ft.frame_index, _fmt(ft.f0_hz)]
                        + [_fmt(v) for v in ft.cc_h] + [_fmt(v) for v in ft.cc_r])


def read_features_csv(path) -> list[FrameFeatures]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != FEATURE_HEADER:
            raise ValueError(f"{path}: unexpected feature header")
        for row in rd:
            vals = np.array(row[3:], dtype=float)
            out.append(FrameFeatures(row[0], int(row[1]), float(row[2]),
                                     vals[:HARMONIC_WIDTH], vals[HARMONIC_WIDTH:]))
    return out


def stack_features(features: Sequence[FrameFeatures]):
    """(f0, cc_h, cc_r) arrays for a list of frames."""
    f0 = np.array([f.f0_hz for f in features])
    cc_h = np.stack([f.cc_h for f in features]) if features else np.zeros((0, HARMONIC_WIDTH))
    cc_r = np.stack([f.cc_r for f in features]) if features else np.zeros((0, K_RESIDUAL))
    return f0, cc_h, cc_r
