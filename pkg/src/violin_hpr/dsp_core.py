"""Windowing, zero-phase DFT analysis, spectral peaks and two-way-mismatch f0.

All functions are pure; frames can be analysed independently.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

WINDOW_KINDS = ("blackman-harris", "hann", "rectangular")

# centred cosine-sum coefficients: w[n] = sum_k b_k cos(2 pi k n / (M - 1)), n = -L..L
_COSINE_TERMS = {
    "blackman-harris": (0.35875, 0.48829, 0.14128, 0.01168),
    "hann": (0.5, 0.5),
    "rectangular": (1.0,),
}

# main-lobe half width in units of fft bins per (fft_size / window_size)
_MAIN_LOBE_HALF_WIDTH = {"blackman-harris": 4.0, "hann": 2.0, "rectangular": 1.0}

MAG_FLOOR_DB = -120.0


@dataclass(frozen=True)
class AnalysisConfig:
    sample_rate_hz: int = 44100
    window_kind: str = "blackman-harris"
    window_size: int = 1023
    fft_size: int = 2048
    hop_size: int = 256
    peak_threshold_db: float = -90.0
    f0_min_hz: float = 120.0
    f0_max_hz: float = 1300.0
    mag_floor_db: float = MAG_FLOOR_DB
    twm_error_threshold: float = 10.0

    def __post_init__(self):
        if self.window_kind not in WINDOW_KINDS:
            raise ValueError(f"unknown window kind {self.window_kind!r}")
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 3")
        if self.fft_size & (self.fft_size - 1) or self.fft_size < self.window_size:
            raise ValueError("fft_size must be a power of two >= window_size")
        if not 0 < self.hop_size <= self.window_size // 2:
            raise ValueError("hop_size must be in (0, window_size/2]")
        if not 0 < self.f0_min_hz < self.f0_max_hz < self.sample_rate_hz / 2:
            raise ValueError("need 0 < f0_min < f0_max < Nyquist")

    @property
    def bin_hz(self) -> float:
        return self.sample_rate_hz / self.fft_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SpectralFrame:
    """One analysed frame.

    ``spectrum`` keeps the complex one-sided transform so that the harmonic
    and residual parts can be separated without going through the dB floor.
    """

    center_sample: int
    mag_db: np.ndarray
    phase: np.ndarray
    spectrum: np.ndarray

    @property
    def fft_size(self) -> int:
        return 2 * (self.mag_db.size - 1)


@dataclass(frozen=True)
class Peak:
    freq_hz: float
    mag_db: float
    phase: float


def make_window(kind: str, window_size: int) -> np.ndarray:
    """Symmetric analysis window normalized so its coefficients sum to one."""
    if kind not in _COSINE_TERMS:
        raise ValueError(f"unknown window kind {kind!r}")
    if window_size < 3 or window_size % 2 == 0:
        raise ValueError("window_size must be odd and >= 3")
    half = (window_size - 1) // 2
    n = np.arange(-half, half + 1)
    theta = 2.0 * np.pi / (window_size - 1)
    w = np.zeros(window_size)
    for k, b in enumerate(_COSINE_TERMS[kind]):
        w += b * np.cos(k * theta * n)
    return w / w.sum()


def _wrap(omega):
    return np.mod(np.asarray(omega, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


def _dirichlet(omega: np.ndarray, m: int) -> np.ndarray:
    """sum_{n=-L}^{L} exp(-j omega n) for odd window length m = 2L+1."""
    omega = _wrap(omega)
    half = 0.5 * omega
    s = np.sin(half)
    small = np.abs(s) < 1e-9
    safe = np.where(small, 1.0, s)
    out = np.sin(m * half) / safe
    # second-order expansion around 0
    return np.where(small, m - m * (m * m - 1) * omega**2 / 24.0, out)


def _dirichlet_deriv(omega: np.ndarray, m: int) -> np.ndarray:
    omega = _wrap(omega)
    half = 0.5 * omega
    s = np.sin(half)
    small = np.abs(s) < 1e-6
    safe = np.where(small, 1.0, s)
    out = 0.5 * (m * np.cos(m * half) * safe - np.sin(m * half) * np.cos(half)) / safe**2
    return np.where(small, -m * (m * m - 1) * omega / 12.0, out)


@lru_cache(maxsize=None)
def _raw_window_sum(kind: str, window_size: int) -> float:
    half = (window_size - 1) // 2
    n = np.arange(-half, half + 1)
    theta = 2.0 * np.pi / (window_size - 1)
    return float(sum(b * np.cos(k * theta * n).sum() for k, b in enumerate(_COSINE_TERMS[kind])))


def window_transform(kind: str, window_size: int, omega, derivative: bool = False) -> np.ndarray:
    """Exact DTFT of the zero-phase normalized window at angular frequencies ``omega``.

    The window is real and even so the transform is real. With
    ``derivative=True`` the derivative with respect to omega is returned.
    """
    if kind not in _COSINE_TERMS:
        raise ValueError(f"unknown window kind {kind!r}")
    omega = np.asarray(omega, dtype=float)
    theta = 2.0 * np.pi / (window_size - 1)
    kernel = _dirichlet_deriv if derivative else _dirichlet
    terms = _COSINE_TERMS[kind]
    # all shifted kernels in one evaluation: shifts 0, +-theta, +-2 theta, ...
    k = np.arange(1, len(terms))
    shifts = np.concatenate([[0.0], -k * theta, k * theta])
    coef = np.concatenate([[terms[0]], 0.5 * np.asarray(terms[1:]), 0.5 * np.asarray(terms[1:])])
    vals = kernel(omega[..., None] + shifts, window_size)
    return (vals @ coef) / _raw_window_sum(kind, window_size)


def main_lobe_half_width_bins(kind: str, window_size: int, fft_size: int) -> float:
    return _MAIN_LOBE_HALF_WIDTH[kind] * fft_size / window_size


def dft_frame(samples, window, fft_size: int, mag_floor_db: float = MAG_FLOOR_DB,
              center_sample: int = 0) -> SpectralFrame:
    """Zero-phase windowed, zero-padded DFT of one frame.

    The window centre is rotated to buffer index 0 so that the phase at a
    spectral peak equals the phase of the sinusoid at the frame centre.
    """
    x = np.asarray(samples, dtype=float)
    w = np.asarray(window, dtype=float)
    if x.shape != w.shape:
        raise ValueError(f"frame length {x.size} != window length {w.size}")
    if fft_size < w.size:
        raise ValueError("fft_size smaller than window")
    hm1 = (w.size + 1) // 2
    hm2 = w.size // 2
    xw = x * w
    buf = np.zeros(fft_size)
    buf[:hm1] = xw[hm2:]
    buf[fft_size - hm2:] = xw[:hm2]
    spec = np.fft.rfft(buf)
    mag = np.abs(spec)
    with np.errstate(divide="ignore"):
        mag_db = np.maximum(20.0 * np.log10(mag), mag_floor_db)
    phase = np.angle(spec)
    # bins that are numerically zero carry meaningless phase
    phase[mag < 1e-14] = 0.0
    return SpectralFrame(int(center_sample), mag_db, phase, spec)


def parabolic_offset(alpha: float, beta: float, gamma: float) -> tuple[float, float]:
    """Vertex offset and height of the parabola through (-1, alpha), (0, beta), (1, gamma)."""
    denom = alpha - 2.0 * beta + gamma
    if denom == 0.0:
        return 0.0, beta
    p = 0.5 * (alpha - gamma) / denom
    return p, beta - 0.25 * (alpha - gamma) * p


def detect_peaks(frame: SpectralFrame, peak_threshold_db: float, sample_rate_hz: float) -> list[Peak]:
    """Local maxima above threshold refined by parabolic interpolation of dB magnitudes."""
    mx = frame.mag_db
    px = frame.phase
    n = frame.fft_size
    centre = mx[1:-1]
    is_peak = (centre > peak_threshold_db) & (centre > mx[:-2]) & (centre > mx[2:])
    locs = np.flatnonzero(is_peak) + 1
    peaks = []
    for k in locs:
        p, mag = parabolic_offset(mx[k - 1], mx[k], mx[k + 1])
        # interpolate phase toward the neighbour on the side of the offset
        nb = k + 1 if p >= 0 else k - 1
        dphi = np.angle(np.exp(1j * (px[nb] - px[k])))
        phase = float(np.angle(np.exp(1j * (px[k] + abs(p) * dphi))))
        freq = (k + p) * sample_rate_hz / n
        if 0.0 < freq < sample_rate_hz / 2:
            peaks.append(Peak(float(freq), float(max(mag, mx[k])), phase))
    return peaks


def twm_error(peak_freqs, peak_mags_db, candidates, n_partials: int = 10) -> np.ndarray:
    """Two-way mismatch error for each candidate f0 (Maher and Beauchamp weights)."""
    pfreq = np.asarray(peak_freqs, dtype=float)
    pmag = np.asarray(peak_mags_db, dtype=float)
    f0c = np.asarray(candidates, dtype=float)
    p_exp, q, r, rho = 0.5, 1.4, 0.5, 0.33
    amax = pmag.max()

    # predicted -> measured
    n_pm = min(n_partials, pfreq.size)
    err_pm = np.zeros(f0c.size)
    harm = f0c.copy()
    for _ in range(n_pm):
        dist = np.abs(harm[:, None] - pfreq[None, :])
        loc = dist.argmin(axis=1)
        fdist = dist[np.arange(f0c.size), loc]
        pond = fdist * harm ** (-p_exp)
        mag_factor = 10.0 ** ((pmag[loc] - amax) / 20.0)
        err_pm += pond + mag_factor * (q * pond - r)
        harm = harm + f0c

    # measured -> predicted
    n_mp = min(n_partials, pfreq.size)
    mf = pfreq[:n_mp]
    mm = pmag[:n_mp]
    nharm = np.maximum(np.round(mf[None, :] / f0c[:, None]), 1.0)
    fdist = np.abs(mf[None, :] - nharm * f0c[:, None])
    pond = fdist * mf[None, :] ** (-p_exp)
    mag_factor = 10.0 ** ((mm - amax) / 20.0)
    err_mp = np.sum(mag_factor * (pond + mag_factor * (q * pond - r)), axis=1)

    return err_pm / n_pm + rho * err_mp / n_mp


def twm_f0(peaks: Sequence[Peak], f0_min_hz: float, f0_max_hz: float,
           prev_f0: Optional[float] = None, error_threshold: float = 10.0,
           continuity_weight: float = 0.5, max_submultiple: int = 10) -> Optional[float]:
    """Fundamental frequency by two-way mismatch, or None for unvoiced frames.

    Candidates are the peak frequencies and their integer submultiples that
    fall inside [f0_min_hz, f0_max_hz]. When ``prev_f0`` is given, each
    candidate pays ``continuity_weight * |log2(cand / prev_f0)|`` extra.
    """
    if len(peaks) == 0:
        return None
    pfreq = np.array([p.freq_hz for p in peaks])
    pmag = np.array([p.mag_db for p in peaks])
    # restrict candidate sources to reasonably strong peaks
    strong = pmag > pmag.max() - 60.0
    base = pfreq[strong]
    divisors = np.arange(1, max_submultiple + 1)
    cands = (base[:, None] / divisors[None, :]).ravel()
    cands = np.unique(cands[(cands >= f0_min_hz) & (cands <= f0_max_hz)])
    if cands.size == 0:
        return None
    err = twm_error(pfreq, pmag, cands)
    if prev_f0 is not None and prev_f0 > 0:
        err = err + continuity_weight * np.abs(np.log2(cands / prev_f0))
    i = int(np.argmin(err))
    if err[i] > error_threshold:
        return None
    return float(cands[i])


def frame_centers(n_samples: int, hop: int) -> np.ndarray:
    return np.arange(0, n_samples, hop)


def frame_at(samples: np.ndarray, center: int, window_size: int) -> np.ndarray:
    """Window-length slice centred on ``center``; zero padded beyond the signal."""
    half = window_size // 2
    lo = center - half
    hi = center + half + 1
    out = np.zeros(window_size)
    src_lo = max(lo, 0)
    src_hi = min(hi, samples.size)
    if src_hi > src_lo:
        out[src_lo - lo:src_hi - lo] = samples[src_lo:src_hi]
    return out


def analyze_frames(samples, config: AnalysisConfig, centers=None):
    """Spectral frames at each hop (or at the given centres)."""
    x = np.asarray(samples, dtype=float)
    w = make_window(config.window_kind, config.window_size)
    if centers is None:
        centers = frame_centers(x.size, config.hop_size)
    return [dft_frame(frame_at(x, int(c), config.window_size), w, config.fft_size,
                      config.mag_floor_db, center_sample=int(c)) for c in centers]
