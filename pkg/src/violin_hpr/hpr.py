"""Harmonic-plus-residual decomposition of analysed frames and its resynthesis."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .dsp_core import (
    MAG_FLOOR_DB,
    AnalysisConfig,
    Peak,
    SpectralFrame,
    main_lobe_half_width_bins,
    make_window,
    window_transform,
)

DEV_FRACTION = 0.2
MAX_HARMONICS = 60


@dataclass
class HarmonicFrame:
    f0_hz: float
    harm_freqs: np.ndarray
    harm_mags_db: np.ndarray
    harm_phases: np.ndarray
    matched: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.matched is None:
            self.matched = np.ones(self.harm_freqs.size, dtype=bool)

    @property
    def n_harmonics(self) -> int:
        return int(self.harm_freqs.size)

    @classmethod
    def empty(cls, f0_hz: float = 0.0) -> "HarmonicFrame":
        z = np.zeros(0)
        return cls(f0_hz, z, z.copy(), z.copy(), np.zeros(0, dtype=bool))


@dataclass
class ResidualFrame:
    res_mag_db: np.ndarray
    spectrum: np.ndarray


def n_harmonics_for(f0_hz: float, sample_rate_hz: float, max_harmonics: int = MAX_HARMONICS) -> int:
    """Harmonics kept below Nyquist, capped at ``max_harmonics``."""
    nyq = sample_rate_hz / 2.0
    r = int(np.floor(nyq / f0_hz))
    if r * f0_hz >= nyq:
        r -= 1
    return max(0, min(max_harmonics, r))


def match_harmonics(peaks: Sequence[Peak], f0_hz: float, sample_rate_hz: float,
                    max_harmonics: int = MAX_HARMONICS, dev_fraction: float = DEV_FRACTION,
                    frame: Optional[SpectralFrame] = None,
                    floor_db: float = MAG_FLOOR_DB) -> HarmonicFrame:
    """Assign the nearest peak within ``dev_fraction * f0`` to every harmonic r * f0.

    Harmonics without a peak keep frequency r * f0 and the floor magnitude;
    their phase is read from ``frame`` at the nominal frequency when given.
    """
    if f0_hz <= 0:
        raise ValueError("f0 must be positive")
    n_h = n_harmonics_for(f0_hz, sample_rate_hz, max_harmonics)
    nominal = f0_hz * np.arange(1, n_h + 1)
    freqs = nominal.copy()
    mags = np.full(n_h, floor_db)
    phases = np.zeros(n_h)
    matched = np.zeros(n_h, dtype=bool)
    pfreq = np.array([p.freq_hz for p in peaks])
    tol = dev_fraction * f0_hz
    used = set()
    for i, hf in enumerate(nominal):
        if pfreq.size == 0:
            break
        j = int(np.argmin(np.abs(pfreq - hf)))
        if abs(pfreq[j] - hf) < tol and j not in used:
            used.add(j)
            freqs[i] = pfreq[j]
            mags[i] = peaks[j].mag_db
            phases[i] = peaks[j].phase
            matched[i] = True
    if frame is not None and not matched.all():
        pos = nominal[~matched] * frame.fft_size / sample_rate_hz
        lo = np.clip(np.floor(pos).astype(int), 0, frame.phase.size - 1)
        hi = np.clip(lo + 1, 0, frame.phase.size - 1)
        frac = pos - lo
        dphi = np.angle(np.exp(1j * (frame.phase[hi] - frame.phase[lo])))
        phases[~matched] = np.angle(np.exp(1j * (frame.phase[lo] + frac * dphi)))
    return HarmonicFrame(float(f0_hz), freqs, mags, phases, matched)


def _complex_amplitudes(hframe: HarmonicFrame) -> np.ndarray:
    # mags follow the peak convention: 20 log10(A / 2) for a cosine of amplitude A
    return 10.0 ** (hframe.harm_mags_db / 20.0) * np.exp(1j * hframe.harm_phases)


def synth_harmonic_spectrum(hframe: HarmonicFrame, fft_size: int, window_kind: str,
                            window_size: int, sample_rate_hz: float,
                            floor_db: float = MAG_FLOOR_DB) -> np.ndarray:
    """One-sided spectrum of the windowed harmonic sinusoids.

    The spectrum is the exact transform of the zero-phase windowed sum of
    cosines, main lobe and side lobes alike, so ``irfft`` returns the windowed
    sinusoids up to rounding. Harmonics at or below ``floor_db`` are skipped.
    """
    n_bins = fft_size // 2 + 1
    keep = hframe.harm_mags_db > floor_db
    if not keep.any():
        return np.zeros(n_bins, dtype=complex)
    w = make_window(window_kind, window_size)
    half = window_size // 2
    n = np.arange(-half, half + 1)
    amp = 2.0 * 10.0 ** (hframe.harm_mags_db[keep] / 20.0)
    omega = 2.0 * np.pi * hframe.harm_freqs[keep] / sample_rate_hz
    x = amp @ np.cos(omega[:, None] * n[None, :] + hframe.harm_phases[keep][:, None])
    xw = x * w
    buf = np.zeros(fft_size)
    buf[:half + 1] = xw[half:]
    buf[fft_size - half:] = xw[:half]
    return np.fft.rfft(buf)


def refine_harmonics(frame: SpectralFrame, hframe: HarmonicFrame, config: AnalysisConfig,
                     n_iter: int = 1) -> HarmonicFrame:
    """Joint least-squares refinement of matched harmonic parameters.

    Peaks of neighbouring harmonics overlap when f0 is below the main-lobe
    width, which biases single-peak parabolic estimates. Here the complex
    amplitudes and frequencies of all matched harmonics are fitted together
    to the complex spectrum around their main lobes (Gauss-Newton), followed
    by a final linear solve for the amplitudes.
    """
    keep = hframe.matched & (hframe.harm_mags_db > config.mag_floor_db)
    if not keep.any():
        return hframe
    # unmatched harmonics join the fit as nuisance terms so that their energy
    # does not bias the neighbours; they are not reported
    idx = np.flatnonzero(keep | ~hframe.matched)
    report = keep[idx]
    fs = config.sample_rate_hz
    n_fft = config.fft_size
    kind, m = config.window_kind, config.window_size
    n_bins = n_fft // 2 + 1
    if kind == "blackman-harris":
        support = int(np.ceil(main_lobe_half_width_bins(kind, m, n_fft))) + 2
    else:
        # side lobes are not negligible: use every bin
        support = n_bins

    w_r = 2.0 * np.pi * hframe.harm_freqs[idx] / fs
    amp = np.where(report, _complex_amplitudes(hframe)[idx], 0.0)
    x = frame.spectrum
    nh = idx.size
    max_step = 0.5 * 2.0 * np.pi / n_fft
    offs = np.arange(-support, support + 2)

    for it in range(n_iter + 1):
        with_freq = it < n_iter
        centre = np.floor(w_r * n_fft / (2.0 * np.pi)).astype(int)
        ks = centre[:, None] + offs[None, :]
        # contiguous support clipped to the one-sided grid; it also covers the
        # image lobes that fold in near DC and Nyquist
        valid = (ks >= 0) & (ks < n_bins)
        ks = np.clip(ks, 0, n_bins - 1)
        om = 2.0 * np.pi * ks / n_fft
        wp = window_transform(kind, m, om - w_r[:, None])
        wn = window_transform(kind, m, om + w_r[:, None])
        a = amp[:, None]
        contrib = np.where(valid, a * wp + np.conj(a) * wn, 0.0)
        model = np.zeros(n_bins, dtype=complex)
        np.add.at(model, ks[valid], contrib[valid])
        cols = [wp + wn, 1j * (wp - wn)]
        if with_freq:
            dwp = window_transform(kind, m, om - w_r[:, None], derivative=True)
            dwn = window_transform(kind, m, om + w_r[:, None], derivative=True)
            cols.append(-a * dwp + np.conj(a) * dwn)
        n_par = len(cols)
        vals = np.stack(cols, axis=1)  # (nh, n_par, L)
        rows = np.broadcast_to(ks[:, None, :], vals.shape)
        colidx = np.broadcast_to((n_par * np.arange(nh))[:, None, None] + np.arange(n_par)[None, :, None], vals.shape)
        mask = np.broadcast_to(valid[:, None, :], vals.shape)
        v = vals[mask]
        r = rows[mask]
        c = colidx[mask]
        jac = sparse.csr_matrix(
            (np.concatenate([v.real, v.imag]), (np.concatenate([r, r + n_bins]), np.concatenate([c, c]))),
            shape=(2 * n_bins, n_par * nh))
        resid = x - model
        rvec = np.concatenate([resid.real, resid.imag])
        jtj = (jac.T @ jac).tocsc()
        reg = 1e-12 * jtj.diagonal().max()
        jtj = jtj + reg * sparse.identity(jtj.shape[0], format="csc")
        step = spsolve(jtj, jac.T @ rvec).reshape(nh, n_par)
        amp = amp + step[:, 0] + 1j * step[:, 1]
        if with_freq:
            w_r = w_r + np.where(report, np.clip(step[:, 2], -max_step, max_step), 0.0)

    freqs = hframe.harm_freqs.copy()
    mags = hframe.harm_mags_db.copy()
    phases = hframe.harm_phases.copy()
    idx, w_r, amp = idx[report], w_r[report], amp[report]
    freqs[idx] = w_r * fs / (2.0 * np.pi)
    with np.errstate(divide="ignore"):
        mags[idx] = np.maximum(20.0 * np.log10(np.abs(amp)), config.mag_floor_db)
    phases[idx] = np.angle(amp)
    return HarmonicFrame(hframe.f0_hz, freqs, mags, phases, hframe.matched.copy())


def compute_residual(frame: SpectralFrame, hframe: HarmonicFrame, config: AnalysisConfig,
                     harmonic_spectrum: Optional[np.ndarray] = None) -> ResidualFrame:
    """Complex spectral subtraction of the harmonic part from the frame."""
    if harmonic_spectrum is None:
        harmonic_spectrum = synth_harmonic_spectrum(
            hframe, config.fft_size, config.window_kind, config.window_size,
            config.sample_rate_hz, config.mag_floor_db)
    if harmonic_spectrum.shape != frame.spectrum.shape:
        raise ValueError("harmonic spectrum and frame are on different bin grids")
    res = frame.spectrum - harmonic_spectrum
    with np.errstate(divide="ignore"):
        mag_db = np.maximum(20.0 * np.log10(np.abs(res)), config.mag_floor_db)
    return ResidualFrame(mag_db, res)


def synth_residual_frame(envelope_db, rng: np.random.Generator, floor_db: float = MAG_FLOOR_DB) -> np.ndarray:
    """Full-length random-phase spectrum whose inverse FFT is real noise.

    ``envelope_db`` is a one-sided magnitude envelope on ``fft_size/2 + 1``
    bins expressed as per-sample power: a flat 0 dB envelope gives unit-power
    noise after ``np.fft.ifft``. Values at or below ``floor_db`` are silent.
    """
    env = np.asarray(envelope_db, dtype=float)
    n_bins = env.size
    n_fft = 2 * (n_bins - 1)
    mag = np.where(env > floor_db, 10.0 ** (env / 20.0), 0.0) * np.sqrt(n_fft)
    phase = rng.uniform(-np.pi, np.pi, n_bins)
    half = mag * np.exp(1j * phase)
    # DC and Nyquist must be real; keep their power
    half[0] = mag[0] * np.sign(np.cos(phase[0]) or 1.0)
    half[-1] = mag[-1] * np.sign(np.cos(phase[-1]) or 1.0)
    full = np.empty(n_fft, dtype=complex)
    full[:n_bins] = half
    full[n_bins:] = np.conj(half[1:-1][::-1])
    return full


def overlap_add(frames: Sequence[np.ndarray], hop: int, window: Optional[np.ndarray] = None,
                power: bool = False, eps: float = 1e-8) -> np.ndarray:
    """Overlap-add frames that already carry ``window``.

    The sum is divided by the window's own overlap sum, so a constant signal
    windowed and re-added comes back exactly. With ``power=True`` the
    division uses the square root of the overlapped squared window, which
    keeps the variance of independent noise frames. Frame ``m`` starts at
    sample ``m * hop``.
    """
    frames = [np.asarray(f, dtype=float) for f in frames]
    if not frames:
        return np.zeros(0)
    size = frames[0].size
    if any(f.size != size for f in frames):
        raise ValueError("all frames must have the same length")
    if window is None:
        window = np.ones(size)
    window = np.asarray(window, dtype=float)
    if window.size != size:
        raise ValueError("window length differs from frame length")
    n_out = (len(frames) - 1) * hop + size
    y = np.zeros(n_out)
    wsum = np.zeros(n_out)
    wk = window**2 if power else window
    for m, f in enumerate(frames):
        s = m * hop
        y[s:s + size] += f
        wsum[s:s + size] += wk
    if power:
        wsum = np.sqrt(wsum)
    good = wsum > eps * wsum.max()
    y[good] /= wsum[good]
    y[~good] = 0.0
    return y


def zero_phase_to_linear(buf: np.ndarray, window_size: int) -> np.ndarray:
    """Undo the zero-phase rotation: return the ``window_size`` samples centred on the frame."""
    hm1 = (window_size + 1) // 2
    hm2 = window_size // 2
    return np.concatenate([buf[buf.size - hm2:], buf[:hm1]])


@dataclass
class SynthesisConfig:
    """Frame layout for resynthesis: Hann-windowed frames at the analysis hop."""

    sample_rate_hz: int = 44100
    hop_size: int = 256
    floor_db: float = MAG_FLOOR_DB

    @property
    def fft_size(self) -> int:
        return 4 * self.hop_size

    @property
    def window_size(self) -> int:
        return self.fft_size - 1


def synthesize_harmonic_frames(hframes: Sequence[HarmonicFrame], synth: SynthesisConfig) -> np.ndarray:
    """Windowed sinusoid frames from per-frame harmonic parameters, overlap-added.

    Phases in each frame are those at the frame centre. Output sample
    ``m * hop`` corresponds to the centre of frame ``m``; the returned signal
    is trimmed so index 0 is the centre of frame 0.
    """
    ns, ms = synth.fft_size, synth.window_size
    w = make_window("hann", ms)
    bufs = []
    for h in hframes:
        spec = synth_harmonic_spectrum(h, ns, "hann", ms, synth.sample_rate_hz, synth.floor_db)
        bufs.append(zero_phase_to_linear(np.fft.irfft(spec, ns), ms))
    y = overlap_add(bufs, synth.hop_size, w)
    return y[ms // 2:]


def synthesize_residual_frames(envelopes_db: Sequence[np.ndarray], synth: SynthesisConfig,
                               rng: np.random.Generator) -> np.ndarray:
    """Random-phase noise frames (per-sample power envelopes on the synthesis grid)."""
    ns, ms = synth.fft_size, synth.window_size
    w = make_window("hann", ms)
    bufs = []
    for env in envelopes_db:
        noise = np.fft.ifft(synth_residual_frame(env, rng, synth.floor_db)).real
        bufs.append(noise[:ms] * w)
    y = overlap_add(bufs, synth.hop_size, w, power=True)
    return y[ms // 2:]


def integrate_phases(f0_track: Sequence[float], n_harm: int, hop: int, sample_rate_hz: float,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Harmonic phases at frame centres obtained by integrating r * f0 across hops."""
    f0 = np.asarray(f0_track, dtype=float)
    r = np.arange(1, n_harm + 1)
    phases = np.zeros((f0.size, n_harm))
    if rng is not None:
        phases[0] = rng.uniform(-np.pi, np.pi, n_harm)
    for m in range(1, f0.size):
        phases[m] = phases[m - 1] + 2.0 * np.pi * r * 0.5 * (f0[m - 1] + f0[m]) * hop / sample_rate_hz
    return np.angle(np.exp(1j * phases))


@dataclass
class HprFrame:
    """Everything the per-frame decomposition produces."""

    frame: SpectralFrame
    f0_hz: Optional[float]
    harmonic: HarmonicFrame
    residual: ResidualFrame


def decompose_frame(frame: SpectralFrame, f0_hz: Optional[float], peaks: Sequence[Peak],
                    config: AnalysisConfig, max_harmonics: int = MAX_HARMONICS,
                    dev_fraction: float = DEV_FRACTION, refine: bool = True) -> HprFrame:
    if f0_hz is None:
        h = HarmonicFrame.empty()
    else:
        h = match_harmonics(peaks, f0_hz, config.sample_rate_hz, max_harmonics, dev_fraction,
                            frame=frame, floor_db=config.mag_floor_db)
        if refine:
            h = refine_harmonics(frame, h, config)
    res = compute_residual(frame, h, config)
    return HprFrame(frame, f0_hz, h, res)
