"""Note-level analysis into frame features and resynthesis from them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import f0_track, segment_sustain
from .dsp_core import AnalysisConfig, analyze_frames, detect_peaks, make_window
from .envelope import CepstralEnvelope, FrameFeatures, envelope_eval, frame_features
from .hpr import (HarmonicFrame, HprFrame, SynthesisConfig, decompose_frame, integrate_phases,
                  n_harmonics_for, synthesize_harmonic_frames, synthesize_residual_frames)


@dataclass
class NoteAnalysis:
    note_id: str
    sample_rate: int
    centers: np.ndarray            # centres of the sustain frames
    span: tuple
    hpr: list = field(default_factory=list)
    features: list = field(default_factory=list)


def analyze_note(samples, sample_rate: int, note_id: str = "",
                 config: Optional[AnalysisConfig] = None, refine: bool = True) -> NoteAnalysis:
    """Segment the sustain region and decompose each of its frames.

    Raises :class:`~violin_hpr.dataset.SegmentationError` if no sustain is found.
    """
    config = config or AnalysisConfig(sample_rate_hz=int(sample_rate))
    x = np.asarray(samples, dtype=float)
    frames = analyze_frames(x, config)
    f0s = f0_track(x, config, frames)
    span, (i0, i1) = segment_sustain(x, sample_rate, config, f0s=f0s, return_frames=True)
    out = NoteAnalysis(note_id, int(sample_rate), np.array([frames[i].center_sample for i in range(i0, i1)]), span)
    for k, i in enumerate(range(i0, i1)):
        fr = frames[i]
        peaks = detect_peaks(fr, config.peak_threshold_db, config.sample_rate_hz)
        h = decompose_frame(fr, f0s[i], peaks, config, refine=refine)
        out.hpr.append(h)
        out.features.append(frame_features(note_id, k, h.harmonic, h.residual.res_mag_db,
                                           config.sample_rate_hz))
    return out


def residual_db_offset(config: AnalysisConfig) -> float:
    """dB to subtract from analysis-domain residual magnitudes to get per-sample power."""
    w = make_window(config.window_kind, config.window_size)
    return float(10.0 * np.log10(np.sum(w**2)))


def harmonic_frames_from_features(features: Sequence[FrameFeatures], config: AnalysisConfig,
                                  hop: int, rng: Optional[np.random.Generator] = None) -> list:
    fs = config.sample_rate_hz
    f0 = np.array([f.f0_hz for f in features])
    n_max = max(n_harmonics_for(v, fs) for v in f0) if len(f0) else 0
    phases = integrate_phases(f0, n_max, hop, fs, rng)
    out = []
    for m, ft in enumerate(features):
        n = n_harmonics_for(ft.f0_hz, fs)
        freqs = ft.f0_hz * np.arange(1, n + 1)
        mags = envelope_eval(CepstralEnvelope(ft.cc_h, fs), freqs)
        out.append(HarmonicFrame(ft.f0_hz, freqs, mags, phases[m, :n].copy()))
    return out


def residual_envelopes_from_features(features: Sequence[FrameFeatures], config: AnalysisConfig,
                                     synth: SynthesisConfig) -> list:
    grid = np.fft.rfftfreq(synth.fft_size, 1.0 / config.sample_rate_hz)
    off = residual_db_offset(config)
    return [envelope_eval(CepstralEnvelope(ft.cc_r, config.sample_rate_hz), grid) - off for ft in features]


def resynthesize(features: Sequence[FrameFeatures], config: Optional[AnalysisConfig] = None,
                 seed: int = 0, harmonic_only: bool = False):
    """Waveform from per-frame features: harmonics at r*f0 plus random-phase residual.

    Returns ``(signal, harmonic, residual)``; sample 0 is the centre of the
    first frame.
    """
    config = config or AnalysisConfig()
    synth = SynthesisConfig(config.sample_rate_hz, config.hop_size, config.mag_floor_db)
    rng = np.random.default_rng(seed)
    hframes = harmonic_frames_from_features(features, config, synth.hop_size, rng)
    harm = synthesize_harmonic_frames(hframes, synth)
    if harmonic_only:
        return harm, harm, np.zeros_like(harm)
    res = synthesize_residual_frames(residual_envelopes_from_features(features, config, synth), synth, rng)
    return harm + res, harm, res
