"""Note corpus: filename convention, WAV I/O, sustain segmentation and a
synthetic violin-like note generator with analytic ground truth."""

from __future__ import annotations

import csv
import re
import struct
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.ndimage import median_filter

from .dsp_core import AnalysisConfig, analyze_frames, detect_peaks, frame_at, frame_centers, make_window, twm_f0

OCTAVES = ("L", "M", "U")
NOTES = ("Sa", "Ri1", "Ri2", "Ga2", "Ga3", "Ma1", "Ma2", "Pa", "Dha1", "Dha2", "Ni2", "Ni3")
STYLES = ("Sm", "At")
LOUDNESS = ("So", "Lo")
DEFAULT_TONIC_HZ = 328.0
SUSTAIN_REL_DB = 12.0
MIN_SUSTAIN_FRAMES = 8
GAIN_DECIMATION = 32


class NoteNameError(ValueError):
    def __init__(self, name: str, field_name: str, value: str = ""):
        self.field = field_name
        super().__init__(f"{name!r}: bad {field_name} field {value!r}")


class WavError(IOError):
    pass


class SegmentationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoteMeta:
    index: int
    octave: str
    note: str
    style: str = "Sm"
    loudness: str = "So"

    def __post_init__(self):
        for name, val, allowed in (("octave", self.octave, OCTAVES), ("note", self.note, NOTES),
                                   ("style", self.style, STYLES), ("loudness", self.loudness, LOUDNESS)):
            if val not in allowed:
                raise NoteNameError(str(self), name, val)
        if self.index < 0:
            raise NoteNameError(str(self), "index", str(self.index))

    @property
    def stem(self) -> str:
        return stem_for(self)

    @property
    def note_index(self) -> int:
        return NOTES.index(self.note)


def stem_for(meta: NoteMeta) -> str:
    return f"{meta.index:02d}_{meta.octave}_{meta.note}_{meta.style}_{meta.loudness}"


_FIELDS = ("index", "octave", "note", "style", "loudness")


def parse_note_filename(name) -> NoteMeta:
    """Parse ``NN_O_Note_Style_Loudness[.wav]`` into a :class:`NoteMeta`."""
    stem = Path(str(name)).name
    if stem.lower().endswith(".wav"):
        stem = stem[:-4]
    parts = stem.split("_")
    if len(parts) != 5:
        raise NoteNameError(stem, _FIELDS[min(len(parts), 4)] if len(parts) < 5 else "loudness",
                            "" if len(parts) < 5 else "_".join(parts[4:]))
    idx, octave, note, style, loud = parts
    if not re.fullmatch(r"\d{2,}", idx):
        raise NoteNameError(stem, "index", idx)
    for fname, val, allowed in (("octave", octave, OCTAVES), ("note", note, NOTES),
                                ("style", style, STYLES), ("loudness", loud, LOUDNESS)):
        if val not in allowed:
            raise NoteNameError(stem, fname, val)
    return NoteMeta(int(idx), octave, note, style, loud)


# ---------------------------------------------------------------- WAV I/O

def read_wav(path):
    """Samples in [-1, 1] (mono) and the sample rate.

    Accepts 16- and 24-bit integer PCM and 32-bit float; stereo is averaged.
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", wavfile.WavFileWarning)
            rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, struct.error, wavfile.WavFileWarning, OSError) as exc:
        raise WavError(f"{path}: unreadable or truncated WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        # scipy returns 24-bit PCM left-justified in int32; 32-bit PCM is not supported
        with open(path, "rb") as fh:
            bits = _bits_per_sample(fh.read(64 * 1024))
        if bits != 24:
            raise WavError(f"{path}: unsupported {bits}-bit integer PCM")
        x = data.astype(float) / 2.0**31
    elif data.dtype == np.float32:
        x = data.astype(float)
    else:
        raise WavError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(rate)


def _bits_per_sample(head: bytes) -> int:
    pos = head.find(b"fmt ")
    if pos < 0:
        return 0
    return int.from_bytes(head[pos + 22:pos + 24], "little")


def write_wav(path, samples, sample_rate: int) -> None:
    """16-bit PCM mono; values are clipped to [-1, 1)."""
    x = np.asarray(samples, dtype=float)
    if not np.all(np.isfinite(x)):
        raise WavError("non-finite samples")
    q = np.clip(np.rint(x * 32768.0), -32768, 32767).astype(np.int16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(sample_rate), q)


# ---------------------------------------------------------------- segmentation

def frame_rms_db(samples, config: AnalysisConfig, centers=None) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    if centers is None:
        centers = frame_centers(x.size, config.hop_size)
    out = np.empty(len(centers))
    for i, c in enumerate(centers):
        seg = frame_at(x, int(c), config.window_size)
        out[i] = 10.0 * np.log10(np.mean(seg**2) + 1e-30)
    return out


def f0_track(samples, config: AnalysisConfig, frames=None) -> list:
    """Per-frame TWM f0 (``None`` where no pitch), with continuity to the previous frame."""
    if frames is None:
        frames = analyze_frames(samples, config)
    out = []
    prev = None
    for fr in frames:
        peaks = detect_peaks(fr, config.peak_threshold_db, config.sample_rate_hz)
        f0 = twm_f0(peaks, config.f0_min_hz, config.f0_max_hz, prev_f0=prev,
                    error_threshold=config.twm_error_threshold)
        out.append(f0)
        prev = f0
    return out


def _runs(mask):
    runs = []
    start = None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def segment_sustain(samples, sample_rate: float, config: Optional[AnalysisConfig] = None,
                    rel_threshold_db: float = SUSTAIN_REL_DB, f0s=None, return_frames: bool = False,
                    min_frames: int = MIN_SUSTAIN_FRAMES):
    """Sample span ``(start, end)`` of the sustain region.

    Frames qualify when their RMS is within ``rel_threshold_db`` of the
    loudest frame, a pitch was found and it lies within one semitone of the
    run median (after a 5-frame median filter of log f0). The largest such
    contiguous run is returned; it must span at least ``min_frames`` frames.
    """
    config = config or AnalysisConfig(sample_rate_hz=int(sample_rate))
    if config.sample_rate_hz != sample_rate:
        raise ValueError("analysis config sample rate differs from the signal")
    x = np.asarray(samples, dtype=float)
    hop = config.hop_size
    centers = frame_centers(x.size, hop)
    if centers.size <= 4:
        raise SegmentationError("note shorter than 4 analysis frames")
    rms = frame_rms_db(x, config, centers)
    if not np.isfinite(rms.max()) or rms.max() < -200:
        raise SegmentationError("signal is silent")
    if f0s is None:
        f0s = f0_track(x, config)
    loud = rms >= rms.max() - rel_threshold_db
    pitched = np.array([f is not None for f in f0s])
    best = None
    for a, b in _runs(loud & pitched):
        # tighten each candidate run to frames within a semitone of its median
        f = np.log2(np.array([f0s[i] for i in range(a, b)], dtype=float))
        # a 5-frame median removes isolated octave slips before the test
        if f.size >= 5:
            f = median_filter(f, size=5, mode="nearest")
        ok = np.abs(12.0 * (f - np.median(f))) <= 1.0
        for a2, b2 in _runs(ok):
            if best is None or (b2 - a2) > (best[1] - best[0]):
                best = (a + a2, a + b2)
    if best is None or best[1] - best[0] < min_frames:
        raise SegmentationError("no sustained pitched frames")
    i0, i1 = best
    start = max(int(centers[i0]) - hop // 2, 0)
    end = min(int(centers[i1 - 1]) + hop // 2, x.size)
    if return_frames:
        return (start, end), (i0, i1)
    return start, end


# ---------------------------------------------------------------- synthetic corpus

def note_frequency(meta: NoteMeta, tonic_hz: float = DEFAULT_TONIC_HZ) -> float:
    if tonic_hz <= 0:
        raise ValueError("tonic must be positive")
    s = NOTES.index(meta.note)
    o = OCTAVES.index(meta.octave) - 1
    return float(tonic_hz * 2.0 ** (s / 12.0) * 2.0**o)


@dataclass
class BodyFilter:
    """Magnitude response of a sum of narrow resonances over a flat floor."""

    centers_hz: np.ndarray
    q: np.ndarray
    gains: np.ndarray
    floor: float = 0.05

    @classmethod
    def random(cls, seed: int, n: int = 8, f_lo: float = 280.0, f_hi: float = 8000.0,
               q_range=(20.0, 80.0)) -> "BodyFilter":
        rng = np.random.default_rng(seed)
        centers = np.geomspace(f_lo, f_hi, n) * 2.0 ** rng.uniform(-0.15, 0.15, n)
        return cls(centers, rng.uniform(*q_range, n), rng.uniform(0.4, 1.0, n))

    def magnitude(self, f_hz) -> np.ndarray:
        f = np.atleast_1d(np.asarray(f_hz, dtype=float))
        out = np.full(f.shape, self.floor)
        pos = f > 0
        fp = f[pos][:, None]
        detune = fp / self.centers_hz - self.centers_hz / fp
        out[pos] += (self.gains / np.sqrt(1.0 + (self.q * detune) ** 2)).sum(axis=1)
        return out

    def to_dict(self) -> dict:
        return {"centers_hz": self.centers_hz.tolist(), "q": self.q.tolist(),
                "gains": self.gains.tolist(), "floor": self.floor}


def source_tilt(f_hz, force: float, ref_hz: float = 500.0) -> np.ndarray:
    """Linear gain of the brightness rule: +3 dB/octave per doubling of bow force."""
    f = np.maximum(np.asarray(f_hz, dtype=float), 50.0)
    return 10.0 ** (3.0 * np.log2(force) * np.log2(f / ref_hz) / 20.0)


FORCE = {"So": 1.0, "Lo": 2.0}


@dataclass
class SynthParams:
    vibrato_cents: float = 3.0
    vibrato_hz: float = 5.5
    noise_db: float = -38.0
    level: float = 0.25
    attack_s: float = 0.08
    release_s: float = 0.15
    noisy_attack_s: float = 0.15
    fluctuation_db: float = 0.3
    max_partial_hz: float = 20000.0
    force_wander_oct: float = 0.25    # rms of the slow bow-force drift, in octaves


@dataclass
class GroundTruth:
    """What the generator put in, for checking the analysis."""

    sample_rate: int
    f_inst: np.ndarray            # instantaneous f0 per sample
    gain: np.ndarray              # common amplitude envelope per sample
    n_partials: int
    partial_gain: object          # callable (freqs_hz, force) -> linear gain, 1/r applied outside
    noise_gain_sq: np.ndarray     # |G|^2 of the noise shaping on the rfft grid of the signal
    noise_level: float            # noise amplitude relative to ``gain``
    sustain_start: int
    n_samples: int = 0
    force: Optional[np.ndarray] = None   # bow force per sample

    def harmonic_amplitudes(self, center: int) -> np.ndarray:
        """Cosine amplitudes A_r of the partials at sample ``center``."""
        f = self.f_inst[center]
        r = np.arange(1, self.n_partials + 1)
        return self.gain[center] * self.partial_gain(r * f, self.force[center]) / r

    def harmonic_freqs(self, center: int) -> np.ndarray:
        return self.f_inst[center] * np.arange(1, self.n_partials + 1)

    def residual_spectrum_db(self, centers, config: AnalysisConfig) -> np.ndarray:
        """Expected analysis power spectrum (dB) of the noise source at each centre.

        E|X(k)|^2 = sum_l r_w(l) R(l) exp(-j w_k l), with r_w the window
        autocorrelation and R the noise autocorrelation.
        """
        n_sig = self.n_samples or 2 * (self.noise_gain_sq.size - 1)
        acf = np.fft.irfft(self.noise_gain_sq, n_sig)
        w = make_window(config.window_kind, config.window_size)
        m = w.size
        rw = np.correlate(w, w, mode="full")  # lags -(m-1)..(m-1)
        lags = np.arange(-(m - 1), m)
        prod = rw * acf[lags % n_sig]
        buf = np.zeros(config.fft_size)
        buf[lags % config.fft_size] += prod
        base = np.fft.rfft(buf).real
        base = np.maximum(base, 1e-30)
        g = self.gain[np.asarray(centers, dtype=int)] * self.noise_level
        return 10.0 * np.log10(base[None, :] * (g[:, None] ** 2) + 1e-30)


@dataclass
class NoteRecord:
    meta: NoteMeta
    samples: np.ndarray
    sample_rate: int
    sustain_span: Optional[tuple] = None
    f0_nominal: Optional[float] = None
    truth: Optional[GroundTruth] = None
    path: Optional[Path] = None


def _amp_envelope(n: int, fs: int, p: SynthParams, rng, n_attack: int) -> np.ndarray:
    t = np.arange(n) / fs
    g = np.ones(n)
    # attack: quiet onset rising in dB, then a short bloom to full level
    na = max(n_attack, 1)
    u = np.clip(t / (na / fs), 0, 1)
    bloom = 0.15
    db = np.where(u < 1 - bloom, -60.0 + 40.0 * u / (1 - bloom),
                  -20.0 + 20.0 * 0.5 * (1 - np.cos(np.pi * (u - (1 - bloom)) / bloom)))
    g *= np.where(u < 1, 10 ** (db / 20), 1.0)
    nr = int(round(p.release_s * fs))
    if nr > 0:
        v = np.clip((t - (n - nr) / fs) / p.release_s, 0, 1)
        g *= 10 ** (-60.0 * v / 20)
    if p.fluctuation_db > 0:
        rate = rng.uniform(0.7, 1.5)
        g *= 10 ** (p.fluctuation_db * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)) / 20)
    return g


def synth_note(meta: NoteMeta, tonic_hz: float = DEFAULT_TONIC_HZ, duration_s: float = 2.5,
               seed: int = 0, body_filter: Optional[BodyFilter] = None, sample_rate: int = 44100,
               params: Optional[SynthParams] = None) -> NoteRecord:
    """Bowed-string-like tone: 1/r partials plus bow noise through a shared body filter."""
    if duration_s < 1.0:
        raise ValueError("duration must be at least 1 s")
    p = params or SynthParams()
    body = body_filter if body_filter is not None else BodyFilter.random(0)
    rng = np.random.default_rng(seed)
    fs = int(sample_rate)
    n = int(round(duration_s * fs))
    f0 = note_frequency(meta, tonic_hz)
    force = FORCE[meta.loudness]
    level = p.level * force * 10 ** (rng.uniform(-1, 1) / 20)
    noise_level = level * 10 ** ((p.noise_db + rng.uniform(-2, 2)) / 20)

    t = np.arange(n) / fs
    depth = p.vibrato_cents / 1200.0
    vib_rate = p.vibrato_hz * rng.uniform(0.9, 1.1)
    f_inst = f0 * 2.0 ** (depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase0 = np.cumsum(2 * np.pi * f_inst / fs)

    n_attack = int(round(p.attack_s * fs))
    if meta.style == "At":
        n_attack += int(round(p.noisy_attack_s * fs))
    gain = level * _amp_envelope(n, fs, p, rng, n_attack)

    # slow bow-force drift changes the brightness within the note
    wf = rng.uniform(0.3, 1.5, 3)
    wp = rng.uniform(0, 2 * np.pi, 3)
    wander = np.sin(2 * np.pi * wf[None, :] * t[:, None] + wp[None, :]).sum(axis=1) / np.sqrt(1.5)
    force_t = force * 2.0 ** (p.force_wander_oct * wander)

    def partial_gain(freqs, force_now):
        return body.magnitude(freqs) * source_tilt(freqs, force_now)

    n_part = int(np.floor(min(p.max_partial_hz, 0.5 * fs) / (f0 * 2 ** depth)))
    n_part = max(n_part, 1)
    harm = np.zeros(n)
    ph_off = rng.uniform(-np.pi, np.pi, n_part)
    # partial gains follow the slow vibrato; evaluate them on a coarse grid
    coarse = np.arange(0, n + GAIN_DECIMATION, GAIN_DECIMATION).clip(max=n - 1)
    for r in range(1, n_part + 1):
        g_r = np.interp(np.arange(n), coarse, partial_gain(r * f_inst[coarse], force_t[coarse]))
        harm += g_r / r * np.cos(r * phase0 + ph_off[r - 1])
    harm *= gain

    # bow noise: white noise shaped on the rfft grid by the same body and tilt
    freqs = np.fft.rfftfreq(n, 1 / fs)
    shape = body.magnitude(freqs) * source_tilt(freqs, force)
    shape /= np.sqrt(np.mean(shape**2))
    white = rng.standard_normal(n)
    noise = np.fft.irfft(np.fft.rfft(white) * shape, n)
    x = harm + noise_level * gain / level * noise

    if meta.style == "At":
        # scratchy onset: broadband burst decaying over the noisy attack
        na = int(round(p.noisy_attack_s * fs))
        burst = rng.standard_normal(na) * np.exp(-np.arange(na) / (0.3 * na)) * level * 0.5
        x[:na] += burst
    truth = GroundTruth(fs, f_inst, gain, n_part, partial_gain, shape**2,
                        noise_level / level, n_attack, n, force_t)
    return NoteRecord(meta, x, fs, None, f0, truth)


@dataclass
class CorpusSpec:
    octaves: Sequence[str] = OCTAVES
    notes: Sequence[str] = NOTES
    styles: Sequence[str] = ("Sm", "At")
    loudness: Sequence[str] = LOUDNESS
    instances: int = 2
    duration_s: float = 2.5
    tonic_hz: float = DEFAULT_TONIC_HZ
    seed: int = 0
    sample_rate: int = 44100

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("octaves", "notes", "styles", "loudness"):
            d[k] = list(d[k])
        return d


MANIFEST_COLUMNS = ("filename", "index", "octave", "note", "style", "loudness", "duration_s", "seed")


def note_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def corpus_metas(spec: CorpusSpec) -> list[NoteMeta]:
    metas = []
    idx = 1
    for octave in spec.octaves:
        for note in spec.notes:
            for style in spec.styles:
                for loud in spec.loudness:
                    for _ in range(spec.instances):
                        metas.append(NoteMeta(idx, octave, note, style, loud))
                        idx += 1
    return metas


def build_corpus(spec: CorpusSpec, out_dir=None, params: Optional[SynthParams] = None) -> list[NoteRecord]:
    """Generate every note of the grid; with ``out_dir`` also write WAVs and a manifest."""
    body = BodyFilter.random(spec.seed)
    metas = corpus_metas(spec)
    stems = [stem_for(m) for m in metas]
    if len(set(m.index for m in metas)) != len(metas):
        raise ValueError("duplicate note indices")
    records = []
    rows = []
    for meta, stem in zip(metas, stems):
        s = note_seed(spec.seed, meta.index)
        rec = synth_note(meta, spec.tonic_hz, spec.duration_s, s, body, spec.sample_rate, params)
        if out_dir is not None:
            rec.path = Path(out_dir) / f"{stem}.wav"
            write_wav(rec.path, rec.samples, rec.sample_rate)
        records.append(rec)
        rows.append([f"{stem}.wav", meta.index, meta.octave, meta.note, meta.style, meta.loudness,
                     f"{spec.duration_s:.6g}", s])
    if out_dir is not None:
        write_manifest(Path(out_dir) / "manifest.csv", rows)
    return records


def write_manifest(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_COLUMNS)
        wr.writerows(rows)


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        meta = parse_note_filename(r["filename"])
        if (meta.index, meta.octave, meta.note, meta.style, meta.loudness) != (
                int(r["index"]), r["octave"], r["note"], r["style"], r["loudness"]):
            raise ValueError(f"manifest row disagrees with its filename: {r['filename']}")
        r["meta"] = meta
    return rows


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    seed: int = 0
    unit: str = "frame"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.unit not in ("frame", "instance"):
            raise ValueError("unit must be 'frame' or 'instance'")


def split_indices(note_ids: Sequence[str], spec: SplitSpec):
    """Boolean train mask over frames tagged with their note id."""
    ids = np.asarray(note_ids)
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros(ids.size, dtype=bool)
    if spec.unit == "frame":
        perm = rng.permutation(ids.size)
        mask[perm[:int(round(spec.train_fraction * ids.size))]] = True
    else:
        uniq = sorted(set(ids.tolist()))
        perm = rng.permutation(len(uniq))
        n_train = min(max(int(round(spec.train_fraction * len(uniq))), 1), max(len(uniq) - 1, 1))
        train = {uniq[i] for i in perm[:n_train]}
        mask = np.array([i in train for i in ids.tolist()], dtype=bool)
    return mask
