"""Handcrafted acoustic features: eGeMAPS-style descriptors and utterance aggregates.

Frame-level low-level descriptors (LLDs) are computed on 25 ms frames with a
10 ms hop and summarised by mean and standard deviation over 1 s segments.
Frames with energy below the silence floor get 0 for every descriptor.
Voice-quality descriptors are summarised over voiced frames only.
Descriptors that compare neighbouring frames (flux, jitter, shimmer) only
pair frames inside the same segment. Shifting the audio by a whole segment
therefore shifts the rows exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct
from scipy.linalg import solve_toeplitz

from ..dataset import SAMPLE_RATE

logger = logging.getLogger(__name__)

LLD_NAMES = (
    "loudness",
    "alpha_ratio",
    "hammarberg_index",
    "spectral_slope_0_500",
    "spectral_slope_500_1500",
    "spectral_flux",
    "mfcc1",
    "mfcc2",
    "mfcc3",
    "mfcc4",
    "f0_hz",
    "jitter_local",
    "shimmer_local_db",
    "hnr_db",
    "h1_h2_db",
    "h1_a3_db",
    "f1_frequency",
    "f1_bandwidth",
    "f1_amplitude_db",
    "f2_frequency",
    "f2_amplitude_db",
    "f3_frequency",
    "f3_amplitude_db",
)
VOICED_ONLY = frozenset(
    {"f0_hz", "jitter_local", "shimmer_local_db", "hnr_db", "h1_h2_db", "h1_a3_db",
     "f1_amplitude_db", "f2_amplitude_db", "f3_amplitude_db"}
)
SUMMARY_NAMES = tuple(f"{n}_{stat}" for n in LLD_NAMES for stat in ("mean", "std"))

AGGREGATE_NAMES = (
    "duration_s",
    "phonation_time_s",
    "phonation_ratio",
    "num_pauses",
    "mean_pause_s",
    "pause_rate_per_s",
    "speaking_rate_wps",
    "overall_rate_wps",
    "f0_range_st",
    "f0_std_st",
    "energy_mean_db",
    "energy_std_db",
)

_EPS = 1e-12


@dataclass(frozen=True)
class SegmentConfig:
    frame_length: float = 0.025
    hop_length: float = 0.010
    segment_length: float = 1.0
    pitch_window: float = 0.040
    f0_min: float = 60.0
    f0_max: float = 600.0
    voicing_threshold: float = 0.5
    silence_db: float = -60.0  # dBFS frame RMS below which a frame is silent
    n_mels: int = 26
    lpc_order: int = 12
    min_pause: float = 0.15

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_length * SAMPLE_RATE))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_length * SAMPLE_RATE))

    @property
    def frames_per_segment(self) -> int:
        return int(round(self.segment_length / self.hop_length))


@dataclass(frozen=True)
class SequenceFeatures:
    utterance_id: str
    values: np.ndarray  # segments x 46
    names: tuple[str, ...] = SUMMARY_NAMES


@dataclass(frozen=True)
class AggregateFeatures:
    utterance_id: str
    values: np.ndarray
    names: tuple[str, ...] = AGGREGATE_NAMES
    missing: frozenset[str] = field(default_factory=frozenset)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


# --------------------------------------------------------------------------- framing


def _frame(x: np.ndarray, length: int, hop: int, n_frames: int) -> np.ndarray:
    need = (n_frames - 1) * hop + length
    if len(x) < need:
        x = np.pad(x, (0, need - len(x)))
    return np.lib.stride_tricks.sliding_window_view(x, length)[::hop][:n_frames]


def num_frames(n_samples: int, config: SegmentConfig) -> int:
    if n_samples < config.frame_samples:
        return 1
    return 1 + (n_samples - config.frame_samples) // config.hop_samples


def frame_energy_db(x: np.ndarray, config: SegmentConfig) -> np.ndarray:
    frames = _frame(np.asarray(x, dtype=np.float64), config.frame_samples, config.hop_samples,
                    num_frames(len(x), config))
    return 10 * np.log10(np.mean(frames ** 2, axis=1) + _EPS)


def _mel_filterbank(n_mels: int, n_fft: int, sr: int, fmin: float = 20.0, fmax: float | None = None):
    fmax = fmax or sr / 2
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)
    edges = inv(np.linspace(mel(fmin), mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1 / sr)
    fb = np.zeros((n_mels, len(freqs)))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        fb[i] = np.clip(np.minimum((freqs - lo) / (mid - lo), (hi - freqs) / (hi - mid)), 0, None)
    return fb


# --------------------------------------------------------------------------- pitch


def track_pitch(x: np.ndarray, config: SegmentConfig = SegmentConfig()):
    """Per-frame F0 (Hz, 0 when unvoiced) and peak normalized autocorrelation.

    Normalized cross-correlation over a ``pitch_window`` analysis span that
    starts at each frame, with parabolic refinement of the best lag.
    """
    x = np.asarray(x, dtype=np.float64)
    n = num_frames(len(x), config)
    hop, win = config.hop_samples, int(round(config.pitch_window * SAMPLE_RATE))
    lag_min = int(np.floor(SAMPLE_RATE / config.f0_max))
    lag_max = int(np.ceil(SAMPLE_RATE / config.f0_min))
    padded = np.pad(x, (0, max(0, (n - 1) * hop + win + lag_max + 2 - len(x))))
    base = _frame(padded, win, hop, n)
    e0 = np.sum(base ** 2, axis=1)
    csum = np.concatenate([[0.0], np.cumsum(padded ** 2)])
    starts = np.arange(n) * hop
    lags = np.arange(lag_min - 1, lag_max + 2)
    r = np.empty((n, len(lags)))
    for j, lag in enumerate(lags):
        shifted = _frame(padded[lag:], win, hop, n)
        e1 = csum[starts + lag + win] - csum[starts + lag]
        r[:, j] = np.einsum("ij,ij->i", base, shifted) / np.sqrt(e0 * e1 + _EPS)

    f0 = np.zeros(n)
    peak = np.zeros(n)
    rms_db = 10 * np.log10(e0 / win + _EPS)
    for i in range(n):
        if rms_db[i] < config.silence_db:
            continue
        inner = r[i, 1:-1]
        # local maxima only; the first such peak within 2% of the global maximum avoids octave errors
        is_peak = (inner >= r[i, :-2]) & (inner >= r[i, 2:])
        if not is_peak.any():
            continue
        cand = np.flatnonzero(is_peak)
        best_val = inner[cand].max()
        if best_val < config.voicing_threshold:
            continue
        k = cand[np.argmax(inner[cand] >= best_val * 0.98)] + 1
        a, b, c = r[i, k - 1], r[i, k], r[i, k + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        lag = lags[k] + shift
        f0[i] = SAMPLE_RATE / lag
        peak[i] = min(b - 0.25 * (a - c) * shift, 1.0)
    return f0, peak


# --------------------------------------------------------------------------- LLDs


def _band(freqs, lo, hi):
    return (freqs >= lo) & (freqs < hi)


def _slope(freqs, power_db, mask):
    f, p = freqs[mask], power_db[mask]
    f = f - f.mean()
    return float(np.dot(f, p - p.mean()) / (np.dot(f, f) + _EPS))


def _amp_db_at(freqs, mag, f, width):
    if f <= 0:
        return 0.0
    m = np.abs(freqs - f) <= width
    if not m.any():
        m = np.abs(freqs - f) == np.abs(freqs - f).min()
    return 20 * np.log10(mag[m].max() + _EPS)


def _formants(frame: np.ndarray, order: int) -> list[tuple[float, float]]:
    y = np.append(frame[0], frame[1:] - 0.97 * frame[:-1]) * np.hamming(len(frame))
    ac = np.correlate(y, y, mode="full")[len(y) - 1: len(y) + order]
    if ac[0] <= _EPS:
        return []
    ac = ac.copy()
    ac[0] *= 1 + 1e-9
    try:
        a = solve_toeplitz(ac[:-1], -ac[1:])
    except np.linalg.LinAlgError:
        return []
    roots = np.roots(np.concatenate([[1.0], a]))
    roots = roots[np.imag(roots) > 0]
    freqs = np.angle(roots) * SAMPLE_RATE / (2 * np.pi)
    bws = -SAMPLE_RATE / np.pi * np.log(np.abs(roots) + _EPS)
    keep = (freqs > 90) & (bws < 400)
    return sorted(zip(freqs[keep].tolist(), bws[keep].tolist()))


def frame_descriptors(x: np.ndarray, config: SegmentConfig = SegmentConfig()):
    """Return ``(lld, voiced, normalized_spectra, peak_amp)``; ``lld`` is frames x 23.

    Flux, jitter and shimmer columns are left at 0 here; they depend on
    neighbouring frames and are filled in per segment.
    """
    x = np.asarray(x, dtype=np.float64)
    n = num_frames(len(x), config)
    N, hop = config.frame_samples, config.hop_samples
    frames = _frame(x, N, hop, n)
    n_fft = 1 << (N - 1).bit_length()
    freqs = np.fft.rfftfreq(n_fft, 1 / SAMPLE_RATE)
    mag = np.abs(np.fft.rfft(frames * np.hamming(N), n=n_fft, axis=1))
    power = mag ** 2
    rms_db = 10 * np.log10(np.mean(frames ** 2, axis=1) + _EPS)
    active = rms_db >= config.silence_db

    f0, peak = track_pitch(x, config)
    voiced = (f0 > 0) & active
    fb = _mel_filterbank(config.n_mels, n_fft, SAMPLE_RATE)
    mel_energy = power @ fb.T
    mfcc = dct(np.log(mel_energy + 1e-10), type=2, norm="ortho", axis=1)[:, 1:5]
    loud = np.sum(mel_energy ** 0.3, axis=1)

    idx = {name: i for i, name in enumerate(LLD_NAMES)}
    out = np.zeros((n, len(LLD_NAMES)))
    low, high = _band(freqs, 50, 1000), _band(freqs, 1000, 5000)
    s1, s2 = _band(freqs, 0, 500), _band(freqs, 500, 1500)
    h_lo, h_hi = _band(freqs, 0, 2000), _band(freqs, 2000, 5000)
    spectra = mag / (mag.sum(axis=1, keepdims=True) + _EPS)
    for t in range(n):
        if not active[t]:
            spectra[t] = 0.0
            continue
        p, pdb = power[t], 10 * np.log10(power[t] + _EPS)
        out[t, idx["loudness"]] = loud[t]
        out[t, idx["alpha_ratio"]] = 10 * np.log10((p[low].sum() + _EPS) / (p[high].sum() + _EPS))
        out[t, idx["hammarberg_index"]] = 10 * np.log10((p[h_lo].max() + _EPS) / (p[h_hi].max() + _EPS))
        out[t, idx["spectral_slope_0_500"]] = _slope(freqs, pdb, s1)
        out[t, idx["spectral_slope_500_1500"]] = _slope(freqs, pdb, s2)
        out[t, idx["mfcc1"]: idx["mfcc4"] + 1] = mfcc[t]
        formants = _formants(frames[t], config.lpc_order)
        for k, (name_f, name_a) in enumerate((("f1_frequency", "f1_amplitude_db"),
                                              ("f2_frequency", "f2_amplitude_db"),
                                              ("f3_frequency", "f3_amplitude_db"))):
            if k < len(formants):
                out[t, idx[name_f]] = formants[k][0]
                if k == 0:
                    out[t, idx["f1_bandwidth"]] = formants[0][1]
        if voiced[t]:
            r = min(peak[t], 1 - 1e-6)
            out[t, idx["f0_hz"]] = f0[t]
            out[t, idx["hnr_db"]] = float(np.clip(10 * np.log10(max(r, _EPS) / (1 - r)), -20, 60))
            width = f0[t] / 4
            h1 = _amp_db_at(freqs, mag[t], f0[t], width)
            out[t, idx["h1_h2_db"]] = h1 - _amp_db_at(freqs, mag[t], 2 * f0[t], width)
            f3 = out[t, idx["f3_frequency"]]
            out[t, idx["h1_a3_db"]] = h1 - _amp_db_at(freqs, mag[t], f3, width) if f3 > 0 else 0.0
            for name_f, name_a in (("f1_frequency", "f1_amplitude_db"), ("f2_frequency", "f2_amplitude_db"),
                                   ("f3_frequency", "f3_amplitude_db")):
                ff = out[t, idx[name_f]]
                if ff > 0:
                    out[t, idx[name_a]] = _amp_db_at(freqs, mag[t], ff, width) - h1
    peak_amp = np.max(np.abs(frames), axis=1)
    return out, voiced, spectra, peak_amp


def extract_sequence_features(
    audio: np.ndarray, config: SegmentConfig = SegmentConfig(), utterance_id: str = ""
) -> SequenceFeatures:
    """Per-segment mean/std of the 23 descriptors (segments x 46)."""
    audio = np.asarray(audio, dtype=np.float64)
    seg_samples = int(round(config.segment_length * SAMPLE_RATE))
    if len(audio) < seg_samples:
        logger.warning("%s: audio shorter than one %.2f s segment; summarising as a single segment",
                       utterance_id or "utterance", config.segment_length)
    lld, voiced, spectra, peak_amp = frame_descriptors(audio, config)
    n = lld.shape[0]
    per_seg = config.frames_per_segment
    n_seg = max(1, -(-n // per_seg))
    idx = {name: i for i, name in enumerate(LLD_NAMES)}
    rows = np.zeros((n_seg, 2 * len(LLD_NAMES)))
    for s in range(n_seg):
        sl = slice(s * per_seg, min((s + 1) * per_seg, n))
        seg = lld[sl].copy()
        v = voiced[sl]
        # neighbour-dependent descriptors, paired within this segment only
        flux = np.zeros(len(seg))
        flux[1:] = np.sum(np.diff(spectra[sl], axis=0) ** 2, axis=1)
        seg[:, idx["spectral_flux"]] = flux
        both = np.zeros(len(seg), dtype=bool)
        both[1:] = v[1:] & v[:-1]
        period = np.where(v, 1.0 / np.where(v, seg[:, idx["f0_hz"]], 1.0), 0.0)
        amp = peak_amp[sl]
        jit = np.zeros(len(seg))
        shim = np.zeros(len(seg))
        k = np.flatnonzero(both)
        if len(k):
            jit[k] = np.abs(period[k] - period[k - 1]) / (0.5 * (period[k] + period[k - 1]))
            shim[k] = np.abs(20 * np.log10((amp[k] + _EPS) / (amp[k - 1] + _EPS)))
        seg[:, idx["jitter_local"]] = jit
        seg[:, idx["shimmer_local_db"]] = shim
        for name, j in idx.items():
            col = seg[:, j]
            if name in ("jitter_local", "shimmer_local_db"):
                col = col[both]
            elif name in VOICED_ONLY:
                col = col[v]
            if len(col):
                rows[s, 2 * j] = col.mean()
                rows[s, 2 * j + 1] = col.std()
    return SequenceFeatures(utterance_id, rows)


def extract_aggregate_features(
    audio: np.ndarray, transcript: str, config: SegmentConfig = SegmentConfig(), utterance_id: str = ""
) -> AggregateFeatures:
    """Twelve utterance-level fluency/prosody measures (see ``AGGREGATE_NAMES``).

    Silence is detected from frame energy: frames below the absolute floor,
    or more than 35 dB under the utterance's loudest frame, are silent.
    Interior silent runs of at least ``min_pause`` count as pauses.
    Phonation time is the duration minus all silent frames, and is 0 when
    every frame is silent.
    """
    audio = np.asarray(audio, dtype=np.float64)
    duration = len(audio) / SAMPLE_RATE
    hop = config.hop_length
    edb = frame_energy_db(audio, config)
    threshold = max(config.silence_db, edb.max() - 35.0)
    active = edb >= threshold
    missing: set[str] = set()

    if not active.any():
        phonation = 0.0
    else:
        phonation = max(0.0, duration - hop * int((~active).sum()))
    first, last = (np.flatnonzero(active)[[0, -1]] if active.any() else (0, -1))
    pauses = []
    run = 0
    for t in range(first, last + 1):
        if not active[t]:
            run += 1
        else:
            if run * hop >= config.min_pause:
                pauses.append(run * hop)
            run = 0
    words = len(transcript.split())
    if words == 0:
        missing |= {"speaking_rate_wps", "overall_rate_wps"}
    if phonation == 0:
        missing.add("speaking_rate_wps")

    f0, _ = track_pitch(audio, config)
    voiced = f0[f0 > 0]
    if len(voiced):
        st = 12 * np.log2(voiced / 27.5)
        f0_range = float(np.percentile(st, 95) - np.percentile(st, 5))
        f0_std = float(st.std())
    else:
        f0_range = f0_std = 0.0
        missing |= {"f0_range_st", "f0_std_st"}
    act_db = edb[active]
    values = {
        "duration_s": duration,
        "phonation_time_s": phonation,
        "phonation_ratio": phonation / duration if duration > 0 else 0.0,
        "num_pauses": float(len(pauses)),
        "mean_pause_s": float(np.mean(pauses)) if pauses else 0.0,
        "pause_rate_per_s": len(pauses) / duration if duration > 0 else 0.0,
        "speaking_rate_wps": words / phonation if "speaking_rate_wps" not in missing else 0.0,
        "overall_rate_wps": words / duration if words and duration > 0 else 0.0,
        "f0_range_st": f0_range,
        "f0_std_st": f0_std,
        "energy_mean_db": float(act_db.mean()) if len(act_db) else float(edb.mean()),
        "energy_std_db": float(act_db.std()) if len(act_db) else 0.0,
    }
    return AggregateFeatures(utterance_id, np.array([values[n] for n in AGGREGATE_NAMES]),
                             AGGREGATE_NAMES, frozenset(missing))
