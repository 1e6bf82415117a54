"""Observation model y = x * h + n and the feature front-end.

Features are log-magnitude STFTs (32-sample Hann window, hop 16) that are
standardized per spectrogram to zero mean and unit variance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy.io import wavfile
from scipy.signal import lfilter

from .acoustics import SAMPLE_RATE, RirRecord

SEGMENT_SECONDS = 4.0
STFT_WIN = 32
STFT_HOP = 16
N_BINS = STFT_WIN // 2 + 1  # 17 one-sided bins
LOG_EPS = 1e-8
SILENCE_RMS = 1e-6


@dataclass
class SourceSegment:
    samples: np.ndarray
    source_id: str
    origin: str  # corpus file reference or synthetic-generator seed

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ValueError(f"source {self.source_id}: non-finite samples")
        if np.sqrt(np.mean(s ** 2)) <= SILENCE_RMS:
            raise ValueError(f"source {self.source_id}: silent segment")


@dataclass
class ReverberantSample:
    samples: np.ndarray
    rir_id: str
    room_id: str
    source_id: str
    snr_db: float | None = None


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (freq bins, frames)
    mean: float | None = None  # standardization record
    std: float | None = None

    @property
    def shape(self):
        return self.values.shape


def convolve(x: SourceSegment, h: RirRecord, sample_rate_hz: int = SAMPLE_RATE,
             fast: bool = True) -> ReverberantSample:
    """Linear convolution of source and RIR, truncated to the source length
    so the feature shape stays fixed. FFT fast path by default; the direct
    path exists for oracle tests."""
    if h.sample_rate_hz != sample_rate_hz:
        raise ValueError(f"sample rate mismatch: RIR {h.sample_rate_hz} Hz "
                         f"vs expected {sample_rate_hz} Hz")
    xs = np.asarray(x.samples, dtype=np.float64)
    hs = np.asarray(h.samples, dtype=np.float64)
    if fast:
        n = len(xs) + len(hs) - 1
        nfft = sfft.next_fast_len(n)
        y = sfft.irfft(sfft.rfft(xs, nfft) * sfft.rfft(hs, nfft), nfft)[:n]
    else:
        y = np.convolve(xs, hs)
    return ReverberantSample(samples=y[:len(xs)], rir_id=h.rir_id,
                             room_id=h.room_id, source_id=x.source_id)


def add_noise(y: ReverberantSample, snr_db: float | None,
              rng: np.random.Generator) -> ReverberantSample:
    """Add white Gaussian noise at the given SNR; None disables (pass-through)."""
    if snr_db is None:
        return y
    s = np.asarray(y.samples, dtype=np.float64)
    p_signal = np.mean(s ** 2)
    p_noise = p_signal / (10.0 ** (snr_db / 10.0))
    noisy = s + rng.standard_normal(len(s)) * np.sqrt(p_noise)
    return ReverberantSample(samples=noisy, rir_id=y.rir_id, room_id=y.room_id,
                             source_id=y.source_id, snr_db=snr_db)


def stft_logmag(samples: np.ndarray) -> FeatureMatrix:
    """Hann-windowed 32-point STFT, hop 16, no padding; log(|X| + eps)."""
    s = np.asarray(samples, dtype=np.float64)
    frames = sliding_window_view(s, STFT_WIN)[::STFT_HOP]
    spec = np.fft.rfft(frames * np.hanning(STFT_WIN), axis=1)
    return FeatureMatrix(values=np.log(np.abs(spec).T + LOG_EPS))


def standardize(f: FeatureMatrix) -> FeatureMatrix:
    """Zero-mean, unit-variance over the whole matrix (population std)."""
    v = np.asarray(f.values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite feature values")
    mean = float(v.mean())
    std = float(v.std())
    if std <= 0.0:
        raise ValueError("degenerate feature: zero variance")
    return FeatureMatrix(values=(v - mean) / std, mean=mean, std=std)


def extract_features(samples: np.ndarray) -> FeatureMatrix:
    """Full front-end: STFT log-magnitude followed by standardization."""
    return standardize(stft_logmag(samples))


def n_frames(n_samples: int) -> int:
    return (n_samples - STFT_WIN) // STFT_HOP + 1


# ---------------------------------------------------------------------------
# synthetic speech-like source (corpus-free fallback)
# ---------------------------------------------------------------------------

def synth_source(rng: np.random.Generator, duration_s: float = SEGMENT_SECONDS,
                 source_id: str = "synth0",
                 sample_rate_hz: int = SAMPLE_RATE) -> SourceSegment:
    """Speech-like excitation: voiced stretches (glottal-style pulse trains
    through three random formant resonators) interleaved with noise bursts
    and short silences."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    fs = sample_rate_hz
    total = int(round(duration_s * fs))
    out = np.zeros(total)
    pos = 0
    while pos < total:
        seg_len = int(rng.uniform(0.05, 0.3) * fs)
        seg_len = min(seg_len, total - pos)
        kind = rng.choice(["voiced", "unvoiced", "silence"], p=[0.55, 0.3, 0.15])
        if kind == "silence":
            pos += seg_len
            continue
        if kind == "voiced":
            f0 = rng.uniform(80.0, 300.0)
            exc = np.zeros(seg_len)
            period = max(2, int(fs / f0))
            exc[::period] = 1.0
            sig = exc
            for _ in range(3):
                fc = rng.uniform(300.0, 3000.0)
                bw = rng.uniform(80.0, 300.0)
                r = np.exp(-np.pi * bw / fs)
                theta = 2 * np.pi * fc / fs
                sig = lfilter([1.0], [1.0, -2 * r * np.cos(theta), r * r], sig)
        else:
            noise = rng.standard_normal(seg_len)
            # gentle low-pass tilt so the burst stays speech-like
            sig = lfilter([1.0], [1.0, -0.9], noise)
        # fade edges to avoid clicks, randomize level
        ramp = min(64, seg_len // 4)
        if ramp > 0:
            win = np.ones(seg_len)
            win[:ramp] = np.linspace(0, 1, ramp)
            win[-ramp:] = np.linspace(1, 0, ramp)
            sig = sig * win
        rms = np.sqrt(np.mean(sig ** 2))
        if rms > 0:
            sig = sig / rms * rng.uniform(0.05, 0.3)
        out[pos:pos + seg_len] = sig
        pos += seg_len
    rms = np.sqrt(np.mean(out ** 2))
    if rms <= 1e-3:  # ensure the non-silence contract even on unlucky draws
        out += rng.standard_normal(total) * 2e-3
    return SourceSegment(samples=out, source_id=source_id,
                         origin=f"synthetic:{source_id}")


# ---------------------------------------------------------------------------
# WAV corpus ingestion
# ---------------------------------------------------------------------------

def index_wav_corpus(corpus_dir, out_path=None, segment_s: float = SEGMENT_SECONDS,
                     stride_s: float | None = None,
                     sample_rate_hz: int = SAMPLE_RATE) -> list[dict]:
    """Walk a directory tree of 16 kHz mono WAVs and index all segments of
    exactly `segment_s` seconds (configurable stride). Silent segments are
    skipped. Returns the index; optionally writes `segments.jsonl`."""
    corpus_dir = Path(corpus_dir)
    stride = int(round((stride_s or segment_s) * sample_rate_hz))
    seg_len = int(round(segment_s * sample_rate_hz))
    entries = []
    for path in sorted(corpus_dir.rglob("*.wav")):
        fs, data = wavfile.read(path)
        if fs != sample_rate_hz:
            raise ValueError(f"{path}: expected {sample_rate_hz} Hz, got {fs}")
        if data.ndim != 1:
            raise ValueError(f"{path}: expected mono audio")
        data = _to_float(data)
        for offset in range(0, len(data) - seg_len + 1, stride):
            seg = data[offset:offset + seg_len]
            if np.sqrt(np.mean(seg ** 2)) <= SILENCE_RMS:
                continue
            entries.append({
                "source_id": f"{path.stem}_{offset}",
                "file": str(path.relative_to(corpus_dir)),
                "offset": offset,
                "length": seg_len,
            })
    if out_path is not None:
        with open(out_path, "w") as f:
            for e in entries:
                f.write(json.dumps(e) + "\n")
    return entries


def load_corpus_segment(corpus_dir, entry: dict,
                        sample_rate_hz: int = SAMPLE_RATE) -> SourceSegment:
    fs, data = wavfile.read(Path(corpus_dir) / entry["file"])
    if fs != sample_rate_hz:
        raise ValueError(f"{entry['file']}: expected {sample_rate_hz} Hz, got {fs}")
    seg = _to_float(data)[entry["offset"]:entry["offset"] + entry["length"]]
    return SourceSegment(samples=seg, source_id=entry["source_id"],
                         origin=f"{entry['file']}@{entry['offset']}")


def _to_float(data: np.ndarray) -> np.ndarray:
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# feature cache: little-endian float32 with an 8-byte header
# ---------------------------------------------------------------------------

_FEAT_MAGIC = b"FEAT"


def write_feature_file(path, f: FeatureMatrix) -> None:
    rows, cols = f.values.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC + struct.pack("<HH", rows, cols))
        fh.write(np.asarray(f.values, dtype="<f4").tobytes())


def read_feature_file(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if header[:4] != _FEAT_MAGIC:
            raise ValueError(f"{path}: not a feature file")
        rows, cols = struct.unpack("<HH", header[4:])
        values = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
    return FeatureMatrix(values=values.reshape(rows, cols).astype(np.float64))
