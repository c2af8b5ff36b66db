"""Waveform I/O and the waveform <-> spectrogram pipeline.

Magnitude spectrograms are the universal currency of the separation system:
2-D non-negative grids with frequency bins along rows and time frames along
columns.  This module owns the STFT analysis/synthesis pair (constant
overlap-add Hann windows at hop = window/4), the mel filterbank used to
downsample linear spectrograms, and the binary cache / WAV interchange
formats.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import AudioLengthError, ConfigError, ShapeMismatchError

# Overlap-add normalization floor, relative to the healthy window-square sum.
# The outermost samples of a clip have almost no window coverage; dividing by
# their true (vanishing) coverage amplifies any masking-induced frame
# mismatch into edge spikes, so low-coverage samples are attenuated instead.
_OLA_REL_FLOOR = 1e-3


@dataclass
class Waveform:
    """A mono audio signal: real amplitude samples at a fixed rate."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """Non-negative magnitude grid, frequency bins (rows) x time frames (cols).

    ``scale`` records whether rows are raw STFT bins ("linear") or mel filter
    outputs ("mel").  Operations that combine spectrograms require matching
    scales.
    """

    values: np.ndarray
    scale: str = "linear"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {self.values.shape}")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError("spectrogram must have at least one row and column")
        if self.scale not in ("linear", "mel"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrogram contains non-finite values")
        if self.values.min() < 0:
            raise ValueError("spectrogram contains negative values")

    @property
    def shape(self):
        return self.values.shape

    def copy(self) -> "Spectrogram":
        return Spectrogram(self.values.copy(), self.scale)


@dataclass(frozen=True)
class StftConfig:
    """Analysis constants for the STFT/mel pipeline.

    Defaults are the full-scale preprocessing constants (16 kHz audio, window
    1500, hop 375, ~6 s clips, 256 mel bins, giving 751x256 linear and 256x256
    mel grids).  ``desk()`` and ``smoke()`` are reduced-rate presets sized for
    fast CPU experiments; they change only scale, not behavior.
    """

    sample_rate: int = 16000
    window_size: int = 1500
    hop: int = 375
    clip_seconds: float = 97125 / 16000  # ~6.07 s -> exactly 256 frames
    mel_bins: int = 256

    def __post_init__(self):
        if self.window_size <= 0 or self.hop <= 0:
            raise ConfigError("window_size and hop must be positive")
        if self.hop > self.window_size:
            raise ConfigError(
                f"hop ({self.hop}) must not exceed window_size ({self.window_size})"
            )
        if self.mel_bins <= 0:
            raise ConfigError("mel_bins must be positive")
        if self.mel_bins > self.n_freq_bins:
            raise ConfigError(
                f"mel_bins ({self.mel_bins}) exceeds linear bins ({self.n_freq_bins})"
            )
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.clip_seconds <= 0:
            raise ConfigError("clip_seconds must be positive")

    @property
    def n_freq_bins(self) -> int:
        return self.window_size // 2 + 1

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_size:
            raise AudioLengthError(
                f"waveform of {n_samples} samples is shorter than the analysis "
                f"window ({self.window_size})"
            )
        return 1 + (n_samples - self.window_size) // self.hop

    @classmethod
    def paper(cls) -> "StftConfig":
        return cls()

    @classmethod
    def desk(cls) -> "StftConfig":
        # 8 kHz, 128x128 mel grids, ~2.1 s clips
        return cls(sample_rate=8000, window_size=512, hop=128,
                   clip_seconds=16768 / 8000, mel_bins=128)

    @classmethod
    def smoke(cls) -> "StftConfig":
        # 64x64 mel grids, ~0.54 s clips; for unit tests and overfit runs
        return cls(sample_rate=8000, window_size=256, hop=64,
                   clip_seconds=4288 / 8000, mel_bins=64)


def _hann(window_size: int) -> np.ndarray:
    # periodic Hann: satisfies constant overlap-add at hop = window/4
    n = np.arange(window_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_size)


def stft_magnitude(w: Waveform, cfg: StftConfig) -> tuple[Spectrogram, np.ndarray]:
    """Short-time Fourier analysis of ``w``.

    Returns the magnitude spectrogram (linear scale, ``window//2 + 1`` rows)
    and a phase grid of the same shape (radians).  Frames are taken without
    centering: frame ``t`` covers samples ``[t*hop, t*hop + window)``.
    """
    samples = w.samples
    n_frames = cfg.n_frames(len(samples))
    win = _hann(cfg.window_size)
    idx = np.arange(cfg.window_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * win[None, :]
    spec = np.fft.rfft(frames, axis=1).T  # (freq bins, frames)
    mag = np.abs(spec)
    phase = np.angle(spec)
    return Spectrogram(mag, "linear"), phase


@lru_cache(maxsize=8)
def _mel_filterbank(sample_rate: int, window_size: int, mel_bins: int) -> np.ndarray:
    """Triangular mel filterbank, rows normalized to sum 1.

    Guarantees every filter covers at least one linear bin and every linear
    bin is covered by at least one filter, so mel analysis and mask upsampling
    are total maps in both directions.
    """
    n_bins = window_size // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    mel_pts = np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), mel_bins + 2)
    hz_pts = mel_to_hz(mel_pts)

    bank = np.zeros((mel_bins, n_bins))
    for m in range(mel_bins):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - center, 1e-12)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))

    # a very narrow filter can miss every bin center: pin it to the nearest bin
    for m in range(mel_bins):
        if bank[m].sum() == 0.0:
            bank[m, np.argmin(np.abs(fft_freqs - hz_pts[m + 1]))] = 1.0
    # uncovered linear bins (DC / Nyquist extremes) go to the nearest filter
    col_sums = bank.sum(axis=0)
    for f in np.nonzero(col_sums == 0.0)[0]:
        centers = hz_pts[1:-1]
        bank[np.argmin(np.abs(centers - fft_freqs[f])), f] = 1.0

    bank /= bank.sum(axis=1, keepdims=True)
    return bank


def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    return _mel_filterbank(cfg.sample_rate, cfg.window_size, cfg.mel_bins)


def mel_downsample(s: Spectrogram, cfg: StftConfig) -> Spectrogram:
    """Project a linear spectrogram onto ``cfg.mel_bins`` mel filters."""
    if s.scale != "linear":
        raise ShapeMismatchError("mel_downsample expects a linear-scale spectrogram")
    if s.values.shape[0] != cfg.n_freq_bins:
        raise ShapeMismatchError(
            f"spectrogram has {s.values.shape[0]} rows, config expects {cfg.n_freq_bins}"
        )
    bank = mel_filterbank(cfg)
    return Spectrogram(bank @ s.values, "mel")


def mel_mask_to_linear(mask_values: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Upsample a mel-domain mask to linear bins.

    Each linear bin receives the filter-weighted average of the mel mask bins
    covering it, so values stay in [0, 1] and an all-ones (all-zeros) mel mask
    maps to an all-ones (all-zeros) linear mask.
    """
    mask_values = np.asarray(mask_values, dtype=np.float64)
    bank = mel_filterbank(cfg)
    if mask_values.shape[0] != bank.shape[0]:
        raise ShapeMismatchError(
            f"mask has {mask_values.shape[0]} mel rows, filterbank has {bank.shape[0]}"
        )
    col_sums = bank.sum(axis=0)  # > 0 for every linear bin by construction
    return (bank.T @ mask_values) / col_sums[:, None]


def reconstruct_waveform(mix_phase: np.ndarray, mix_linear: Spectrogram,
                         mask_values: np.ndarray, cfg: StftConfig) -> Waveform:
    """Inverse STFT of ``mask * mix_linear`` combined with the mixture phase.

    Weighted overlap-add with the analysis Hann window; interior samples of an
    all-ones-mask reconstruction match the original clip to float precision.
    """
    mask_values = np.asarray(mask_values, dtype=np.float64)
    if mix_linear.scale != "linear":
        raise ShapeMismatchError("reconstruction needs a linear-scale spectrogram")
    if mix_phase.shape != mix_linear.values.shape or mask_values.shape != mix_linear.values.shape:
        raise ShapeMismatchError(
            f"phase {mix_phase.shape}, magnitude {mix_linear.values.shape} and "
            f"mask {mask_values.shape} must share one shape"
        )
    masked = mask_values * mix_linear.values
    spec = masked * np.exp(1j * mix_phase)
    frames = np.fft.irfft(spec, n=cfg.window_size, axis=0).T  # (frames, window)

    win = _hann(cfg.window_size)
    n_frames = frames.shape[0]
    out_len = (n_frames - 1) * cfg.hop + cfg.window_size
    out = np.zeros(out_len)
    denom = np.zeros(out_len)
    for t in range(n_frames):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.window_size)
        out[sl] += frames[t] * win
        denom[sl] += win * win
    floor = max(_OLA_REL_FLOOR * float(denom.max()), 1e-300)
    out /= np.maximum(denom, floor)
    return Waveform(out, cfg.sample_rate)


def write_wav(path, w: Waveform) -> None:
    """16-bit PCM mono; samples clipped to [-1, 1]."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = (clipped * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ConfigError(f"{path}: expected mono WAV, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ConfigError(f"{path}: expected 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, rate)


SPEC_CACHE_MAGIC = b"MPSG"


def write_spectrogram_cache(path, s: Spectrogram) -> None:
    """Binary cache: magic "MPSG", u32 rows, u32 cols (LE), float32 LE row-major."""
    rows, cols = s.values.shape
    with open(path, "wb") as fh:
        fh.write(SPEC_CACHE_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(s.values, dtype="<f4").tobytes())


def read_spectrogram_cache(path, scale: str = "mel") -> Spectrogram:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SPEC_CACHE_MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise ConfigError(f"{path}: truncated spectrogram cache")
    return Spectrogram(data.reshape(rows, cols).astype(np.float64), scale)
