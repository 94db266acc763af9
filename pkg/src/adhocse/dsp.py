"""STFT analysis/synthesis and WAV I/O."""
from dataclasses import dataclass

import numpy as np
import scipy.signal
from scipy.io import wavfile

from .errors import LengthError, SampleRateError, ShapeError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class StftConfig:
    """Hann-windowed STFT without padding; ``fft_size == window_len``."""

    sample_rate: int = SAMPLE_RATE
    window_len: int = 512
    hop: int = 256

    def __post_init__(self):
        if self.window_len <= 0 or self.hop <= 0:
            raise ValueError("window_len and hop must be positive")
        if self.window_len % self.hop:
            raise ValueError(f"hop {self.hop} does not divide window_len {self.window_len}")
        if self.window_len % 2:
            raise ValueError("window_len must be even")

    @property
    def fft_size(self):
        return self.window_len

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    @property
    def window(self):
        return scipy.signal.get_window("hann", self.window_len, fftbins=True)

    def n_frames(self, n_samples):
        if n_samples < self.window_len:
            return 0
        return 1 + (n_samples - self.window_len) // self.hop

    def n_samples(self, n_frames):
        return (n_frames - 1) * self.hop + self.window_len

    def interior(self, n_frames):
        """Slice of samples covered by the full ``window_len / hop`` frames."""
        return slice(self.window_len - self.hop, n_frames * self.hop)


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # complex [C, T, F]
    config: StftConfig = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ShapeError(f"spectrogram data must be [C, T, F], got {self.data.shape}")
        if self.config is None:
            # bare arrays (synthetic tests): half-overlap config matching the bin count
            n = 2 * (self.data.shape[2] - 1)
            self.config = StftConfig() if n == 512 else StftConfig(window_len=n, hop=n // 2)
        if self.data.shape[2] != self.config.n_bins:
            raise ShapeError(f"expected {self.config.n_bins} bins, got {self.data.shape[2]}")

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_frames(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def channel(self, c):
        return ComplexSpectrogram(self.data[c:c + 1], self.config)

    def magnitude(self):
        return np.abs(self.data)


def stft(signal, cfg=None):
    """STFT of a [samples] or [C, samples] real signal.

    Frame ``t`` covers samples ``[t*hop, t*hop + window_len)``; trailing
    samples that do not fill a frame are ignored.
    """
    cfg = cfg or StftConfig()
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2:
        raise ShapeError(f"signal must be 1-D or [C, samples], got {x.shape}")
    if x.shape[1] < cfg.window_len:
        raise LengthError(f"signal of {x.shape[1]} samples is shorter than one window ({cfg.window_len})")
    T = cfg.n_frames(x.shape[1])
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len, axis=1)[:, ::cfg.hop][:, :T]
    data = np.fft.rfft(frames * cfg.window, n=cfg.fft_size, axis=-1)
    return ComplexSpectrogram(data, cfg)


def istft(spec, cfg=None):
    """Weighted overlap-add inverse of :func:`stft`.

    Synthesis uses the analysis window and divides by the summed squared
    window, so ``istft(stft(x))`` reproduces ``x`` wherever that sum is
    nonzero. Returns [samples] for one channel, [C, samples] otherwise.
    """
    cfg = cfg or spec.config
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    if data.ndim == 2:
        data = data[None]
    if data.shape[-1] != cfg.n_bins:
        raise ShapeError(f"spectrogram has {data.shape[-1]} bins, config expects {cfg.n_bins}")
    C, T, _ = data.shape
    win = cfg.window
    frames = np.fft.irfft(data, n=cfg.fft_size, axis=-1)[..., : cfg.window_len] * win
    n = cfg.n_samples(T)
    out = np.zeros((C, n))
    norm = np.zeros(n)
    for t in range(T):
        s = t * cfg.hop
        out[:, s:s + cfg.window_len] += frames[:, t]
        norm[s:s + cfg.window_len] += win ** 2
    nz = norm > 1e-10
    out[:, nz] /= norm[nz]
    out[:, ~nz] = 0.0
    return out[0] if C == 1 else out


def frame_energy(spec):
    """Per-frame windowed time-domain energy recovered from the spectrum (Parseval)."""
    data = spec.data if isinstance(spec, ComplexSpectrogram) else spec
    N = (data.shape[-1] - 1) * 2
    p = np.abs(data) ** 2
    return (p[..., 0] + p[..., -1] + 2 * p[..., 1:-1].sum(axis=-1)) / N


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path, expected_rate=SAMPLE_RATE):
    """Read a 16-bit PCM or float WAV as float64 [C, samples]."""
    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return x.T if x.ndim == 2 else x[None]


def write_wav(path, signal, rate=SAMPLE_RATE, fmt="float32"):
    """Write [samples] or [C, samples]; ``fmt`` is ``"float32"`` or ``"pcm16"``."""
    if rate != SAMPLE_RATE:
        raise SampleRateError(f"only {SAMPLE_RATE} Hz is supported, got {rate}")
    x = np.asarray(signal, dtype=np.float64)
    x = x.T if x.ndim == 2 else x
    if fmt == "float32":
        out = x.astype(np.float32)
    elif fmt == "pcm16":
        out = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, rate, out)
