"""Spectral front-end/back-end: STFT, magnitude compression, mel analysis,
Griffin-Lim vocoding, and WAV I/O.

Analysis is plain numpy; the network trains through a separate differentiable
iSTFT (istft_tensors) built from taped primitives so reconstruction losses in
the time domain reach the spectral predictions.
"""

import wave as _wave
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .errors import ConfigError, ContractError, InputError, ShapeError

AUDIO_RATE = 16000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = AUDIO_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate not in (16000, 10000):
            raise ConfigError(f"unsupported sample rate {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")


def _periodic_hann(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {"hann": _periodic_hann}


def _cola_ok(window, hop):
    """Infinite-tiling constancy of sum_m w^2(n - m*hop)."""
    wsq = window * window
    n = window.size
    if n % hop:
        return False
    folded = wsq.reshape(n // hop, hop).sum(axis=0)
    return float(folded.max() - folded.min()) <= 1e-8 * float(folded.mean())


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 400
    hop: int = 100
    window: str = "hann"
    compression: float = 0.3
    centered: bool = True

    def __post_init__(self):
        if self.window not in _WINDOWS:
            raise ConfigError(f"unknown window kind '{self.window}'")
        if self.hop < 1 or self.hop > self.n_fft:
            raise ConfigError(f"hop must be in [1, n_fft]; got hop={self.hop}, n_fft={self.n_fft}")
        if not (0.0 < self.compression <= 1.0):
            raise ConfigError(f"compression exponent must be in (0, 1]; got {self.compression}")
        if not _cola_ok(self.window_array(), self.hop):
            raise ConfigError(
                f"window '{self.window}' with n_fft={self.n_fft}, hop={self.hop} "
                "does not satisfy the overlap-add constancy condition"
            )

    def window_array(self):
        return _WINDOWS[self.window](self.n_fft)

    @property
    def pad(self):
        return self.n_fft // 2 if self.centered else 0

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    def frame_count(self, length):
        return (length + 2 * self.pad - self.n_fft) // self.hop + 1


@dataclass
class Spectrogram:
    """Per-frame analysis, [T, F] layout with F = n_fft/2 + 1."""

    compressed_mag: np.ndarray
    phase: np.ndarray
    complex_real: np.ndarray
    complex_imag: np.ndarray
    config: StftConfig


def _frame(x, n_fft, hop, pad):
    if pad:
        x = np.pad(x, (pad, pad))
    T = (x.size - n_fft) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, n_fft)[:: hop][:T]


def _stft_complex(x, n_fft, hop, window, pad):
    frames = _frame(np.asarray(x, dtype=np.float64), n_fft, hop, pad)
    return np.fft.rfft(frames * window[None, :], axis=1)


def _istft_complex(X, n_fft, hop, window, pad, length):
    frames = np.fft.irfft(X, n=n_fft, axis=1) * window[None, :]
    T = frames.shape[0]
    total = (T - 1) * hop + n_fft
    num = np.zeros(total)
    den = np.zeros(total)
    wsq = window * window
    for t in range(T):
        num[t * hop : t * hop + n_fft] += frames[t]
        den[t * hop : t * hop + n_fft] += wsq
    good = den > 1e-10
    num[good] /= den[good]
    y = num[pad:] if pad else num
    if length <= y.size:
        return y[:length].copy()
    return np.pad(y, (0, length - y.size))


def stft(wave, cfg=None):
    cfg = cfg or StftConfig()
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    if isinstance(wave, Waveform) and wave.sample_rate != AUDIO_RATE:
        raise InputError(f"stft expects {AUDIO_RATE} Hz audio, got {wave.sample_rate}")
    if x.size < cfg.n_fft:
        raise InputError(f"waveform of {x.size} samples is shorter than one frame ({cfg.n_fft})")
    X = _stft_complex(x, cfg.n_fft, cfg.hop, cfg.window_array(), cfg.pad)
    mag = np.abs(X)
    return Spectrogram(
        compressed_mag=compress_magnitude(mag, cfg.compression),
        phase=np.arctan2(X.imag, X.real),
        complex_real=X.real.copy(),
        complex_imag=X.imag.copy(),
        config=cfg,
    )


def istft(spec, cfg=None, length=None):
    cfg = cfg or spec.config
    X = spec.complex_real + 1j * spec.complex_imag
    T = X.shape[0]
    if length is None:
        length = (T - 1) * cfg.hop if cfg.centered else (T - 1) * cfg.hop + cfg.n_fft
    if cfg.frame_count(length) != T:
        raise InputError(
            f"length {length} is inconsistent with {T} frames at hop {cfg.hop}"
        )
    return _istft_complex(X, cfg.n_fft, cfg.hop, cfg.window_array(), cfg.pad, length)


def magphase_to_complex(compressed_mag, phase, c):
    mag = decompress_magnitude(compressed_mag, c)
    return mag * np.cos(phase), mag * np.sin(phase)


def compress_magnitude(mag, c):
    mag = np.asarray(mag)
    if np.any(mag < 0.0):
        raise ContractError("magnitude must be nonnegative")
    if not (0.0 < c <= 1.0):
        raise ConfigError(f"compression exponent must be in (0, 1]; got {c}")
    return np.power(mag, c)


def decompress_magnitude(cmag, c):
    cmag = np.asarray(cmag)
    if np.any(cmag < 0.0):
        raise ContractError("compressed magnitude must be nonnegative")
    if not (0.0 < c <= 1.0):
        raise ConfigError(f"compression exponent must be in (0, 1]; got {c}")
    return np.power(cmag, 1.0 / c)


# -- differentiable synthesis --------------------------------------------------


def istft_tensors(real, imag, cfg, length):
    """iSTFT over taped tensors: real/imag [B, T, F] -> waveforms [B, length].

    irfft is a fixed linear map, so it is expressed as two matmuls with
    cosine/sine bases; overlap-add and the COLA normalization are the taped
    overlap_add primitive and a constant divide.
    """
    real, imag = as_tensor(real), as_tensor(imag)
    if real.ndim != 3 or real.shape != imag.shape:
        raise ShapeError(f"expected matching [B, T, F]; got {real.shape} and {imag.shape}")
    B, T, F = real.shape
    n_fft, hop, pad = cfg.n_fft, cfg.hop, cfg.pad
    if F != cfg.n_bins:
        raise ShapeError(f"F={F} does not match n_fft/2+1={cfg.n_bins}")
    if cfg.frame_count(length) != T:
        raise InputError(f"length {length} inconsistent with {T} frames at hop {hop}")

    dt = real.data.dtype
    k = np.arange(F)
    n = np.arange(n_fft)
    ang = 2.0 * np.pi * np.outer(k, n) / n_fft
    wgt = np.full(F, 2.0)
    wgt[0] = 1.0
    if n_fft % 2 == 0:
        wgt[-1] = 1.0
    window = cfg.window_array()
    # One [F, n_fft] basis per part, window and 1/n_fft folded in.
    cos_basis = Tensor((wgt[:, None] * np.cos(ang) / n_fft * window[None, :]).astype(dt))
    sin_basis = Tensor((-wgt[:, None] * np.sin(ang) / n_fft * window[None, :]).astype(dt))

    frames = ops.add(ops.matmul(real, cos_basis), ops.matmul(imag, sin_basis))
    total = (T - 1) * hop + n_fft
    y = ops.overlap_add(frames, hop, total)

    den = np.zeros(total, dtype=dt)
    wsq = (window * window).astype(dt)
    for t in range(T):
        den[t * hop : t * hop + n_fft] += wsq
    den[den <= 1e-10] = 1.0
    y = ops.mul(y, Tensor(1.0 / den))
    if pad + length > total:
        raise InputError(f"cannot produce {length} samples from {T} frames")
    return ops.narrow(y, 1, pad, length)


# -- mel analysis and Griffin-Lim ----------------------------------------------


LOG_FLOOR = 1e-10


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 640
    hop: int = 320
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    sample_rate: int = AUDIO_RATE
    # Each filterbank row is normalized to sum to 1 ("row_sum" convention).
    normalization: str = field(default="row_sum")

    def __post_init__(self):
        if self.n_mels > self.n_fft // 2 + 1:
            raise ConfigError(
                f"n_mels={self.n_mels} exceeds usable bins ({self.n_fft // 2 + 1})"
            )
        if self.hop < 1 or self.hop > self.n_fft:
            raise ConfigError("hop must be in [1, n_fft]")

    @property
    def pad(self):
        # (win - hop)/2 on each side gives exactly len/hop frames when
        # len is a hop multiple: 1 s at 16 kHz -> 50 frames at hop 320.
        return (self.n_fft - self.hop) // 2

    def frame_count(self, length):
        return (length + 2 * self.pad - self.n_fft) // self.hop + 1


def mel_filterbank(cfg):
    """[n_mels, n_fft/2+1] triangles on the mel scale, rows summing to 1."""
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    pts = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (bin_hz - lo) / max(mid - lo, 1e-12)
        falling = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    sums = fb.sum(axis=1)
    if np.any(sums <= 0.0):
        raise ConfigError("mel filterbank has empty rows; lower n_mels or raise n_fft")
    return fb / sums[:, None]


def mel_spectrogram(wave, cfg=None):
    """Log mel-power frames [C, n_mels] at cfg's frame rate."""
    cfg = cfg or MelConfig()
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
    if isinstance(wave, Waveform) and wave.sample_rate != cfg.sample_rate:
        raise InputError(f"expected {cfg.sample_rate} Hz audio, got {wave.sample_rate}")
    if x.size < cfg.n_fft - 2 * cfg.pad:
        raise InputError("waveform too short for one mel frame")
    X = _stft_complex(x, cfg.n_fft, cfg.hop, _periodic_hann(cfg.n_fft), cfg.pad)
    power = (X.real * X.real + X.imag * X.imag)
    mel = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def mel_to_linear_magnitude(logmel, cfg):
    """Pseudo-inverse filterbank projection back to linear magnitude [C, F]."""
    fb = mel_filterbank(cfg)
    power = np.clip(np.exp(np.asarray(logmel, dtype=np.float64)) @ np.linalg.pinv(fb).T, 0.0, None)
    return np.sqrt(power)


def griffin_lim(mel_or_mag, cfg=None, iterations=60, return_residuals=False):
    """Phase retrieval from magnitude (or log-mel, projected first).

    Zero-phase init; each iteration enforces the target magnitude, resynthesizes,
    and re-analyzes. The consistency residual || |STFT(y_k)| - M || / ||M|| is
    non-increasing (the classic alternating-projection guarantee).
    """
    cfg = cfg or MelConfig()
    arr = np.asarray(mel_or_mag, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected [T, n_mels] or [T, F]; got shape {arr.shape}")
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    n_bins = cfg.n_fft // 2 + 1
    if arr.shape[1] == cfg.n_mels and cfg.n_mels != n_bins:
        mag = mel_to_linear_magnitude(arr, cfg)
    elif arr.shape[1] == n_bins:
        mag = np.clip(arr, 0.0, None)
    else:
        raise ShapeError(
            f"second dim {arr.shape[1]} is neither n_mels={cfg.n_mels} nor bins={n_bins}"
        )

    T = mag.shape[0]
    window = _periodic_hann(cfg.n_fft)
    length = T * cfg.hop
    norm = np.linalg.norm(mag)
    residuals = []
    X = mag.astype(np.complex128)  # zero phase
    y = _istft_complex(X, cfg.n_fft, cfg.hop, window, cfg.pad, length)
    for _ in range(iterations):
        Y = _stft_complex(y, cfg.n_fft, cfg.hop, window, cfg.pad)
        residuals.append(float(np.linalg.norm(np.abs(Y) - mag) / max(norm, 1e-30)))
        phase = np.where(np.abs(Y) > 0, Y / np.maximum(np.abs(Y), 1e-30), 1.0)
        y = _istft_complex(mag * phase, cfg.n_fft, cfg.hop, window, cfg.pad, length)
    if return_residuals:
        return y, residuals
    return y


# -- WAV I/O --------------------------------------------------------------------


def write_wav(path, samples, sample_rate=AUDIO_RATE):
    if isinstance(samples, Waveform):
        samples, sample_rate = samples.samples, samples.sample_rate
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("WAV writer takes mono 1-D samples")
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path):
    with _wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise InputError(f"expected mono WAV, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise InputError(f"expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getframerate() != AUDIO_RATE:
            raise InputError(f"expected {AUDIO_RATE} Hz, got {f.getframerate()}")
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, AUDIO_RATE)
