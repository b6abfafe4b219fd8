"""Deterministic signal primitives: STFT, convolution, resampling, noise and mixing."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Union

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .errors import DataError, InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_FS = 16000


@dataclass(frozen=True, eq=False)
class Signal:
    """Mono real-valued audio with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidInputError(f"signal must be 1-D, got shape {x.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidInputError(f"sample rate must be a positive integer, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("signal contains non-finite samples")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def power(self) -> float:
        return float(np.mean(self.samples**2)) if len(self) else 0.0


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """One-sided STFT, ``values`` shaped (bins, frames)."""

    values: np.ndarray
    sample_rate: int
    window_size: int
    hop: int

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.window_size


def hann(n: int) -> np.ndarray:
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(length: int, window_size: int, hop: int) -> int:
    return (length - window_size) // hop + 1


def stft(x: Signal, window_size: int = 64, hop: int = 32) -> ComplexSpectrogram:
    """Hann-windowed one-sided STFT without padding or centering.

    Frame ``j`` covers samples ``[j*hop, j*hop + window_size)``.
    """
    if window_size < 2 or window_size % 2:
        raise InvalidInputError(f"window size must be even and >= 2, got {window_size}")
    if hop < 1:
        raise InvalidInputError(f"hop must be >= 1, got {hop}")
    if len(x) < window_size:
        raise InvalidInputError(
            f"signal of {len(x)} samples is shorter than one {window_size}-sample window"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x.samples, window_size)[::hop]
    values = np.fft.rfft(frames * hann(window_size), axis=1).T
    return ComplexSpectrogram(np.ascontiguousarray(values), x.sample_rate, window_size, hop)


def convolve(x: Signal, h) -> Signal:
    """Full linear convolution of ``x`` with an impulse response.

    ``h`` may be a :class:`Signal` or anything exposing one as ``.signal``
    (e.g. :class:`revfp.rir.ImpulseResponse`).
    """
    hs = getattr(h, "signal", h)
    if hs.sample_rate != x.sample_rate:
        raise InvalidInputError(
            f"sample rate mismatch: signal {x.sample_rate} Hz, response {hs.sample_rate} Hz"
        )
    if len(x) == 0 or len(hs) == 0:
        raise InvalidInputError("cannot convolve empty signals")
    y = sps.fftconvolve(x.samples, hs.samples, mode="full")
    return Signal(y, x.sample_rate)


def _antialias_taps(up: int, down: int, attenuation_db: float = 80.0) -> np.ndarray:
    # Designed at the upsampled rate; stopband starts exactly at the lower Nyquist.
    cutoff = 1.0 / max(up, down)
    width = 0.1 * cutoff
    numtaps, beta = sps.kaiserord(attenuation_db, width)
    numtaps |= 1
    return sps.firwin(numtaps, cutoff - width / 2, window=("kaiser", beta))


def resample(x: Signal, target_rate: int) -> Signal:
    """Band-limited polyphase resampling to ``target_rate``.

    Output length is ``round(len(x) * target_rate / sample_rate)``.
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise InvalidInputError(f"target rate must be a positive integer, got {target_rate}")
    if target_rate == x.sample_rate:
        return x
    ratio = Fraction(int(target_rate), x.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    y = sps.resample_poly(x.samples, up, down, window=_antialias_taps(up, down))
    n_out = int(round(len(x) * target_rate / x.sample_rate))
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - y.shape[0]))
    return Signal(y, int(target_rate))


def white_noise(length: int, sample_rate: int = DEFAULT_FS, seed: int = 0) -> Signal:
    """Unit-variance Gaussian white noise, deterministic per seed."""
    if length <= 0:
        raise InvalidInputError(f"noise length must be positive, got {length}")
    rng = np.random.default_rng(seed)
    return Signal(rng.standard_normal(length), sample_rate)


def noise_gain(speech_power: float, noise_power: float, snr_db: float) -> float:
    return math.sqrt(speech_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(speech: Signal, noise: Signal, snr_db: float) -> Signal:
    """Add ``noise`` to ``speech`` scaled to the requested full-segment SNR.

    ``snr_db = inf`` returns ``speech`` itself.
    """
    if len(speech) != len(noise) or speech.sample_rate != noise.sample_rate:
        raise InvalidInputError("speech and noise must share length and sample rate")
    if math.isinf(snr_db) and snr_db > 0:
        return speech
    if math.isnan(snr_db):
        raise InvalidInputError("SNR must not be NaN")
    ps, pn = speech.power(), noise.power()
    if ps <= 0:
        raise InvalidInputError("speech has zero energy")
    if pn <= 0:
        raise InvalidInputError("noise has zero energy; finite SNR is unreachable")
    g = noise_gain(ps, pn, snr_db)
    return Signal(speech.samples + g * noise.samples, speech.sample_rate)


def snr_db(speech: Signal, noise: Signal) -> float:
    return 10.0 * math.log10(speech.power() / noise.power())


PathLike = Union[str, Path]


def read_wav(path: PathLike) -> Signal:
    """Read PCM16/PCM32/float WAV as a mono float signal (channel 0 of multichannel)."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim > 1:
        warnings.warn(f"{path}: {data.shape[1]} channels, using channel 0", stacklevel=2)
        data = data[:, 0]
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    try:
        return Signal(x, rate)
    except InvalidInputError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_wav(path: PathLike, x: Signal, pcm16: bool = False) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(x.samples * 32767.0), -32768, 32767).astype("<i2")
    else:
        data = x.samples.astype("<f4")
    wavfile.write(str(path), x.sample_rate, data)
