"""Gammatone log-magnitude and phase-domain feature planes."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dsp import DEFAULT_FS, ComplexSpectrogram, Signal, stft
from .errors import DataError, InvalidInputError

WINDOW_SIZE = 64
HOP = 32
N_FRAMES = 1997
CLIP_SAMPLES = 4 * DEFAULT_FS
LOW_BAND_HZ = 500.0
LOG_FLOOR = 1e-10
CONTINUITY_EPS = 1e-6


def erb_rate(f):
    """ERB-number (Cams) of frequency ``f`` in Hz."""
    return 21.4 * np.log10(4.37e-3 * np.asarray(f, dtype=float) + 1.0)


def erb_rate_inverse(e):
    return (10.0 ** (np.asarray(e, dtype=float) / 21.4) - 1.0) / 4.37e-3


def erb_bandwidth(f):
    """Equivalent rectangular bandwidth in Hz (Glasberg & Moore)."""
    return 24.7 * (4.37e-3 * np.asarray(f, dtype=float) + 1.0)


@dataclass(frozen=True, eq=False)
class GammatoneBank:
    center_freqs: np.ndarray
    weights: np.ndarray  # (n_bands, fft_bins), rows sum to 1
    fmin: float
    fmax: float
    window_size: int
    sample_rate: int

    @property
    def n_bands(self) -> int:
        return self.center_freqs.shape[0]

    def low_band_count(self, cutoff_hz: float = LOW_BAND_HZ) -> int:
        """Bands whose passband reaches ``cutoff_hz`` or below.

        A band qualifies when its lower ERB edge ``fc - ERB(fc)/2`` is at or
        below the cutoff; bands are ordered so this is always a prefix.
        """
        lower_edge = self.center_freqs - erb_bandwidth(self.center_freqs) / 2
        return int(np.count_nonzero(lower_edge <= cutoff_hz))


def build_gammatone_bank(n_bands: int = 20, fmin: float = 50.0, fmax: float = 2000.0,
                         window_size: int = WINDOW_SIZE, fs: int = DEFAULT_FS,
                         order: int = 4) -> GammatoneBank:
    """4th-order Gammatone magnitude responses sampled at the STFT bin centres."""
    if n_bands < 2:
        raise InvalidInputError("need at least two bands")
    if not 0 < fmin < fmax:
        raise InvalidInputError(f"need 0 < fmin < fmax, got {fmin}, {fmax}")
    if fmax >= fs / 2:
        raise InvalidInputError(f"fmax {fmax} Hz is not below Nyquist {fs / 2} Hz")
    centers = erb_rate_inverse(np.linspace(erb_rate(fmin), erb_rate(fmax), n_bands))
    centers[0], centers[-1] = fmin, fmax
    bin_freqs = np.arange(window_size // 2 + 1) * fs / window_size
    b = 1.019 * erb_bandwidth(centers)
    resp = (1.0 + ((bin_freqs[None, :] - centers[:, None]) / b[:, None]) ** 2) ** (-order / 2)
    weights = resp / resp.sum(axis=1, keepdims=True)
    centers.setflags(write=False)
    weights.setflags(write=False)
    return GammatoneBank(centers, weights, float(fmin), float(fmax), window_size, fs)


@lru_cache(maxsize=None)
def default_bank() -> GammatoneBank:
    return build_gammatone_bank()


def gammatone_spectrogram(spec: ComplexSpectrogram, bank: GammatoneBank) -> np.ndarray:
    """Complex band values: each band is a weighted sum of complex STFT bins."""
    if spec.bins != bank.weights.shape[1] or spec.sample_rate != bank.sample_rate \
            or spec.window_size != bank.window_size:
        raise InvalidInputError(
            f"bank built for {bank.window_size}-pt/{bank.sample_rate} Hz, spectrogram is "
            f"{spec.window_size}-pt/{spec.sample_rate} Hz with {spec.bins} bins"
        )
    return bank.weights @ spec.values


def log_magnitude(gspec: np.ndarray) -> np.ndarray:
    return 20.0 * np.log10(np.abs(gspec) + LOG_FLOOR)


def wrap_phase(x):
    """Principal value in (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)


def phase_plane(gspec: np.ndarray) -> np.ndarray:
    """Principal argument in (-pi, pi]; zero-valued bins get phase 0."""
    g = np.asarray(gspec)
    theta = np.angle(g)
    theta = np.where(theta == -np.pi, np.pi, theta)
    return np.where(g == 0, 0.0, theta)


def phase_derivative(phase: np.ndarray, axis: str = "time") -> np.ndarray:
    """First-order wrapped difference, last element replicated.

    ``axis`` is ``"time"`` (frames, the last axis) or ``"frequency"`` (bands).
    """
    ax = {"time": 1, "frequency": 0}.get(axis)
    if ax is None:
        raise InvalidInputError(f"axis must be 'time' or 'frequency', got {axis!r}")
    phase = np.asarray(phase, dtype=float)
    if phase.shape[ax] < 2:
        raise InvalidInputError(f"need at least 2 elements along {axis}")
    d = wrap_phase(np.diff(phase, axis=ax))
    last = np.take(d, [-1], axis=ax)
    return np.concatenate([d, last], axis=ax)


def _wrap_fn(theta):
    return np.cos(theta) + np.sin(theta)


def phase_continuity(phase: np.ndarray) -> np.ndarray:
    """Diagonal difference quotient of cos+sin along band and frame together.

    For each bin the quotient pairs (k, n) with (k+1, n+1); the denominator is
    wrapped, and where it vanishes the derivative ``cos - sin`` is used.
    The last band and frame are replicated from their neighbours.
    """
    phase = np.asarray(phase, dtype=float)
    if phase.ndim != 2 or min(phase.shape) < 2:
        raise InvalidInputError("phase continuity needs >= 2 bands and >= 2 frames")
    a = phase[:-1, :-1]
    b = phase[1:, 1:]
    den = wrap_phase(a - b)
    small = np.abs(den) < CONTINUITY_EPS
    limit = np.cos(a) - np.sin(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        quot = (_wrap_fn(a) - _wrap_fn(b)) / np.where(small, 1.0, den)
    out = np.where(small, limit, quot)
    out = np.concatenate([out, out[:, -1:]], axis=1)
    return np.concatenate([out, out[-1:, :]], axis=0)


class Recipe(str, enum.Enum):
    BASELINE = "Baseline"
    PLUS_PHASE = "PlusPhase"
    PLUS_CONTINUITY = "PlusContinuity"

    @classmethod
    def parse(cls, name) -> "Recipe":
        if isinstance(name, cls):
            return name
        for r in cls:
            if r.value.lower() == str(name).lower():
                return r
        raise InvalidInputError(f"unknown recipe {name!r}; choose from {[r.value for r in cls]}")


KIND_TAGS = {"log_mag": 0, "phase": 1, "dphase_time": 2, "dphase_freq": 3, "continuity": 4}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


@dataclass(frozen=True)
class Channel:
    kind: str
    bands: int


@dataclass(eq=False)
class FeatureTensor:
    """Stacked band x frame planes; ``values`` is (sum of bands, frames)."""

    channels: list
    values: np.ndarray

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    def plane(self, i: int) -> np.ndarray:
        start = sum(c.bands for c in self.channels[:i])
        return self.values[start:start + self.channels[i].bands]


def recipe_channels(recipe, bank: Optional[GammatoneBank] = None) -> list:
    recipe = Recipe.parse(recipe)
    bank = bank or default_bank()
    low = bank.low_band_count()
    chans = [Channel("log_mag", bank.n_bands)]
    if recipe in (Recipe.PLUS_PHASE, Recipe.PLUS_CONTINUITY):
        chans += [Channel("phase", low), Channel("dphase_time", low)]
    if recipe is Recipe.PLUS_CONTINUITY:
        chans.append(Channel("continuity", low))
    return chans


def _fit_frames(plane: np.ndarray, frames: int) -> np.ndarray:
    if plane.shape[1] >= frames:
        return plane[:, :frames]
    return np.pad(plane, ((0, 0), (0, frames - plane.shape[1])), mode="edge")


def assemble_features(x: Signal, recipe="PlusPhase", bank: Optional[GammatoneBank] = None,
                      stats: Optional["FeatureStats"] = None,
                      expected_samples: Optional[int] = CLIP_SAMPLES) -> FeatureTensor:
    """Featurize a 4 s clip into the stacked planes of ``recipe``.

    Planes are trimmed (or edge-padded) to 1997 frames. When ``stats`` is
    given each plane is standardised with it.
    """
    bank = bank or default_bank()
    if x.sample_rate != bank.sample_rate:
        raise InvalidInputError(f"expected {bank.sample_rate} Hz audio, got {x.sample_rate} Hz")
    if expected_samples is not None and len(x) != expected_samples:
        raise InvalidInputError(f"expected {expected_samples} samples, got {len(x)}")
    chans = recipe_channels(recipe, bank)
    g = gammatone_spectrogram(stft(x, bank.window_size, HOP), bank)
    planes = []
    phase = None
    for ch in chans:
        if ch.kind == "log_mag":
            p = log_magnitude(g)
        else:
            if phase is None:
                phase = phase_plane(g[: ch.bands])
            if ch.kind == "phase":
                p = phase
            elif ch.kind == "dphase_time":
                p = phase_derivative(phase, "time")
            elif ch.kind == "dphase_freq":
                p = phase_derivative(phase, "frequency")
            else:
                p = phase_continuity(phase)
        planes.append(_fit_frames(p[: ch.bands], N_FRAMES))
    ft = FeatureTensor(chans, np.concatenate(planes, axis=0))
    return stats.apply(ft) if stats is not None else ft


@dataclass
class FeatureStats:
    """Per-plane mean and standard deviation accumulated over a training set."""

    channels: list
    mean: list = field(default_factory=list)
    std: list = field(default_factory=list)

    @classmethod
    def from_tensors(cls, tensors: Sequence[FeatureTensor]) -> "FeatureStats":
        if not tensors:
            raise InvalidInputError("cannot compute statistics from no tensors")
        chans = tensors[0].channels
        n = len(chans)
        s = np.zeros(n)
        ss = np.zeros(n)
        count = np.zeros(n)
        for t in tensors:
            if t.channels != chans:
                raise InvalidInputError("tensors disagree on channel layout")
            for i in range(n):
                p = t.plane(i).astype(np.float64)
                s[i] += p.sum()
                ss[i] += np.square(p).sum()
                count[i] += p.size
        mean = s / count
        var = np.maximum(ss / count - mean**2, 0.0)
        std = np.where(var > 0, np.sqrt(var), 1.0)
        return cls(list(chans), mean.tolist(), std.tolist())

    def apply(self, t: FeatureTensor) -> FeatureTensor:
        if t.channels != self.channels:
            raise InvalidInputError("statistics were computed for a different channel layout")
        out = np.empty_like(t.values)
        start = 0
        for ch, m, s in zip(self.channels, self.mean, self.std):
            out[start:start + ch.bands] = (t.values[start:start + ch.bands] - m) / s
            start += ch.bands
        return FeatureTensor(list(t.channels), out)

    def to_json(self) -> dict:
        return {
            "channels": [[c.kind, c.bands] for c in self.channels],
            "mean": self.mean,
            "std": self.std,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FeatureStats":
        return cls([Channel(k, int(b)) for k, b in d["channels"]], list(d["mean"]), list(d["std"]))


MAGIC = b"RFP1"


def encode_features(t: FeatureTensor) -> bytes:
    header = [MAGIC, struct.pack("<I", len(t.channels))]
    for ch in t.channels:
        header.append(struct.pack("<II", KIND_TAGS[ch.kind], ch.bands))
    header.append(struct.pack("<I", t.frames))
    return b"".join(header) + np.ascontiguousarray(t.values, dtype="<f4").tobytes()


def decode_features(buf: bytes) -> FeatureTensor:
    if buf[:4] != MAGIC:
        raise DataError("not a feature file (bad magic)")
    try:
        (n,) = struct.unpack_from("<I", buf, 4)
        pos = 8
        chans = []
        for _ in range(n):
            tag, bands = struct.unpack_from("<II", buf, pos)
            chans.append(Channel(TAG_KINDS[tag], bands))
            pos += 8
        (frames,) = struct.unpack_from("<I", buf, pos)
        pos += 4
    except (struct.error, KeyError) as exc:
        raise DataError(f"corrupt feature header: {exc}") from exc
    rows = sum(c.bands for c in chans)
    expected = pos + rows * frames * 4
    if len(buf) != expected:
        raise DataError(f"feature file has {len(buf)} bytes, expected {expected}")
    values = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(rows, frames).astype(np.float32)
    return FeatureTensor(chans, values)


def write_features(path, t: FeatureTensor) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_features(t))
    tmp.replace(path)


def read_features(path) -> FeatureTensor:
    try:
        return decode_features(Path(path).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read features {path}: {exc}") from exc
