"""Shoebox room impulse responses and their acoustic labels.

Image sources follow the Allen & Berkley indexing: along each axis an image
is ``(1 - 2p) * s + 2 n L`` for integer ``n`` and parity ``p``, hitting the
near wall ``|n - p|`` times and the far wall ``|n|`` times.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .dsp import DEFAULT_FS, Signal
from .errors import DataError, InvalidInputError, UnreliableEstimateError

SPEED_OF_SOUND = 343.0
SABINE_CONSTANT = 0.161
FRACTIONAL_DELAY_TAPS = 81

PROVENANCES = ("measured", "simulated")


@dataclass
class RoomProfile:
    """One acoustic space with its labels.

    ``absorption`` is either a scalar or six per-wall coefficients ordered
    (x=0, x=Lx, y=0, y=Ly, z=0, z=Lz). Measured rooms may omit geometry.
    """

    id: str
    volume_m3: float
    rt60_s: float
    provenance: str = "simulated"
    dims: Optional[tuple] = None
    absorption: Optional[object] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")
        if self.dims is not None:
            self.dims = tuple(float(d) for d in self.dims)
            if len(self.dims) != 3 or min(self.dims) <= 0:
                raise InvalidInputError(f"room dims must be three positive lengths, got {self.dims}")
        if self.absorption is not None:
            a = np.atleast_1d(np.asarray(self.absorption, dtype=float))
            if a.size not in (1, 6) or np.any(a <= 0) or np.any(a > 1):
                raise InvalidInputError(f"absorption must be in (0, 1], got {self.absorption}")
            self.absorption = float(a[0]) if a.size == 1 else tuple(float(v) for v in a)
        if not self.volume_m3 > 0:
            raise InvalidInputError(f"room {self.id}: volume must be positive")
        if self.provenance == "simulated" and self.dims is not None:
            v = self.dims[0] * self.dims[1] * self.dims[2]
            if not math.isclose(v, self.volume_m3, rel_tol=1e-9):
                raise InvalidInputError(f"room {self.id}: volume {self.volume_m3} != product of dims {v}")
        if not self.rt60_s > 0:
            raise InvalidInputError(f"room {self.id}: RT60 must be positive")

    @property
    def wall_absorption(self) -> np.ndarray:
        if self.absorption is None:
            raise InvalidInputError(f"room {self.id} has no absorption data")
        return np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,)).copy()

    @property
    def surface_m2(self) -> float:
        lx, ly, lz = self._require_dims()
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    @property
    def mean_absorption(self) -> float:
        """Area-weighted mean absorption."""
        lx, ly, lz = self._require_dims()
        areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
        return float(np.dot(areas, self.wall_absorption) / areas.sum())

    def _require_dims(self):
        if self.dims is None:
            raise InvalidInputError(f"room {self.id} has no geometry")
        return self.dims

    def to_json(self) -> dict:
        rec = {
            "id": self.id,
            "dims": list(self.dims) if self.dims is not None else None,
            "absorption": (list(self.absorption) if isinstance(self.absorption, tuple) else self.absorption),
            "volume_m3": self.volume_m3,
            "rt60_s": self.rt60_s,
            "provenance": self.provenance,
        }
        rec.update(self.extra)
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "RoomProfile":
        known = {"id", "dims", "absorption", "volume_m3", "rt60_s", "provenance"}
        try:
            return cls(
                id=str(rec["id"]),
                volume_m3=float(rec["volume_m3"]),
                rt60_s=float(rec["rt60_s"]),
                provenance=rec.get("provenance", "measured"),
                dims=rec.get("dims"),
                absorption=rec.get("absorption"),
                extra={k: v for k, v in rec.items() if k not in known},
            )
        except KeyError as exc:
            raise DataError(f"room record missing field {exc}") from exc


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    signal: Signal
    room_id: str
    source_pos: Optional[tuple] = None
    mic_pos: Optional[tuple] = None
    provenance: str = "simulated"

    def __post_init__(self):
        if len(self.signal) == 0:
            raise InvalidInputError("impulse response is empty")

    @property
    def sample_rate(self) -> int:
        return self.signal.sample_rate


def _check_inside(pos, dims, what: str) -> np.ndarray:
    p = np.asarray(pos, dtype=float)
    if p.shape != (3,):
        raise InvalidInputError(f"{what} position must be a 3-vector")
    if np.any(p <= 0) or np.any(p >= np.asarray(dims)):
        raise InvalidInputError(f"{what} position {tuple(p)} is outside room {tuple(dims)}")
    return p


def _axis_images(s: float, r: float, length: float, beta_near: float, beta_far: float,
                 max_order: int, max_dist: float):
    """Per-axis image offsets to the receiver, reflection counts and gains."""
    n_max = max_order // 2 + 1
    if math.isfinite(max_dist):
        n_max = min(n_max, int(math.ceil(max_dist / (2 * length))) + 1)
    n = np.arange(-n_max, n_max + 1)
    offs, orders, gains = [], [], []
    for p in (0, 1):
        near = np.abs(n - p)
        far = np.abs(n)
        offs.append((1 - 2 * p) * s + 2 * n * length - r)
        orders.append(near + far)
        gains.append(beta_near ** near * beta_far ** far)
    offs, orders, gains = (np.concatenate(a) for a in (offs, orders, gains))
    keep = (orders <= max_order) & (np.abs(offs) <= max_dist)
    return offs[keep], orders[keep], gains[keep]


def _fractional_delay_taps(delays: np.ndarray, taps: int = FRACTIONAL_DELAY_TAPS):
    """Windowed-sinc interpolation kernels for each (fractional) delay."""
    half = taps // 2
    base = np.floor(delays).astype(np.int64)
    k = np.arange(-half, half + 1)
    idx = base[:, None] + k[None, :]
    t = idx - delays[:, None]
    kernel = np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / (half + 1)))
    return idx, kernel


def image_source_rir(room: RoomProfile, source: Sequence[float], mic: Sequence[float],
                     fs: int = DEFAULT_FS, max_order: int = 30,
                     max_time: Optional[float] = None) -> ImpulseResponse:
    """Image-source impulse response of a shoebox room.

    Each image contributes ``prod(beta) / (4 pi d)`` at delay ``d / c`` with
    ``beta = sqrt(1 - alpha)`` per wall hit. ``max_time`` (seconds) optionally
    drops images arriving later than that, bounding cost for large rooms.
    """
    if room.dims is None:
        raise InvalidInputError(f"room {room.id} has no geometry to simulate")
    if max_order < 0:
        raise InvalidInputError("max_order must be >= 0")
    dims = np.asarray(room.dims)
    src = _check_inside(source, dims, "source")
    rcv = _check_inside(mic, dims, "mic")
    if np.allclose(src, rcv):
        raise InvalidInputError("source and mic coincide")
    beta = np.sqrt(1.0 - room.wall_absorption)
    max_dist = math.inf if max_time is None else max_time * SPEED_OF_SOUND
    axes = [
        _axis_images(src[i], rcv[i], dims[i], beta[2 * i], beta[2 * i + 1], max_order, max_dist)
        for i in range(3)
    ]
    (xo, xk, xg), (yo, yk, yg) = axes[0], axes[1]
    zo, zk, zg = axes[2]

    yz_d2 = (yo[:, None] ** 2 + zo[None, :] ** 2).ravel()
    yz_k = (yk[:, None] + zk[None, :]).ravel()
    yz_g = (yg[:, None] * zg[None, :]).ravel()

    delays, amps = [], []
    for off, k, g in zip(xo, xk, xg):
        sel = (yz_k + k) <= max_order
        d = np.sqrt(off * off + yz_d2[sel])
        a = g * yz_g[sel]
        if np.isfinite(max_dist):
            near = d <= max_dist
            d, a = d[near], a[near]
        delays.append(d * (fs / SPEED_OF_SOUND))
        amps.append(a / (4.0 * np.pi * d))
    delays = np.concatenate(delays)
    amps = np.concatenate(amps)
    # Canonical order so reciprocal geometries sum identically.
    order = np.lexsort((amps, delays))
    delays, amps = delays[order], amps[order]

    half = FRACTIONAL_DELAY_TAPS // 2
    length = int(math.ceil(delays.max())) + half + 1
    h = np.zeros(length)
    chunk = 200_000
    for start in range(0, delays.size, chunk):
        idx, kern = _fractional_delay_taps(delays[start:start + chunk])
        w = kern * amps[start:start + chunk, None]
        ok = (idx >= 0) & (idx < length)
        h += np.bincount(idx[ok], weights=w[ok], minlength=length)
    return ImpulseResponse(Signal(h, fs), room.id, tuple(src), tuple(rcv), "simulated")


def sabine_rt60(volume_m3: float, surface_m2: float, mean_alpha: float) -> float:
    """Diffuse-field reverberation time ``0.161 V / (S alpha)`` in seconds."""
    if mean_alpha == 0:
        raise InvalidInputError("zero absorption gives an infinite reverberation time")
    if volume_m3 <= 0 or surface_m2 <= 0 or mean_alpha < 0 or mean_alpha > 1:
        raise InvalidInputError("volume, surface must be positive and 0 < alpha <= 1")
    return SABINE_CONSTANT * volume_m3 / (surface_m2 * mean_alpha)


def energy_decay_curve(h: np.ndarray) -> np.ndarray:
    """Backward-integrated energy, normalised to 1 at t=0 (linear scale)."""
    e = np.cumsum((np.asarray(h, dtype=np.float64) ** 2)[::-1])[::-1]
    return e / e[0]


def decay_range_db(h: np.ndarray) -> float:
    """Usable EDC range: total energy against the integrated noise floor.

    The floor is the mean power over the last tenth of the response (after
    trailing digital silence is dropped), integrated over the full length.
    """
    h = np.asarray(h, dtype=np.float64)
    nz = np.flatnonzero(h)
    if nz.size == 0:
        return 0.0
    h = h[: nz[-1] + 1]
    tail = h[-max(1, h.size // 10):]
    floor = float(np.mean(tail**2)) * h.size
    total = float(np.sum(h**2))
    if floor <= 0:
        return math.inf
    return 10.0 * math.log10(total / floor)


def _fit_decay(t: np.ndarray, edc_db: np.ndarray, hi: float, lo: float) -> float:
    sel = np.flatnonzero((edc_db <= hi) & (edc_db >= lo))
    if sel.size < 2:
        raise UnreliableEstimateError(f"EDC has too few points between {hi} and {lo} dB")
    sel = np.arange(sel[0], sel[-1] + 1)
    slope, _ = np.polyfit(t[sel], edc_db[sel], 1)
    if slope >= 0:
        raise UnreliableEstimateError("EDC does not decay over the fit range")
    return -60.0 / slope


def schroeder_rt60(ir, fs: Optional[int] = None) -> float:
    """Reverberation time from the Schroeder energy decay curve.

    Least-squares line over the -5..-35 dB span of the EDC (T30), falling
    back to -5..-25 dB (T20) when the decay range is under 35 dB.
    Accepts an :class:`ImpulseResponse`, a :class:`Signal`, or a raw array
    with ``fs``.
    """
    sig = getattr(ir, "signal", ir)
    if isinstance(sig, Signal):
        h, fs = sig.samples, sig.sample_rate
    else:
        if fs is None:
            raise InvalidInputError("fs is required for raw arrays")
        h = np.asarray(sig, dtype=np.float64)
    if not np.any(h):
        raise InvalidInputError("impulse response has no energy")
    nz = np.flatnonzero(h)
    h = h[: nz[-1] + 1]
    rng = decay_range_db(h)
    if rng < 25.0:
        raise UnreliableEstimateError(f"EDC dynamic range {rng:.1f} dB is below 25 dB")
    edc = energy_decay_curve(h)
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc)
    t = np.arange(h.size) / fs
    if rng >= 35.0:
        return _fit_decay(t, edc_db, -5.0, -35.0)
    return _fit_decay(t, edc_db, -5.0, -25.0)


def sample_receivers(room: RoomProfile, source: Sequence[float], count: int, rng: np.random.Generator,
                     margin: float = 0.5, max_tries: int = 10000) -> list:
    """Uniform receiver positions at least ``margin`` from walls and the source."""
    dims = np.asarray(room._require_dims())
    if np.any(dims <= 2 * margin):
        raise InvalidInputError(f"room {room.id} too small for a {margin} m wall margin")
    src = np.asarray(source, dtype=float)
    out = []
    for _ in range(max_tries):
        p = margin + rng.random(3) * (dims - 2 * margin)
        if np.linalg.norm(p - src) >= margin:
            out.append(tuple(float(v) for v in p))
            if len(out) == count:
                return out
    raise InvalidInputError(f"could not place {count} receivers in room {room.id}")


def read_rooms(path) -> list:
    rooms = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rooms.append(RoomProfile.from_json(json.loads(line)))
            except (json.JSONDecodeError, InvalidInputError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rooms


def write_rooms(path, rooms: Iterable[RoomProfile]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for room in rooms:
            fh.write(json.dumps(room.to_json(), sort_keys=False) + "\n")
