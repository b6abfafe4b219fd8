"""Labelled noisy reverberant speech: room sets, splits, sample generation, manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from .dsp import DEFAULT_FS, Signal, convolve, mix_at_snr, read_wav, resample, white_noise, write_wav
from .errors import DataError, InvalidInputError
from .rir import (
    ImpulseResponse,
    RoomProfile,
    image_source_rir,
    sabine_rt60,
    sample_receivers,
    schroeder_rt60,
)

logger = logging.getLogger(__name__)

SNR_LEVELS = (math.inf, 30.0, 20.0, 10.0, 0.0)
SPLITS = ("train", "val", "test")
CLIP_SECONDS = 4
TARGET_RMS = 0.05
MANIFEST_VERSION = 1


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def snr_to_json(snr: float):
    return "+inf" if math.isinf(snr) else snr


def snr_from_json(v) -> float:
    return math.inf if v in ("+inf", "inf", "Infinity", None) else float(v)


# --------------------------------------------------------------------------
# Dry source material
# --------------------------------------------------------------------------

def _resonator(freq: float, bw: float, fs: int):
    r = math.exp(-math.pi * bw / fs)
    theta = 2 * math.pi * freq / fs
    return [1 - r], [1.0, -2 * r * math.cos(theta), r * r]


def synthetic_speech(duration: float, fs: int = DEFAULT_FS, seed: int = 0) -> Signal:
    """Dry voiced-speech stand-in: formant-filtered glottal pulse trains.

    Syllable-length bursts (0.08-0.35 s) with drifting pitch and random
    formants are separated by silent gaps, with occasional fricative noise.
    The gaps expose the room's decay, as they do in running speech.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    out = np.zeros(n)
    f0_base = rng.uniform(95, 230)
    pos = int(rng.uniform(0.0, 0.2) * fs)
    while pos < n:
        seg = int(rng.uniform(0.08, 0.35) * fs)
        seg = min(seg, n - pos)
        if seg <= 16:
            break
        t = np.arange(seg) / fs
        if rng.random() < 0.8:
            f0 = f0_base * (1 + 0.15 * rng.uniform(-1, 1) + 0.1 * np.sin(2 * np.pi * rng.uniform(1, 4) * t))
            phase = np.cumsum(f0 / fs)
            src = np.diff(np.floor(phase), prepend=0.0)
            src = sps.lfilter([1.0], [1.0, -0.95], src)  # glottal roll-off
            src += 0.02 * rng.standard_normal(seg)
            formants = (rng.uniform(300, 850), rng.uniform(900, 2300), rng.uniform(2400, 3200))
            y = np.zeros(seg)
            for i, fmt in enumerate(formants):
                b, a = _resonator(fmt, 60 + 40 * i, fs)
                y += sps.lfilter(b, a, src) * (1.0, 0.6, 0.3)[i]
        else:
            lo = rng.uniform(1500, 3500)
            b, a = sps.butter(2, [lo / (fs / 2), min(0.95, (lo + 3000) / (fs / 2))], btype="band")
            y = 0.3 * sps.lfilter(b, a, rng.standard_normal(seg))
        ramp = min(seg // 4, int(0.02 * fs))
        env = np.ones(seg)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[seg - ramp:] = np.linspace(1, 0, ramp)
        out[pos:pos + seg] += y * env * rng.uniform(0.5, 1.0)
        gap = rng.uniform(0.03, 0.25) if rng.random() < 0.8 else rng.uniform(0.3, 0.7)
        pos += seg + int(gap * fs)
    rms = math.sqrt(np.mean(out**2))
    return Signal(out / rms * 0.1 if rms > 0 else out, fs)


@dataclass(frozen=True, eq=False)
class SpeechClip:
    ref: str
    signal: Signal


def synthetic_corpus(count: int = 16, duration: float = 10.0, seed: int = 0) -> List[SpeechClip]:
    return [
        SpeechClip(f"synth:{seed}:{i}", synthetic_speech(duration, DEFAULT_FS, _stable_seed("speech", seed, i)))
        for i in range(count)
    ]


def load_speech_dir(path) -> List[SpeechClip]:
    """Dry mono WAVs from a directory, resampled to 16 kHz. Short clips are skipped."""
    clips = []
    for wav in sorted(Path(path).glob("*.wav")):
        sig = read_wav(wav)
        if sig.sample_rate != DEFAULT_FS:
            sig = resample(sig, DEFAULT_FS)
        if len(sig) < CLIP_SECONDS * DEFAULT_FS:
            logger.warning("skipping %s: shorter than %d s", wav.name, CLIP_SECONDS)
            continue
        clips.append(SpeechClip(str(wav), sig))
    if not clips:
        raise DataError(f"no usable speech clips in {path}")
    return clips


# --------------------------------------------------------------------------
# Rooms
# --------------------------------------------------------------------------

def simulate_room_set(count: int, volume_range: Tuple[float, float] = (20.0, 2000.0),
                      alpha_range: Tuple[float, float] = (0.1, 0.7), receivers: int = 5,
                      seed: int = 0, fs: int = DEFAULT_FS, prefix: str = "sim",
                      index_offset: int = 0):
    """Random shoebox rooms with one near-centre source and ``receivers`` mics each.

    Returns ``[(RoomProfile, [ImpulseResponse, ...]), ...]``. Each room's
    RT60 label is the mean Schroeder estimate over its responses; the Sabine
    prediction is kept alongside for reference.
    """
    vmin, vmax = volume_range
    if not 0 < vmin <= vmax:
        raise InvalidInputError(f"invalid volume range {volume_range}")
    if not 0 < alpha_range[0] <= alpha_range[1] <= 1:
        raise InvalidInputError(f"invalid absorption range {alpha_range}")
    out = []
    for i in range(index_offset, index_offset + count):
        rng = np.random.default_rng(_stable_seed("room", seed, i))
        volume = math.exp(rng.uniform(math.log(vmin), math.log(vmax)))
        ry, rz = rng.uniform(0.5, 1.0), rng.uniform(0.3, 0.7)
        lx = (volume / (ry * rz)) ** (1 / 3)
        dims = (lx, lx * ry, volume / (lx * lx * ry))
        if min(dims) <= 1.5:
            raise InvalidInputError(
                f"volume {volume:.1f} m^3 gives a {min(dims):.2f} m dimension; raise the volume range"
            )
        alpha = float(rng.uniform(*alpha_range))
        room_id = f"{prefix}-{seed}-{i:03d}"
        proto = RoomProfile(room_id, dims[0] * dims[1] * dims[2], 1.0, "simulated", dims, alpha)
        sab = sabine_rt60(proto.volume_m3, proto.surface_m2, proto.mean_absorption)
        d = np.asarray(dims)
        src = tuple(float(v) for v in d / 2 + rng.uniform(-0.1, 0.1, 3) * d)
        mics = sample_receivers(proto, src, receivers, rng)
        irs = [image_source_rir(proto, src, m, fs=fs, max_order=10_000, max_time=1.25 * sab) for m in mics]
        t60s = [schroeder_rt60(ir) for ir in irs]
        room = RoomProfile(
            room_id, proto.volume_m3, float(np.mean(t60s)), "simulated", dims, alpha,
            extra={"sabine_rt60_s": sab, "schroeder_rt60_s": [float(v) for v in t60s], "seed": seed},
        )
        out.append((room, irs))
    return out


def load_room_rirs(rooms: Sequence[RoomProfile], base_dir) -> Dict[str, List[ImpulseResponse]]:
    """Read each room's RIR WAVs (paths relative to ``base_dir``), resampled to 16 kHz."""
    base = Path(base_dir)
    table = {}
    for room in rooms:
        entries = room.extra.get("rirs") or []
        irs = []
        for e in entries:
            sig = read_wav(base / e["path"])
            if sig.sample_rate != DEFAULT_FS:
                sig = resample(sig, DEFAULT_FS)
            irs.append(ImpulseResponse(sig, room.id, _tuple(e.get("source")), _tuple(e.get("mic")),
                                       room.provenance))
        table[room.id] = irs
    return table


def _tuple(v):
    return tuple(v) if v is not None else None


# --------------------------------------------------------------------------
# Labels and splits
# --------------------------------------------------------------------------

def compute_labels(room: RoomProfile) -> Dict[str, float]:
    """``log10`` of volume (m^3) and natural log of RT60 (s)."""
    if not (room.volume_m3 > 0 and room.rt60_s > 0):
        raise InvalidInputError(f"room {room.id}: labels need positive volume and RT60")
    return {"log10_volume": math.log10(room.volume_m3), "log_rt60": math.log(room.rt60_s)}


def split_by_room(rooms: Sequence[RoomProfile], ratios=(6, 2, 2), seed: int = 0,
                  allow_simulated_test: bool = False) -> Dict[str, str]:
    """Assign each room to train/val/test.

    Validation and test get ``floor(n * ratio / total)`` rooms each (at least
    one), the rounding residue goes to train. Test rooms are drawn from
    measured rooms only unless ``allow_simulated_test``.
    """
    if len(ratios) != 3 or min(ratios) <= 0:
        raise InvalidInputError(f"ratios must be three positive numbers, got {ratios}")
    ids = sorted(r.id for r in rooms)
    if len(set(ids)) != len(ids):
        raise InvalidInputError("room ids must be unique")
    n = len(ids)
    if n < 3:
        raise InvalidInputError(f"need at least 3 rooms for 3 splits, got {n}")
    total = float(sum(ratios))
    n_val = max(1, int(n * ratios[1] / total))
    n_test = max(1, int(n * ratios[2] / total))
    rng = np.random.default_rng(_stable_seed("split", seed))
    measured = sorted(r.id for r in rooms if r.provenance == "measured")
    pool = ids if allow_simulated_test else measured
    if len(pool) < n_test:
        raise InvalidInputError(
            f"test split needs {n_test} measured rooms, only {len(pool)} available"
        )
    test = set(rng.permutation(pool)[:n_test].tolist())
    rest = [i for i in ids if i not in test]
    val = set(rng.permutation(rest)[:n_val].tolist())
    return {i: "test" if i in test else "val" if i in val else "train" for i in ids}


# --------------------------------------------------------------------------
# Samples
# --------------------------------------------------------------------------

@dataclass
class SampleRecord:
    sample_id: str
    room_id: str
    rir_index: int
    rir_ref: str
    speech_ref: str
    speech_offset: int
    snr_db: float
    noise_seed: int
    split: str
    provenance: str
    labels: Dict[str, float] = field(default_factory=dict)
    audio: Optional[str] = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["snr_db"] = snr_to_json(self.snr_db)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        d = dict(d)
        d.pop("kind", None)
        d["snr_db"] = snr_from_json(d["snr_db"])
        return cls(**d)

    def content_key(self) -> str:
        """Hash of everything that determines this sample's audio."""
        parts = [MANIFEST_VERSION, self.rir_ref, self.speech_ref, self.speech_offset,
                 snr_to_json(self.snr_db), self.noise_seed]
        return hashlib.sha256(json.dumps(parts).encode()).hexdigest()[:20]


def generate_samples(rooms: Sequence[RoomProfile], rirs: Dict[str, List[ImpulseResponse]],
                     speech: Sequence[SpeechClip], per_room: int, seed: int = 0,
                     assignment: Optional[Dict[str, str]] = None,
                     replicate_snr: bool = False, rir_refs: Optional[Dict[str, List[str]]] = None
                     ) -> List[SampleRecord]:
    """Draw ``per_room`` (speech excerpt, RIR, SNR) combinations for every room.

    With ``replicate_snr`` each draw is emitted once per SNR level instead of
    at a single random level. Audio is produced separately by :func:`render_sample`.
    """
    if per_room < 1:
        raise InvalidInputError("per_room must be >= 1")
    n_clip = CLIP_SECONDS * DEFAULT_FS
    usable = [c for c in speech if len(c.signal) >= n_clip]
    for c in speech:
        if len(c.signal) < n_clip:
            logger.warning("speech clip %s shorter than %d s, skipped", c.ref, CLIP_SECONDS)
    if not usable:
        raise InvalidInputError("no speech clip is at least 4 s long")
    records = []
    for room in sorted(rooms, key=lambda r: r.id):
        irs = rirs.get(room.id) or []
        if not irs:
            raise InvalidInputError(f"room {room.id} has no impulse responses")
        labels = compute_labels(room)
        split = assignment[room.id] if assignment is not None else "train"
        refs = (rir_refs or {}).get(room.id) or [f"{room.id}#{k}" for k in range(len(irs))]
        for j in range(per_room):
            sid = f"{room.id}-{j:04d}"
            rng = np.random.default_rng(_stable_seed("sample", seed, sid))
            k = int(rng.integers(len(irs)))
            clip = usable[int(rng.integers(len(usable)))]
            offset = int(rng.integers(len(clip.signal) - n_clip + 1))
            noise_seed = int(rng.integers(2**31))
            levels = SNR_LEVELS if replicate_snr else (SNR_LEVELS[int(rng.integers(len(SNR_LEVELS)))],)
            for level in levels:
                rid = sid if not replicate_snr else f"{sid}-{_snr_tag(level)}"
                records.append(SampleRecord(rid, room.id, k, refs[k], clip.ref, offset, level,
                                            noise_seed, split, room.provenance, dict(labels)))
    return records


def _snr_tag(level: float) -> str:
    return "inf" if math.isinf(level) else f"{int(level)}dB"


def render_sample(record: SampleRecord, rirs: Dict[str, List[ImpulseResponse]],
                  speech: Dict[str, SpeechClip], components: bool = False):
    """Synthesize one sample's 4 s mixture.

    Speech and white noise are each convolved with the same RIR, trimmed to
    4 s, mixed at the record's SNR and scaled to a fixed RMS. With
    ``components`` the (scaled) reverberant speech and noise parts are
    returned as well.
    """
    n_clip = CLIP_SECONDS * DEFAULT_FS
    try:
        ir = rirs[record.room_id][record.rir_index]
        clip = speech[record.speech_ref].signal
    except (KeyError, IndexError) as exc:
        raise DataError(f"sample {record.sample_id}: missing source {exc}") from exc
    dry = Signal(clip.samples[record.speech_offset:record.speech_offset + n_clip], DEFAULT_FS)
    wet = Signal(convolve(dry, ir).samples[:n_clip], DEFAULT_FS)
    if math.isinf(record.snr_db):
        noise_part = np.zeros(n_clip)
        mix = wet
    else:
        noise = white_noise(n_clip, DEFAULT_FS, record.noise_seed)
        wet_noise = Signal(convolve(noise, ir).samples[:n_clip], DEFAULT_FS)
        mix = mix_at_snr(wet, wet_noise, record.snr_db)
        noise_part = mix.samples - wet.samples
    gain = TARGET_RMS / math.sqrt(mix.power())
    out = Signal(mix.samples * gain, DEFAULT_FS)
    if components:
        return out, Signal(wet.samples * gain, DEFAULT_FS), Signal(noise_part * gain, DEFAULT_FS)
    return out


def joint_normalization(records: Sequence[SampleRecord]) -> Dict[str, float]:
    """Per-target divisor: the largest |label| over the training records.

    Dividing by it puts the training maximum magnitude at 1 while keeping
    the sign of negative log labels.
    """
    train = [r for r in records if r.split == "train"]
    if not train:
        raise InvalidInputError("normalization needs a nonempty train split")
    out = {}
    for key in ("log10_volume", "log_rt60"):
        m = max(abs(r.labels[key]) for r in train)
        if not m > 0:
            raise InvalidInputError(f"all train {key} labels are zero; cannot normalise")
        out[key] = m
    return out


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: List[SampleRecord]
    normalization: Dict[str, float] = field(default_factory=dict)
    meta: Dict[str, object] = field(default_factory=dict)

    def split(self, name: str) -> List[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def header(self) -> dict:
        return {
            "kind": "header",
            "version": MANIFEST_VERSION,
            "label_bases": {"log10_volume": "log10", "log_rt60": "ln"},
            "normalization": self.normalization,
            **self.meta,
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps({"kind": "sample", **r.to_json()}, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.dumps(), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        header, records = {}, []
        try:
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    d = json.loads(line)
                    if d.get("kind") == "header":
                        header = d
                    else:
                        records.append(SampleRecord.from_json(d))
        except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        meta = {k: v for k, v in header.items()
                if k not in ("kind", "version", "label_bases", "normalization")}
        return cls(records, dict(header.get("normalization", {})), meta)


def check_disjoint(records: Sequence[SampleRecord]) -> None:
    """Raise if a room or sample id appears in more than one split."""
    room_split: Dict[str, str] = {}
    seen = set()
    for r in records:
        if r.sample_id in seen:
            raise DataError(f"duplicate sample id {r.sample_id}")
        seen.add(r.sample_id)
        if room_split.setdefault(r.room_id, r.split) != r.split:
            raise DataError(f"room {r.room_id} appears in splits {room_split[r.room_id]} and {r.split}")
