import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revfp.dsp import Signal
from revfp.errors import DataError, InvalidInputError, UnreliableEstimateError
from revfp.rir import (
    RoomProfile,
    decay_range_db,
    energy_decay_curve,
    image_source_rir,
    read_rooms,
    sabine_rt60,
    sample_receivers,
    schroeder_rt60,
    write_rooms,
)

FS = 16000


def shoebox(dims=(5.0, 4.0, 3.0), alpha=0.3, rid="r"):
    v = dims[0] * dims[1] * dims[2]
    return RoomProfile(rid, v, 1.0, "simulated", dims, alpha)


def decaying_noise(tau, seconds=2.0, seed=0, fs=FS):
    t = np.arange(int(seconds * fs)) / fs
    return np.random.default_rng(seed).standard_normal(t.size) * np.exp(-t / tau)


class TestRoomProfile:
    def test_volume_must_match_dims(self):
        with pytest.raises(InvalidInputError):
            RoomProfile("x", 61.0, 0.5, "simulated", (5, 4, 3), 0.3)

    def test_measured_room_without_geometry(self):
        r = RoomProfile("m", 120.0, 0.7, "measured")
        assert r.dims is None
        with pytest.raises(InvalidInputError):
            r.surface_m2

    @pytest.mark.parametrize("alpha", [0.0, -0.1, 1.5])
    def test_absorption_range(self, alpha):
        with pytest.raises(InvalidInputError):
            shoebox(alpha=alpha)

    def test_json_roundtrip(self, tmp_path):
        rooms = [shoebox(), RoomProfile("m", 120.0, 0.7, "measured", extra={"note": "hall"}),
                 RoomProfile("w", 60.0, 0.4, "simulated", (5, 4, 3), (0.1, 0.2, 0.3, 0.4, 0.5, 0.6))]
        write_rooms(tmp_path / "rooms.jsonl", rooms)
        back = read_rooms(tmp_path / "rooms.jsonl")
        assert [r.to_json() for r in back] == [r.to_json() for r in rooms]
        assert back[1].extra == {"note": "hall"}

    def test_bad_record(self, tmp_path):
        p = tmp_path / "rooms.jsonl"
        p.write_text(json.dumps({"id": "a", "volume_m3": 1.0}) + "\n")
        with pytest.raises(DataError):
            read_rooms(p)

    def test_area_weighted_absorption(self):
        r = RoomProfile("w", 60.0, 0.4, "simulated", (5, 4, 3), (0.2, 0.2, 0.2, 0.2, 0.6, 0.6))
        # floor and ceiling are 20 m^2 each out of 94
        assert r.mean_absorption == pytest.approx((54 * 0.2 + 40 * 0.6) / 94)


class TestImageSource:
    def test_direct_path_only(self):
        room = shoebox((10.0, 10.0, 10.0))
        src, mic = (2.0, 3.0, 4.0), (2.0 + 1.372, 3.0, 4.0)
        ir = image_source_rir(room, src, mic, FS, max_order=0)
        h = ir.signal.samples
        d = 1.372
        assert d * FS / 343.0 == pytest.approx(64.0)
        assert int(np.argmax(np.abs(h))) == 64
        assert h[64] == pytest.approx(1 / (4 * math.pi * d), rel=1e-9)
        rest = np.delete(h, 64)
        assert np.max(np.abs(rest)) < 1e-12

    def test_fractional_delay_peak_and_area(self):
        room = shoebox((10.0, 10.0, 10.0))
        d = 1.5
        h = image_source_rir(room, (2, 3, 4), (2 + d, 3, 4), FS, max_order=0).signal.samples
        delay = d * FS / 343.0
        assert abs(np.argmax(h) - delay) <= 0.5
        assert np.sum(h) == pytest.approx(1 / (4 * math.pi * d), rel=0.02)

    def test_length_covers_latest_image(self):
        room = shoebox()
        h = image_source_rir(room, (1, 1, 1), (4, 3, 2), FS, max_order=3).signal.samples
        # the last image's interpolation kernel ends inside the buffer
        assert np.abs(h[-5:]).max() < 1e-4 * np.abs(h).max()

    def test_reciprocity(self):
        room = shoebox()
        a = image_source_rir(room, (2.1, 1.7, 1.4), (3.6, 2.9, 1.2), FS, max_order=12).signal.samples
        b = image_source_rir(room, (3.6, 2.9, 1.2), (2.1, 1.7, 1.4), FS, max_order=12).signal.samples
        assert a.shape == b.shape
        assert np.max(np.abs(a - b)) < 1e-9

    def test_coincident_positions(self):
        with pytest.raises(InvalidInputError):
            image_source_rir(shoebox(), (1, 1, 1), (1, 1, 1))

    @pytest.mark.parametrize("pos", [(0.0, 1, 1), (5.0, 1, 1), (1, 4.5, 1), (1, 1, -1)])
    def test_outside_room(self, pos):
        with pytest.raises(InvalidInputError):
            image_source_rir(shoebox(), pos, (2, 2, 2))

    def test_needs_geometry(self):
        with pytest.raises(InvalidInputError):
            image_source_rir(RoomProfile("m", 10.0, 0.5, "measured"), (1, 1, 1), (2, 2, 2))

    def test_energy_decreases_with_absorption(self):
        src, mic = (1.3, 2.2, 1.1), (3.9, 1.4, 2.0)
        energies = []
        for a in (0.1, 0.2, 0.4, 0.6, 0.9):
            h = image_source_rir(shoebox(alpha=a), src, mic, FS, max_order=10).signal.samples
            energies.append(np.sum(h**2))
        assert all(x > y for x, y in zip(energies, energies[1:]))

    def test_energy_decreases_with_single_wall(self):
        src, mic = (1.3, 2.2, 1.1), (3.9, 1.4, 2.0)
        energies = []
        for a in (0.1, 0.3, 0.7):
            walls = (0.2, 0.2, a, 0.2, 0.2, 0.2)
            room = RoomProfile("w", 60.0, 1.0, "simulated", (5, 4, 3), walls)
            energies.append(np.sum(image_source_rir(room, src, mic, FS, max_order=8).signal.samples ** 2))
        assert energies[0] > energies[1] > energies[2]

    @pytest.mark.parametrize("alpha", [0.5, 0.6])
    def test_rt60_converges_with_order(self, alpha):
        room = shoebox(alpha=alpha)
        src, mic = (2.1, 1.7, 1.4), (3.6, 2.9, 1.2)
        t20 = schroeder_rt60(image_source_rir(room, src, mic, FS, max_order=20))
        t40 = schroeder_rt60(image_source_rir(room, src, mic, FS, max_order=40))
        assert abs(t40 - t20) / t40 < 0.05

    @pytest.mark.slow
    @pytest.mark.parametrize("order", [30, 40])
    def test_reference_room_matches_sabine(self, order):
        room = shoebox(alpha=0.3)
        ir = image_source_rir(room, (2.1, 1.7, 1.4), (3.6, 2.9, 1.2), FS, max_order=order)
        ref = sabine_rt60(60.0, 94.0, 0.3)
        assert abs(schroeder_rt60(ir) - ref) / ref < 0.25


class TestSabine:
    def test_reference_room(self):
        assert sabine_rt60(60, 94, 0.3) == pytest.approx(0.3426, abs=5e-5)

    def test_unit_cube_full_absorption(self):
        assert sabine_rt60(1, 6, 1.0) == pytest.approx(0.0268, abs=5e-5)

    def test_from_room_geometry(self):
        r = shoebox()
        assert r.surface_m2 == 94.0
        assert sabine_rt60(r.volume_m3, r.surface_m2, r.mean_absorption) == pytest.approx(0.161 * 60 / 28.2)

    def test_zero_alpha(self):
        with pytest.raises(InvalidInputError):
            sabine_rt60(60, 94, 0.0)

    @given(v=st.floats(1, 1e4), s=st.floats(1, 1e4), a=st.floats(0.01, 0.5))
    def test_doubling_alpha_halves(self, v, s, a):
        assert sabine_rt60(v, s, 2 * a) == pytest.approx(sabine_rt60(v, s, a) / 2, rel=1e-12)

    @given(dims=st.tuples(*[st.floats(1, 30)] * 3), k=st.floats(0.1, 10), a=st.floats(0.05, 1))
    def test_homothety(self, dims, k, a):
        big = tuple(k * d for d in dims)
        r1, r2 = shoebox(dims, a), shoebox(big, a)
        t1 = sabine_rt60(r1.volume_m3, r1.surface_m2, a)
        t2 = sabine_rt60(r2.volume_m3, r2.surface_m2, a)
        assert t2 == pytest.approx(k * t1, rel=1e-9)


class TestSchroeder:
    def test_exponential_decay(self):
        est = schroeder_rt60(Signal(decaying_noise(0.0724), FS))
        assert abs(est - 0.5) / 0.5 < 0.05

    def test_doubled_tau(self):
        a = schroeder_rt60(Signal(decaying_noise(0.0724, 3.0), FS))
        b = schroeder_rt60(Signal(decaying_noise(2 * 0.0724, 3.0), FS))
        assert abs(b / a - 2.0) / 2.0 < 0.05

    def test_trailing_silence(self):
        h = decaying_noise(0.0724)
        a = schroeder_rt60(h, fs=FS)
        b = schroeder_rt60(np.r_[h, np.zeros(FS)], fs=FS)
        assert abs(a - b) / a < 0.01

    def test_accepts_impulse_response(self):
        ir = image_source_rir(shoebox(alpha=0.6), (1, 1, 1), (3, 2, 2), FS, max_order=15)
        assert schroeder_rt60(ir) == schroeder_rt60(ir.signal)

    def test_short_range_falls_back_to_t20(self):
        rng = np.random.default_rng(4)
        t = np.arange(int(1.5 * FS)) / FS
        # a noise floor leaves roughly 30 dB of usable decay, so only the T20 span exists
        h = rng.standard_normal(t.size) * np.sqrt(np.exp(-2 * t / 0.0724) + 10 ** (-46 / 10))
        rng_db = decay_range_db(h)
        assert 25 <= rng_db < 35
        est = schroeder_rt60(h, fs=FS)
        assert abs(est - 0.5) / 0.5 < 0.1

    def test_low_range_rejected(self):
        h = np.random.default_rng(0).standard_normal(FS)
        with pytest.raises(UnreliableEstimateError):
            schroeder_rt60(h, fs=FS)

    def test_zero_energy(self):
        with pytest.raises(InvalidInputError):
            schroeder_rt60(np.zeros(100), fs=FS)

    def test_raw_array_needs_rate(self):
        with pytest.raises(InvalidInputError):
            schroeder_rt60(np.ones(10))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 500))
    def test_edc_monotone(self, seed, n):
        h = np.random.default_rng(seed).standard_normal(n)
        edc = energy_decay_curve(h)
        assert edc[0] == pytest.approx(1.0)
        assert np.all(np.diff(edc) <= 1e-15)


class TestReceivers:
    def test_margin_and_count(self):
        room = shoebox((6.0, 5.0, 3.0))
        src = (3.0, 2.5, 1.5)
        pts = sample_receivers(room, src, 5, np.random.default_rng(0))
        assert len(pts) == 5
        for p in pts:
            p = np.asarray(p)
            assert np.all(p >= 0.5) and np.all(p <= np.asarray(room.dims) - 0.5)
            assert np.linalg.norm(p - src) >= 0.5

    def test_deterministic(self):
        room = shoebox()
        a = sample_receivers(room, (2, 2, 1.5), 5, np.random.default_rng(3))
        b = sample_receivers(room, (2, 2, 1.5), 5, np.random.default_rng(3))
        assert a == b

    def test_room_too_small(self):
        room = shoebox((0.9, 4.0, 3.0))
        with pytest.raises(InvalidInputError):
            sample_receivers(room, (0.45, 2, 1.5), 1, np.random.default_rng(0))
