import json

import numpy as np
import pytest

from aenv import acoustics as ac

FS = ac.SAMPLE_RATE


@pytest.fixture(scope="module")
def table():
    return ac.MaterialTable.default()


def flat_table(alpha):
    return ac.MaterialTable({"flat": [alpha] * 6})


# ---------------------------------------------------------------------------
# material table and room sampling
# ---------------------------------------------------------------------------

def test_material_table_loads(table):
    assert len(table.names) == 12
    for name in table.names:
        a = table.absorption(name)
        assert a.shape == (6,)
        assert np.all(a > 0) and np.all(a <= 1)


def test_material_table_rejects_bad_alpha():
    with pytest.raises(ValueError):
        ac.MaterialTable({"bad": [0.0, 0.1, 0.1, 0.1, 0.1, 0.1]})
    with pytest.raises(ValueError):
        ac.MaterialTable({"bad": [0.1] * 5})


def test_sample_room_single_material_table():
    rng = np.random.default_rng(0)
    room = ac.sample_room(rng, flat_table(0.3))
    assert room.materials == ("flat",) * 6


def test_sample_room_distribution(table):
    rng = np.random.default_rng(7)
    rooms = [ac.sample_room(rng, table, f"r{i}") for i in range(10_000)]
    vols = np.array([r.volume() for r in rooms])
    assert vols.min() >= 27.0 and vols.max() <= 500.0
    heights = np.array([r.height_m for r in rooms])
    assert abs(heights.mean() - 4.0) < 0.05
    lengths = np.array([r.length_m for r in rooms])
    assert lengths.min() >= 3.0 and lengths.max() <= 10.0


def test_place_endpoints_inner_box():
    rng = np.random.default_rng(1)
    room = ac.Room(3, 3, 3, ("flat",) * 6, "r")
    for _ in range(200):
        src, mic = ac.place_endpoints(room, rng)
        for p in (src, mic):
            assert np.all(p >= 0.5) and np.all(p <= 2.5)
        assert np.linalg.norm(src - mic) >= 0.5


def test_place_endpoints_no_boundary_violation():
    rng = np.random.default_rng(2)
    room = ac.Room(10, 10, 5, ("flat",) * 6, "r")
    worst = 0.0
    for _ in range(1000):
        src, mic = ac.place_endpoints(room, rng)
        for p in (src, mic):
            margin = min(p.min(), (room.dims - p).min())
            worst = max(worst, 0.5 - margin)
    assert worst == 0.0


# ---------------------------------------------------------------------------
# image source enumeration
# ---------------------------------------------------------------------------

def brute_force_images(room, src, max_order):
    """Oracle: BFS of explicit wall mirrorings; order of a position is the
    minimal number of reflections reaching it."""
    dims = room.dims
    start = tuple(np.round(src, 9))
    seen = {start: 0}
    frontier = [np.asarray(src, dtype=float)]
    for order in range(1, max_order + 1):
        nxt = []
        for p in frontier:
            for axis in range(3):
                for wall in (0.0, dims[axis]):
                    q = p.copy()
                    q[axis] = 2.0 * wall - p[axis]
                    key = tuple(np.round(q, 9))
                    if key not in seen:
                        seen[key] = order
                        nxt.append(q)
        frontier = nxt
    return seen


def test_image_sources_match_brute_force_oracle():
    room = ac.Room(6.1, 4.3, 3.2, ("flat",) * 6, "r")
    src = np.array([1.3, 2.1, 1.7])
    positions, _, orders = ac.image_sources(room, src, 3)
    got = {tuple(np.round(p, 9)): int(o) for p, o in zip(positions, orders)}
    want = brute_force_images(room, src, 3)
    assert len(positions) == len(got), "duplicate image positions"
    assert got == want


def test_first_order_image_across_x0():
    room = ac.Room(5, 4, 3, ("flat",) * 6, "r")
    src = np.array([1.2, 2.0, 1.5])
    positions, _, orders = ac.image_sources(room, src, 1)
    mirrored = positions[orders == 1]
    assert any(np.allclose(m, [-1.2, 2.0, 1.5]) for m in mirrored)


# ---------------------------------------------------------------------------
# RIR simulation
# ---------------------------------------------------------------------------

def test_free_field_single_impulse():
    room = ac.Room(6, 6, 4, ("open",) * 6, "r")
    tbl = ac.MaterialTable({"open": [1.0] * 6})
    src = np.array([1.0, 1.0, 1.0])
    mic = np.array([1.0 + 3.43, 1.0, 1.0])  # d = 3.43 m -> 160 samples
    rec = ac.simulate_rir(room, src, mic, tbl, ac.SimConfig(max_order=0))
    h = rec.samples.astype(np.float64)
    assert np.argmax(np.abs(h)) == 160
    off_peak = np.abs(np.delete(h, 160)).max()
    assert off_peak < 1e-9 * abs(h[160])


def test_simulated_records_satisfy_onset_invariant(table):
    rng = np.random.default_rng(11)
    for i in range(5):
        room = ac.sample_room(rng, table, f"r{i}")
        src, mic = ac.place_endpoints(room, rng)
        rec = ac.simulate_rir(room, src, mic, table, rir_id=f"h{i}")
        expected = round(FS * np.linalg.norm(src - mic) / ac.SPEED_OF_SOUND)
        assert abs(ac.detect_onset(rec.samples) - expected) <= 1
        assert 0 < rec.energy() < np.inf


def test_simulated_rt60_tracks_sabine():
    # near-cubic room and uncapped order keep pure specular ISM in the
    # regime where the statistical Sabine estimate applies
    room = ac.Room(4.0, 4.2, 4.4, ("flat",) * 6, "r")
    rng = np.random.default_rng(5)
    src, mic = ac.place_endpoints(room, rng)
    for alpha in (0.25, 0.4):
        tbl = flat_table(alpha)
        order = ac.required_order(room, tbl)
        rec = ac.simulate_rir(room, src, mic, tbl,
                              ac.SimConfig(max_order=order, order_cap=order))
        t_sab = ac.sabine_rt60(room, tbl)
        assert abs(rec.rt60_s - t_sab) / t_sab < 0.3


def test_order_cap_sets_warning_flag():
    room = ac.Room(6, 5, 3.5, ("flat",) * 6, "r")
    tbl = flat_table(0.1)  # needs order far beyond the default cap
    rng = np.random.default_rng(3)
    src, mic = ac.place_endpoints(room, rng)
    rec = ac.simulate_rir(room, src, mic, tbl)
    assert rec.rt60_warning


# ---------------------------------------------------------------------------
# energy decay curve and RT60
# ---------------------------------------------------------------------------

def test_edc_single_impulse_step():
    h = np.zeros(100)
    h[30] = 1.0
    edc = ac.schroeder_edc(h)
    assert np.all(edc[:31] == 0.0)
    assert np.all(np.isneginf(edc[31:]))


def test_edc_exponential_envelope_is_linear():
    T = 0.4
    n = int(FS * T)
    h = 10.0 ** (-3.0 * np.arange(n) / (FS * T))  # energy slope -60/(fs T)
    edc = ac.schroeder_edc(h)
    k = np.arange(n // 2)
    expected = -60.0 * k / (FS * T)
    # closed form holds up to the geometric-series truncation at the tail
    assert np.allclose(edc[: n // 2], expected, atol=0.05)


def test_edc_matches_naive_oracle():
    rng = np.random.default_rng(4)
    h = rng.standard_normal(500) * np.exp(-np.arange(500) / 150.0)
    edc = ac.schroeder_edc(h)
    total = sum(float(v) ** 2 for v in h)
    naive = np.array([
        10.0 * np.log10(sum(float(v) ** 2 for v in h[k:]) / total)
        for k in range(len(h))
    ])
    assert np.allclose(edc, naive, atol=1e-9)


def test_edc_monotone_nonincreasing():
    rng = np.random.default_rng(5)
    h = rng.standard_normal(2000) * np.exp(-np.arange(2000) / 400.0)
    edc = ac.schroeder_edc(h)
    finite = edc[np.isfinite(edc)]
    assert np.all(np.diff(finite) <= 1e-12)


def test_edc_zero_energy_errors():
    with pytest.raises(ValueError, match="zero energy"):
        ac.schroeder_edc(np.zeros(10))


def test_rt60_ideal_exponential():
    T = 0.5
    n = int(2 * FS * T)
    h = 10.0 ** (-3.0 * np.arange(n) / (FS * T))
    est = ac.estimate_rt60(ac.schroeder_edc(h), FS)
    assert abs(est - T) / T < 0.01


@pytest.mark.parametrize("T", [0.3, 0.6, 1.0])
def test_rt60_noisy_exponential(T):
    rng = np.random.default_rng(int(T * 10))
    n = int(1.5 * FS * T)
    h = rng.standard_normal(n) * 10.0 ** (-3.0 * np.arange(n) / (FS * T))
    est = ac.estimate_rt60(ac.schroeder_edc(h), FS)
    assert abs(est - T) / T < 0.05


def test_rt60_single_impulse_errors():
    h = np.zeros(100)
    h[3] = 1.0
    with pytest.raises(ValueError, match="insufficient decay"):
        ac.estimate_rt60(ac.schroeder_edc(h), FS)


def test_rt60_scale_invariant():
    rng = np.random.default_rng(6)
    n = FS
    h = rng.standard_normal(n) * 10.0 ** (-3.0 * np.arange(n) / (FS * 0.5))
    base = ac.estimate_rt60(ac.schroeder_edc(h), FS)
    for c in (0.001, -3.0, 1e4):
        assert ac.estimate_rt60(ac.schroeder_edc(c * h), FS) == pytest.approx(base)


# ---------------------------------------------------------------------------
# C50
# ---------------------------------------------------------------------------

def test_c50_two_equal_impulses():
    h = np.zeros(FS)
    h[0] = 1.0
    h[int(0.06 * FS)] = 1.0  # 60 ms: beyond the 50 ms split
    c50, clamped = ac.compute_c50(h, FS)
    assert c50 == pytest.approx(0.0, abs=1e-9)
    assert not clamped


def test_c50_half_amplitude_late_impulse():
    h = np.zeros(FS)
    h[0] = 1.0
    h[int(0.06 * FS)] = 0.5
    c50, clamped = ac.compute_c50(h, FS)
    assert c50 == pytest.approx(10.0 * np.log10(4.0), abs=1e-9)
    assert not clamped


def test_c50_single_impulse_clamps():
    h = np.zeros(1000)
    h[10] = 1.0
    c50, clamped = ac.compute_c50(h, FS)
    assert c50 == 100.0 and clamped


def test_c50_scale_and_shift_invariant():
    rng = np.random.default_rng(8)
    h = np.zeros(2 * FS)
    body = rng.standard_normal(FS) * 10.0 ** (-3.0 * np.arange(FS) / (FS * 0.4))
    h[100:100 + FS] = body
    base, _ = ac.compute_c50(h, FS)
    shifted = np.roll(h, 500)
    c_shift, _ = ac.compute_c50(shifted, FS)
    c_scale, _ = ac.compute_c50(-7.5 * h, FS)
    assert c_shift == pytest.approx(base, abs=1e-9)
    assert c_scale == pytest.approx(base, abs=1e-9)


def test_c50_zero_energy_errors():
    with pytest.raises(ValueError, match="zero energy"):
        ac.compute_c50(np.zeros(10), FS)


# ---------------------------------------------------------------------------
# Sabine
# ---------------------------------------------------------------------------

def test_sabine_formula_value():
    # V = 100, S = 130, mean alpha = 0.2 -> 0.161 * 100 / 26
    room = ac.Room(5.0, 5.0, 4.0, ("flat",) * 6, "r")
    tbl = flat_table(0.2)
    assert room.volume() == pytest.approx(100.0)
    assert room.surface_area() == pytest.approx(130.0)
    assert ac.sabine_rt60(room, tbl) == pytest.approx(0.161 * 100 / 26.0)


def test_sabine_monotone_in_absorption():
    room = ac.Room(5.0, 5.0, 4.0, ("flat",) * 6, "r")
    values = [ac.sabine_rt60(room, flat_table(a))
              for a in np.linspace(0.05, 0.95, 10)]
    assert np.all(np.diff(values) < 0)


def test_sabine_over_absorptive_errors():
    room = ac.Room(5.0, 5.0, 4.0, ("flat",) * 6, "r")
    with pytest.raises(ValueError, match="over-absorptive"):
        ac.sabine_rt60(room, flat_table(1.0))


# ---------------------------------------------------------------------------
# band filter bank
# ---------------------------------------------------------------------------

def test_band_bank_sums_to_unity():
    f = np.linspace(0, 8000, 4001)
    bank = ac.band_filter_bank(f)
    assert bank.shape == (6, len(f))
    assert np.all(bank >= -1e-12)
    assert np.allclose(bank.sum(axis=0), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# store round trip
# ---------------------------------------------------------------------------

def test_rir_store_roundtrip(tmp_path, table):
    rng = np.random.default_rng(9)
    rooms, records = {}, []
    for i in range(2):
        room = ac.sample_room(rng, table, f"room{i}")
        rooms[room.room_id] = room
        src, mic = ac.place_endpoints(room, rng)
        records.append(ac.simulate_rir(room, src, mic, table, rir_id=f"rir{i}"))
    manifest = ac.save_rir_store(records, rooms, tmp_path)

    lines = [json.loads(l) for l in open(manifest)]
    assert len(lines) == 2
    assert {"room_id", "rir_id", "dims", "materials", "source_pos", "mic_pos",
            "rt60_s", "c50_db", "volume_m3", "c50_clamped",
            "rt60_warning"} <= set(lines[0])

    loaded, loaded_rooms = ac.load_rir_store(tmp_path)
    for orig, back in zip(records, loaded):
        assert back.rir_id == orig.rir_id
        assert np.allclose(back.samples, orig.samples)
        assert back.rt60_s == pytest.approx(orig.rt60_s)
    assert set(loaded_rooms) == set(rooms)
