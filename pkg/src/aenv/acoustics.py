"""Shoebox room sampling, image-source RIR simulation, and ground-truth
acoustic parameters (RT60 via the Schroeder energy decay curve, C50).

All randomness comes in through explicit numpy Generators; every function
here is pure given its inputs, so RIR generation parallelizes trivially.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy.io import wavfile

SPEED_OF_SOUND = 343.0  # m/s
SAMPLE_RATE = 16000
OCTAVE_BANDS_HZ = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0)
MIN_CLEARANCE_M = 0.5  # endpoint distance to boundaries and to each other

# room dimension ranges (uniform sampling)
LENGTH_RANGE = (3.0, 10.0)
WIDTH_RANGE = (3.0, 10.0)
HEIGHT_RANGE = (3.0, 5.0)

# fractional-delay interpolation: 81-tap Hann-windowed sinc
_SINC_HALF = 40
_PAD = _SINC_HALF + 1

# surfaces are ordered x=0, x=L, y=0, y=W, z=0 (floor), z=H (ceiling)
SURFACE_NAMES = ("x0", "x1", "y0", "y1", "z0", "z1")


class MaterialTable:
    """Named boundary materials with per-octave-band absorption."""

    def __init__(self, materials: dict[str, np.ndarray], bands_hz=OCTAVE_BANDS_HZ,
                 version: int = 0):
        self.bands_hz = tuple(float(b) for b in bands_hz)
        self.version = version
        self.materials = {}
        for name, alphas in materials.items():
            a = np.asarray(alphas, dtype=float)
            if a.shape != (len(self.bands_hz),):
                raise ValueError(f"material {name!r}: expected "
                                 f"{len(self.bands_hz)} band coefficients, got {a.shape}")
            if np.any(a <= 0.0) or np.any(a > 1.0):
                raise ValueError(f"material {name!r}: absorption must be in (0, 1]")
            self.materials[name] = a

    @property
    def names(self) -> list[str]:
        return list(self.materials.keys())

    def absorption(self, name: str) -> np.ndarray:
        if name not in self.materials:
            raise KeyError(f"unknown material {name!r}")
        return self.materials[name]

    @classmethod
    def from_json(cls, path) -> "MaterialTable":
        with open(path) as f:
            doc = json.load(f)
        return cls(doc["materials"], doc["bands_hz"], doc.get("version", 0))

    @classmethod
    def default(cls) -> "MaterialTable":
        with resources.files("aenv").joinpath("materials.json").open() as f:
            doc = json.load(f)
        return cls(doc["materials"], doc["bands_hz"], doc.get("version", 0))


@dataclass
class Room:
    length_m: float
    width_m: float
    height_m: float
    materials: tuple[str, ...]  # six, ordered as SURFACE_NAMES
    room_id: str

    def __post_init__(self):
        if not (self.length_m > 0 and self.width_m > 0 and self.height_m > 0):
            raise ValueError("room dimensions must be positive")
        if len(self.materials) != 6:
            raise ValueError("a room needs exactly six boundary materials")
        self.materials = tuple(self.materials)

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length_m, self.width_m, self.height_m])

    def volume(self) -> float:
        return self.length_m * self.width_m * self.height_m

    def surface_area(self) -> float:
        L, W, H = self.length_m, self.width_m, self.height_m
        return 2.0 * (L * W + L * H + W * H)

    def surface_areas(self) -> np.ndarray:
        """Area of each of the six surfaces, ordered as SURFACE_NAMES."""
        L, W, H = self.length_m, self.width_m, self.height_m
        return np.array([W * H, W * H, L * H, L * H, L * W, L * W])

    def absorption_matrix(self, table: MaterialTable) -> np.ndarray:
        """(6 surfaces, 6 bands) absorption coefficients."""
        return np.stack([table.absorption(m) for m in self.materials])


@dataclass
class RirRecord:
    samples: np.ndarray
    sample_rate_hz: int
    room_id: str
    rir_id: str
    source_pos: np.ndarray
    mic_pos: np.ndarray
    rt60_s: float
    c50_db: float
    c50_clamped: bool = False
    rt60_warning: bool = False

    def energy(self) -> float:
        return float(np.sum(np.asarray(self.samples, dtype=np.float64) ** 2))


@dataclass
class SimConfig:
    sample_rate_hz: int = SAMPLE_RATE
    max_order: int | None = None  # None -> auto from Sabine estimate
    order_cap: int = 40
    # image contributions below this amplitude relative to the direct
    # sound are dropped (-100 dB in energy)
    prune_rel_amp: float = 1e-5


def sample_room(rng: np.random.Generator, table: MaterialTable,
                room_id: str = "room0") -> Room:
    """Draw a shoebox room with uniform dimensions and uniformly random
    surface materials."""
    length = rng.uniform(*LENGTH_RANGE)
    width = rng.uniform(*WIDTH_RANGE)
    height = rng.uniform(*HEIGHT_RANGE)
    names = table.names
    materials = tuple(names[i] for i in rng.integers(0, len(names), size=6))
    return Room(length, width, height, materials, room_id)


def place_endpoints(room: Room, rng: np.random.Generator,
                    clearance: float = MIN_CLEARANCE_M) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample a source and a mic, both at least `clearance` from
    every boundary and from each other."""
    lo = np.full(3, clearance)
    hi = room.dims - clearance
    assert np.all(hi > lo), "room too small to host endpoints"
    for _ in range(1000):
        source = rng.uniform(lo, hi)
        mic = rng.uniform(lo, hi)
        if np.linalg.norm(source - mic) >= clearance:
            return source, mic
    raise AssertionError("endpoint rejection sampling failed")  # pragma: no cover


def image_sources(room: Room, source_pos: np.ndarray, max_order: int):
    """Enumerate image sources up to the given total reflection order.

    Returns (positions (K,3), wall_counts (K,6), orders (K,)) where
    wall_counts follows SURFACE_NAMES ordering.
    """
    src = np.asarray(source_pos, dtype=float)
    dims = room.dims
    per_axis = []
    for a in range(3):
        rows = []
        half = max_order // 2 + 1
        for n in range(-half, half + 1):
            for q in (0, 1):
                c0 = abs(n - q)
                c1 = abs(n)
                if c0 + c1 <= max_order:
                    rows.append((2.0 * n * dims[a] + (1 - 2 * q) * src[a], c0, c1))
        per_axis.append(np.array(rows, dtype=float))

    ax, ay, az = per_axis
    rx = (ax[:, 1] + ax[:, 2])[:, None, None]
    ry = (ay[:, 1] + ay[:, 2])[None, :, None]
    rz = (az[:, 1] + az[:, 2])[None, None, :]
    total = rx + ry + rz
    ix, iy, iz = np.nonzero(total <= max_order)

    positions = np.stack([ax[ix, 0], ay[iy, 0], az[iz, 0]], axis=1)
    wall_counts = np.stack([
        ax[ix, 1], ax[ix, 2],
        ay[iy, 1], ay[iy, 2],
        az[iz, 1], az[iz, 2],
    ], axis=1).astype(int)
    orders = wall_counts.sum(axis=1)
    return positions, wall_counts, orders


def band_filter_bank(freqs_hz: np.ndarray, bands_hz=OCTAVE_BANDS_HZ) -> np.ndarray:
    """Amplitude-complementary zero-phase band magnitudes, one per octave
    band. Crossovers sit at the geometric band edges with 4th-order
    Butterworth-style slopes; the bank sums to exactly 1 at every
    frequency, so spectrally flat content passes unchanged."""
    f = np.asarray(freqs_hz, dtype=float)
    centers = np.asarray(bands_hz, dtype=float)
    edges = np.sqrt(centers[:-1] * centers[1:])  # crossover frequencies

    def lowpass_mag(fc):
        return 1.0 / np.sqrt(1.0 + (f / fc) ** 8)

    mags = []
    prev = np.zeros_like(f)  # cumulative low-pass below the band
    for fc in edges:
        lp = lowpass_mag(fc)
        mags.append(lp - prev)
        prev = lp
    mags.append(1.0 - prev)  # top band extends to Nyquist
    return np.stack(mags)


def required_order(room: Room, table: MaterialTable) -> int:
    """Reflection order so the modeled decay reaches roughly -60 dB:
    bounce count to cover c * T_sabine meters of path, with margin."""
    try:
        t_sab = sabine_rt60(room, table)
    except ValueError:
        return 2  # fully absorptive boundaries: direct field dominates
    min_dim = float(np.min(room.dims))
    return int(np.ceil(SPEED_OF_SOUND * t_sab / min_dim)) + 2


def default_max_order(room: Room, table: MaterialTable, cap: int = 40) -> int:
    return min(required_order(room, table), cap)


def _fractional_impulse_taps(delays: np.ndarray):
    """Windowed-sinc taps for each fractional delay.

    Returns (indices (K,81), taps (K,81)); indices are offset by _PAD so
    they are always non-negative."""
    base = np.floor(delays).astype(int)
    offs = np.arange(-_SINC_HALF, _SINC_HALF + 1)
    idx = base[:, None] + offs[None, :] + _PAD
    t = (idx - _PAD) - delays[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * t / (_SINC_HALF + 1)))
    window = np.maximum(window, 0.0)
    return idx, np.sinc(t) * window


def simulate_rir(room: Room, source_pos, mic_pos, table: MaterialTable,
                 config: SimConfig | None = None, rir_id: str = "rir0") -> RirRecord:
    """Six-band image-source simulation under frequency-dependent
    absorption. Per band, the impulse train of all image sources (with
    sqrt(1-alpha) reflection loss per bounce and 1/r spreading) is placed
    with windowed-sinc fractional delays, band-filtered with a zero-phase
    complementary bank, and summed."""
    config = config or SimConfig()
    fs = config.sample_rate_hz
    src = np.asarray(source_pos, dtype=float)
    mic = np.asarray(mic_pos, dtype=float)

    order = config.max_order
    if order is None:
        order = default_max_order(room, table, config.order_cap)

    positions, wall_counts, _ = image_sources(room, src, order)
    dists = np.linalg.norm(positions - mic[None, :], axis=1)
    dists = np.maximum(dists, 1e-2)

    alphas = room.absorption_matrix(table)  # (6 surfaces, 6 bands)
    betas = np.sqrt(np.clip(1.0 - alphas, 0.0, 1.0))
    n_bands = alphas.shape[1]

    # per-band reflection amplitude of every image: product over surfaces
    amps = np.ones((positions.shape[0], n_bands))
    for w in range(6):
        amps *= betas[w][None, :] ** wall_counts[:, w, None]
    amps /= dists[:, None]

    # drop contributions far below the direct sound
    direct_amp = 1.0 / float(np.min(dists))
    keep = amps.max(axis=1) >= config.prune_rel_amp * direct_amp
    amps, dists = amps[keep], dists[keep]

    delays = fs * dists / SPEED_OF_SOUND
    n_time = int(np.ceil(delays.max())) + 2 * _SINC_HALF + 2
    trains = np.zeros((n_bands, n_time + _PAD))
    for lo in range(0, len(delays), 100_000):  # chunked to bound memory
        sl = slice(lo, lo + 100_000)
        idx, taps = _fractional_impulse_taps(delays[sl])
        flat_idx = idx.ravel()
        for b in range(n_bands):
            vals = amps[sl, b][:, None] * taps
            trains[b] += np.bincount(flat_idx, weights=vals.ravel(),
                                     minlength=n_time + _PAD)[:n_time + _PAD]

    nfft = sfft.next_fast_len(n_time + _PAD + 256)
    bank = band_filter_bank(np.fft.rfftfreq(nfft, 1.0 / fs), table.bands_hz)
    spec = sfft.rfft(trains, nfft, axis=1)
    h = sfft.irfft((spec * bank).sum(axis=0), nfft)[_PAD:_PAD + n_time]

    edc = schroeder_edc(h)
    rt60_warning = required_order(room, table) > order

    # with a capped order the late field is clipped and the EDC tail falls
    # off too steeply; only fit the span arriving before the clipping sets in
    t_valid = int(max(2, order - 2) * float(np.min(room.dims)) / SPEED_OF_SOUND * fs)
    edc_fit = edc[:t_valid] if t_valid < len(edc) else edc
    finite_min = float(np.min(edc_fit[np.isfinite(edc_fit)]))
    try:
        rt60 = estimate_rt60(edc_fit, fs)
    except ValueError:
        # decay never reached -25 dB in the trusted span; fall back to
        # whatever span exists and flag the record
        try:
            rt60 = _fit_rt60_span(edc_fit, fs, -5.0, max(finite_min + 3.0, -20.0))
        except ValueError:
            rt60 = float("nan")  # no usable decay at all (e.g. free field)
        rt60_warning = True
    c50, clamped = compute_c50(h, fs)

    return RirRecord(
        samples=h.astype(np.float32), sample_rate_hz=fs, room_id=room.room_id,
        rir_id=rir_id, source_pos=src, mic_pos=mic, rt60_s=rt60, c50_db=c50,
        c50_clamped=clamped, rt60_warning=rt60_warning,
    )


def schroeder_edc(h: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay curve in dB; EDC[0] = 0."""
    e = np.asarray(h, dtype=np.float64) ** 2
    total = e.sum()
    if total <= 0.0:
        raise ValueError("zero energy impulse response")
    tail = np.cumsum(e[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(tail / total)


def _fit_rt60_span(edc: np.ndarray, fs: float, top_db: float, bot_db: float) -> float:
    idx_top = np.argmax(edc <= top_db)
    idx_bot = np.argmax(edc <= bot_db)
    if edc[idx_bot] > bot_db or idx_bot <= idx_top:
        raise ValueError("insufficient decay for RT60 fit")
    span = slice(idx_top, idx_bot + 1)
    x = np.arange(len(edc))[span]
    slope, _ = np.polyfit(x, edc[span], 1)
    if slope >= 0:
        raise ValueError("insufficient decay for RT60 fit")
    return float(-60.0 / slope / fs)


def estimate_rt60(edc: np.ndarray, fs: float = SAMPLE_RATE) -> float:
    """T20 extrapolation: least-squares line through the [-5, -25] dB span
    of the decay curve, scaled to the 60 dB decay time."""
    return _fit_rt60_span(np.asarray(edc, dtype=float), fs, -5.0, -25.0)


def detect_onset(h: np.ndarray) -> int:
    """Direct-sound onset: first sample within 20 dB of the peak, snapped
    to the strongest sample in the following few (absorbs interpolation
    and band-filter ripple)."""
    mag = np.abs(np.asarray(h, dtype=np.float64))
    peak = mag.max()
    if peak <= 0.0:
        raise ValueError("zero energy impulse response")
    first = int(np.argmax(mag >= 0.1 * peak))
    window = mag[first:first + 9]
    return first + int(np.argmax(window))


def compute_c50(h: np.ndarray, fs: float = SAMPLE_RATE) -> tuple[float, bool]:
    """Early-to-late energy ratio in dB with the split 50 ms after the
    detected direct-sound onset. Clamped to +/-100 dB (flag returned)."""
    e = np.asarray(h, dtype=np.float64) ** 2
    if e.sum() <= 0.0:
        raise ValueError("zero energy impulse response")
    t0 = detect_onset(h)
    split = t0 + int(round(0.05 * fs))
    early = e[:split].sum()
    late = e[split:].sum()
    if late <= 0.0:
        return 100.0, True
    if early <= 0.0:
        return -100.0, True
    c50 = 10.0 * np.log10(early / late)
    if c50 > 100.0:
        return 100.0, True
    if c50 < -100.0:
        return -100.0, True
    return float(c50), False


def sabine_rt60(room: Room, table: MaterialTable) -> float:
    """Statistical reverberation time 0.161 V / (S * mean alpha); used as
    a cross-check oracle for the simulator, never as training truth."""
    alphas = room.absorption_matrix(table).mean(axis=1)  # band-mean per surface
    areas = room.surface_areas()
    s_total = areas.sum()
    a_bar = float(np.dot(areas, alphas) / s_total)
    if a_bar >= 0.999:
        raise ValueError("over-absorptive room, Sabine formula invalid")
    return 0.161 * room.volume() / (s_total * a_bar)


# ---------------------------------------------------------------------------
# RIR store: float32 WAVs plus a JSONL manifest
# ---------------------------------------------------------------------------

def rir_wav_name(room_id: str, rir_id: str) -> str:
    return f"{room_id}_{rir_id}.wav"


def save_rir_store(records: list[RirRecord], rooms: dict[str, Room],
                   out_dir) -> Path:
    """Write one float32 mono WAV per RIR plus `rirs.jsonl`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "rirs.jsonl"
    with open(manifest_path, "w") as f:
        for rec in records:
            room = rooms[rec.room_id]
            wavfile.write(out_dir / rir_wav_name(rec.room_id, rec.rir_id),
                          rec.sample_rate_hz, np.asarray(rec.samples, dtype=np.float32))
            f.write(json.dumps({
                "room_id": rec.room_id,
                "rir_id": rec.rir_id,
                "dims": [room.length_m, room.width_m, room.height_m],
                "materials": list(room.materials),
                "source_pos": [float(v) for v in rec.source_pos],
                "mic_pos": [float(v) for v in rec.mic_pos],
                "rt60_s": rec.rt60_s,
                "c50_db": rec.c50_db,
                "volume_m3": room.volume(),
                "c50_clamped": rec.c50_clamped,
                "rt60_warning": rec.rt60_warning,
            }) + "\n")
    return manifest_path


def load_rir_store(store_dir) -> tuple[list[RirRecord], dict[str, Room]]:
    """Read back a store written by save_rir_store."""
    store_dir = Path(store_dir)
    records, rooms = [], {}
    with open(store_dir / "rirs.jsonl") as f:
        for line in f:
            meta = json.loads(line)
            fs, samples = wavfile.read(
                store_dir / rir_wav_name(meta["room_id"], meta["rir_id"]))
            if meta["room_id"] not in rooms:
                rooms[meta["room_id"]] = Room(
                    *meta["dims"], tuple(meta["materials"]), meta["room_id"])
            records.append(RirRecord(
                samples=np.asarray(samples, dtype=np.float32),
                sample_rate_hz=int(fs),
                room_id=meta["room_id"], rir_id=meta["rir_id"],
                source_pos=np.array(meta["source_pos"]),
                mic_pos=np.array(meta["mic_pos"]),
                rt60_s=meta["rt60_s"], c50_db=meta["c50_db"],
                c50_clamped=meta.get("c50_clamped", False),
                rt60_warning=meta.get("rt60_warning", False),
            ))
    return records, rooms
