"""Upstream/downstream dataset construction and multiviewed batch sampling.

The upstream set drives contrastive training: 64 rooms with a small number
of RIRs each, paired with disjoint per-split source pools. The downstream
set (disjoint rooms, 100 x 10 RIRs) feeds the frozen-encoder label heads.
Batches come in three flavors: soft (per-view random sources), hard (one
source set shared across classes), and position-independent (classes are
rooms instead of RIRs).
"""

from __future__ import annotations

import json
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .acoustics import (MaterialTable, RirRecord, Room, SimConfig,
                        place_endpoints, sample_room, simulate_rir)
from .rng import named_stream
from .signal import (FeatureMatrix, SourceSegment, convolve, extract_features,
                     load_corpus_segment, synth_source)

VOLUME_BOUNDARY_M3 = 160.0
SPLITS = ("train", "val", "test")
STRATEGIES = ("soft", "hard", "pos_independent")
REDRAW_CAP = 100


def volume_class(volume_m3: float) -> int:
    """1 iff the volume exceeds the boundary; exactly on it counts as small."""
    return int(volume_m3 > VOLUME_BOUNDARY_M3)


# ---------------------------------------------------------------------------
# configuration (with a global scale knob for desk-size runs)
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    upstream_rooms: int = 64
    upstream_rirs_per_room: int = 2
    upstream_per_room: tuple[int, int, int] = (128, 32, 32)
    downstream_rooms: int = 100
    downstream_rirs_per_room: int = 10
    downstream_sizes: tuple[int, int, int] = (8192, 2048, 2048)
    segment_s: float = 4.0

    @classmethod
    def scaled(cls, scale: float, segment_s: float | None = None) -> "DatasetConfig":
        """Shrink every count so total dataset size goes roughly linearly
        with `scale` (room count and per-room pairings each shrink by
        sqrt(scale))."""
        if scale <= 0 or scale > 1:
            raise ValueError("scale must be in (0, 1]")
        root = np.sqrt(scale)

        def shrink(n, lo=1):
            return max(lo, int(round(n * root)))

        return cls(
            upstream_rooms=shrink(64, lo=2),
            upstream_per_room=tuple(shrink(n) for n in (128, 32, 32)),
            downstream_rooms=max(2, int(round(100 * scale))),
            downstream_sizes=tuple(max(4, int(round(n * scale)))
                                   for n in (8192, 2048, 2048)),
            segment_s=4.0 if segment_s is None else segment_s,
        )

    def upstream_totals(self) -> tuple[int, int, int]:
        return tuple(self.upstream_rooms * n for n in self.upstream_per_room)


# ---------------------------------------------------------------------------
# RIR store
# ---------------------------------------------------------------------------

@dataclass
class RirStore:
    """In-memory view over simulated RIRs with room/RIR lookups."""
    records: list[RirRecord]
    rooms: dict[str, Room]
    by_rir: dict[str, RirRecord] = field(init=False)
    by_room: dict[str, list[str]] = field(init=False)

    def __post_init__(self):
        self.by_rir = {}
        self.by_room = {}
        for rec in self.records:
            if rec.rir_id in self.by_rir:
                raise ValueError(f"duplicate rir_id {rec.rir_id}")
            self.by_rir[rec.rir_id] = rec
            self.by_room.setdefault(rec.room_id, []).append(rec.rir_id)

    @property
    def room_ids(self) -> list[str]:
        return list(self.by_room)

    def rir(self, rir_id: str) -> RirRecord:
        return self.by_rir[rir_id]

    def room(self, room_id: str) -> Room:
        return self.rooms[room_id]


def generate_rir_store(n_rooms: int, rirs_per_room: int, master_seed: int,
                       table: MaterialTable | None = None,
                       sim_config: SimConfig | None = None,
                       room_prefix: str = "room") -> RirStore:
    """Sample rooms and simulate `rirs_per_room` source/mic placements per
    room. Deterministic given the master seed; every room and placement
    draws from its own named stream."""
    table = table or MaterialTable.default()
    records, rooms = [], {}
    for r in range(n_rooms):
        room_id = f"{room_prefix}{r:04d}"
        room = sample_room(named_stream(master_seed, f"room:{room_id}"),
                           table, room_id)
        rooms[room_id] = room
        for k in range(rirs_per_room):
            rir_id = f"{room_id}-ir{k}"
            src, mic = place_endpoints(
                room, named_stream(master_seed, f"endpoints:{rir_id}"))
            records.append(simulate_rir(room, src, mic, table,
                                        sim_config, rir_id=rir_id))
    return RirStore(records, rooms)


# ---------------------------------------------------------------------------
# source corpora
# ---------------------------------------------------------------------------

class SyntheticCorpus:
    """Deterministic on-the-fly corpus of speech-like segments. Segment i is
    fully determined by (master_seed, its id), so nothing is stored."""

    def __init__(self, n_segments: int, master_seed: int = 0,
                 segment_s: float = 4.0, cache_size: int = 256):
        self.master_seed = master_seed
        self.segment_s = segment_s
        self.source_ids = [f"syn{i:05d}" for i in range(n_segments)]
        self._cache: OrderedDict[str, SourceSegment] = OrderedDict()
        self._cache_size = cache_size

    def segment(self, source_id: str) -> SourceSegment:
        hit = self._cache.get(source_id)
        if hit is not None:
            self._cache.move_to_end(source_id)
            return hit
        seg = synth_source(named_stream(self.master_seed, f"source:{source_id}"),
                           duration_s=self.segment_s, source_id=source_id)
        self._cache[source_id] = seg
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return seg


class WavCorpus:
    """Corpus backed by a directory of WAVs and a `segments.jsonl` index."""

    def __init__(self, corpus_dir, entries: list[dict]):
        self.corpus_dir = Path(corpus_dir)
        self.entries = {e["source_id"]: e for e in entries}
        self.source_ids = list(self.entries)

    def segment(self, source_id: str) -> SourceSegment:
        return load_corpus_segment(self.corpus_dir, self.entries[source_id])


def partition_sources(source_ids, sizes: tuple[int, int, int],
                      rng: np.random.Generator) -> dict[str, list[str]]:
    """Shuffle and split source ids into disjoint per-split pools sized
    proportionally to `sizes` (at least one id per split)."""
    ids = list(source_ids)
    if len(ids) < len(SPLITS):
        raise ValueError(f"insufficient corpus segments: need at least "
                         f"{len(SPLITS)} for disjoint splits, got {len(ids)}")
    order = [ids[i] for i in rng.permutation(len(ids))]
    total = sum(sizes)
    cuts = []
    used = 0
    for s in sizes[:-1]:
        n = max(1, int(round(len(ids) * s / total)))
        cuts.append((used, used + n))
        used += n
    if used >= len(ids):
        raise ValueError(f"insufficient corpus segments: {len(ids)} cannot "
                         f"cover proportions {sizes}")
    cuts.append((used, len(ids)))
    return {split: order[a:b] for split, (a, b) in zip(SPLITS, cuts)}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    sample_id: str
    rir_id: str
    room_id: str
    source_id: str
    rt60_s: float
    c50_db: float
    volume_m3: float
    volume_class: int


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry]
    source_pool: list[str]  # the split's disjoint source ids

    @property
    def room_ids(self) -> set[str]:
        return {e.room_id for e in self.entries}

    @property
    def rir_ids(self) -> set[str]:
        return {e.rir_id for e in self.entries}


def _entry(sample_id: str, rec: RirRecord, room: Room, source_id: str
           ) -> ManifestEntry:
    vol = room.volume()
    return ManifestEntry(sample_id, rec.rir_id, rec.room_id, source_id,
                         rec.rt60_s, rec.c50_db, vol, volume_class(vol))


def build_upstream(store: RirStore, corpus, config: DatasetConfig,
                   rng: np.random.Generator) -> dict[str, DatasetManifest]:
    """Per room, pair its RIRs with randomly drawn sources from the split's
    pool; 128/32/32 pairings per room at full scale."""
    room_ids = store.room_ids
    if len(room_ids) < config.upstream_rooms:
        raise ValueError(f"need {config.upstream_rooms} rooms, store has "
                         f"{len(room_ids)}")
    room_ids = room_ids[:config.upstream_rooms]
    pools = partition_sources(corpus.source_ids, config.upstream_per_room, rng)

    manifests = {}
    for split, per_room in zip(SPLITS, config.upstream_per_room):
        pool = pools[split]
        entries = []
        for room_id in room_ids:
            rir_ids = store.by_room[room_id]
            for j in range(per_room):
                rec = store.rir(rir_ids[rng.integers(len(rir_ids))])
                source_id = pool[rng.integers(len(pool))]
                entries.append(_entry(f"up-{split}-{len(entries):06d}", rec,
                                      store.room(room_id), source_id))
        manifests[split] = DatasetManifest(split, entries, pool)
    return manifests


def build_downstream(store: RirStore, corpus, config: DatasetConfig,
                     rng: np.random.Generator,
                     upstream_room_ids: set[str] | None = None
                     ) -> dict[str, DatasetManifest]:
    """Uniformly random RIR per entry from the downstream pool; rooms must
    not overlap the upstream set."""
    if upstream_room_ids:
        overlap = set(store.room_ids) & set(upstream_room_ids)
        if overlap:
            raise ValueError(f"downstream rooms overlap upstream: "
                             f"{sorted(overlap)[:5]}")
    pool_rirs = [rid for room_id in store.room_ids[:config.downstream_rooms]
                 for rid in store.by_room[room_id]]
    if len(store.room_ids) < config.downstream_rooms:
        raise ValueError(f"need {config.downstream_rooms} rooms, store has "
                         f"{len(store.room_ids)}")
    pools = partition_sources(corpus.source_ids, config.downstream_sizes, rng)

    manifests = {}
    for split, size in zip(SPLITS, config.downstream_sizes):
        pool = pools[split]
        entries = []
        for j in range(size):
            rec = store.rir(pool_rirs[rng.integers(len(pool_rirs))])
            source_id = pool[rng.integers(len(pool))]
            entries.append(_entry(f"down-{split}-{j:06d}", rec,
                                  store.room(rec.room_id), source_id))
        manifests[split] = DatasetManifest(split, entries, pool)
    return manifests


def save_manifests(out_dir, manifests: dict[str, DatasetManifest],
                   meta: dict | None = None) -> Path:
    """One JSONL of all entries (tagged with their split) plus `meta.json`
    holding the per-split source pools and any build metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.jsonl", "w") as f:
        for split in SPLITS:
            for e in manifests[split].entries:
                f.write(json.dumps({"split": split, **asdict(e)}) + "\n")
    payload = {"source_pools": {s: manifests[s].source_pool for s in SPLITS}}
    payload.update(meta or {})
    with open(out_dir / "meta.json", "w") as f:
        json.dump(payload, f, indent=2)
    return out_dir


def load_manifests(in_dir) -> tuple[dict[str, DatasetManifest], dict]:
    in_dir = Path(in_dir)
    with open(in_dir / "meta.json") as f:
        meta = json.load(f)
    per_split: dict[str, list[ManifestEntry]] = {s: [] for s in SPLITS}
    with open(in_dir / "manifest.jsonl") as f:
        for line in f:
            row = json.loads(line)
            split = row.pop("split")
            per_split[split].append(ManifestEntry(**row))
    manifests = {s: DatasetManifest(s, per_split[s],
                                    meta["source_pools"][s])
                 for s in SPLITS}
    return manifests, meta


# ---------------------------------------------------------------------------
# multiviewed batches
# ---------------------------------------------------------------------------

@dataclass
class MultiviewBatch:
    features: list[FeatureMatrix]  # N*M items, grouped by class
    class_labels: np.ndarray  # N*M ints, each value appearing M times
    strategy: str
    n_classes: int
    views: int
    rir_ids: list[str]
    room_ids: list[str]
    source_ids: list[str]

    def feature_array(self, dtype=np.float32) -> np.ndarray:
        """(N*M, 1, freq, frames) stack for the encoder."""
        return np.stack([f.values for f in self.features])[:, None].astype(dtype)


def _draw_distinct_sources(pool, m, rng) -> list[str]:
    picked: list[str] = []
    attempts = 0
    while len(picked) < m:
        cand = pool[rng.integers(len(pool))]
        if cand in picked:
            attempts += 1
            if attempts > REDRAW_CAP:
                raise ValueError(f"could not draw {m} distinct sources from "
                                 f"a pool of {len(pool)} in {REDRAW_CAP} "
                                 f"re-draws")
            continue
        picked.append(cand)
    return picked


def _materialize(store: RirStore, corpus, rir_id: str, source_id: str,
                 cache: dict | None) -> FeatureMatrix:
    key = (rir_id, source_id)
    if cache is not None and key in cache:
        return cache[key]
    y = convolve(corpus.segment(source_id), store.rir(rir_id))
    f = extract_features(y.samples)
    if cache is not None:
        cache[key] = f
    return f


def sample_batch(manifest: DatasetManifest, store: RirStore, corpus,
                 strategy: str, n_classes: int, views: int,
                 rng: np.random.Generator,
                 cache: dict | None = None) -> MultiviewBatch:
    """Construct one multiviewed batch of N classes x M views.

    soft: classes are RIRs, every view draws its own source.
    hard: classes are RIRs, one set of M sources shared by all classes.
    pos_independent: classes are rooms, each view picks a random RIR of its
    room plus its own source.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; "
                         f"expected one of {STRATEGIES}")
    pool = manifest.source_pool

    if strategy == "pos_independent":
        classes = sorted(manifest.room_ids)
        if any(len(store.by_room[r]) < 2 for r in classes):
            warnings.warn("position-independent sampling with a single RIR "
                          "per room degenerates to soft sampling")
    else:
        classes = sorted(manifest.rir_ids)
    if n_classes > len(classes):
        raise ValueError(f"batch needs {n_classes} classes but only "
                         f"{len(classes)} are available")
    chosen = [classes[i] for i in rng.choice(len(classes), size=n_classes,
                                             replace=False)]

    shared_sources = (_draw_distinct_sources(pool, views, rng)
                      if strategy == "hard" else None)

    features, labels = [], []
    rir_ids, room_ids, source_ids = [], [], []
    for label, cls in enumerate(chosen):
        sources = (shared_sources if shared_sources is not None
                   else _draw_distinct_sources(pool, views, rng))
        for source_id in sources:
            if strategy == "pos_independent":
                room_rirs = store.by_room[cls]
                rir_id = room_rirs[rng.integers(len(room_rirs))]
            else:
                rir_id = cls
            features.append(_materialize(store, corpus, rir_id, source_id,
                                         cache))
            labels.append(label)
            rir_ids.append(rir_id)
            room_ids.append(store.rir(rir_id).room_id)
            source_ids.append(source_id)

    return MultiviewBatch(features=features,
                          class_labels=np.array(labels),
                          strategy=strategy, n_classes=n_classes, views=views,
                          rir_ids=rir_ids, room_ids=room_ids,
                          source_ids=source_ids)
