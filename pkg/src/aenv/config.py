"""Application configuration: one JSON document with per-module sections.

Unknown keys are rejected (typos should fail loudly, not silently fall back
to defaults) and the fully-defaulted effective config can be echoed into a
run directory for reproducibility.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .acoustics import SimConfig
from .dataset import DatasetConfig
from .model import EncoderConfig
from .signal import SAMPLE_RATE, n_frames
from .trainer import TrainConfig


@dataclass
class SignalSection:
    snr_db: float | None = None  # None disables noise augmentation


@dataclass
class PathsSection:
    rirs: str = "rirs"
    dataset: str = "dataset"
    runs: str = "runs"


_SECTIONS = {
    "acoustics": SimConfig,
    "signal": SignalSection,
    "dataset": DatasetConfig,
    "model": EncoderConfig,
    "train": TrainConfig,
    "paths": PathsSection,
}

# JSON lists arrive where the dataclasses expect tuples
_TUPLE_FIELDS = ("kernels", "strides", "upstream_per_room",
                 "downstream_sizes")


def _build_section(cls, payload: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown key(s) in config section {section!r}: "
                         f"{sorted(unknown)} (known: {sorted(known)})")
    kwargs = {}
    for key, value in payload.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v
                          for v in value)
        kwargs[key] = value
    return cls(**kwargs)


@dataclass
class AppConfig:
    seed: int = 0
    acoustics: SimConfig = field(default_factory=SimConfig)
    signal: SignalSection = field(default_factory=SignalSection)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "AppConfig":
        unknown = set(doc) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ValueError(f"unknown top-level config key(s): "
                             f"{sorted(unknown)}")
        kwargs = {}
        if "seed" in doc:
            if not isinstance(doc["seed"], int):
                raise ValueError("seed must be an integer")
            kwargs["seed"] = doc["seed"]
        for name, section_cls in _SECTIONS.items():
            if name in doc:
                if not isinstance(doc[name], dict):
                    raise ValueError(f"config section {name!r} must be an "
                                     f"object")
                kwargs[name] = _build_section(section_cls, doc[name], name)
        cfg = cls(**kwargs)
        # the train config inherits the master seed unless set explicitly
        if "train" not in doc or "master_seed" not in doc.get("train", {}):
            cfg.train.master_seed = cfg.seed
        return cfg

    @classmethod
    def load(cls, path=None) -> "AppConfig":
        if path is None:
            return cls.from_dict({})
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def apply_scale(self, scale: float | None,
                    segment_s: float | None = None) -> None:
        """Shrink dataset sizes for desk runs and sync the encoder's input
        frame count with the segment duration."""
        if scale is not None:
            self.dataset = DatasetConfig.scaled(scale, segment_s=segment_s)
        elif segment_s is not None:
            self.dataset.segment_s = segment_s
        self.model.in_frames = n_frames(
            int(round(self.dataset.segment_s * SAMPLE_RATE)))

    def effective_dict(self) -> dict:
        return {"seed": self.seed,
                **{name: asdict(getattr(self, name)) for name in _SECTIONS}}

    def echo(self, out_dir) -> Path:
        """Write the fully-defaulted config next to a run's outputs."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "effective-config.json"
        with open(path, "w") as f:
            json.dump(self.effective_dict(), f, indent=2)
        return path
