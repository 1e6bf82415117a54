import json

import pytest

from aenv.config import AppConfig
from aenv.signal import n_frames


def test_defaults_match_full_scale():
    cfg = AppConfig.from_dict({})
    assert cfg.seed == 0
    assert cfg.train.n_classes == 24 and cfg.train.views == 3
    assert cfg.train.batches_per_epoch == 128 and cfg.train.patience == 4
    assert cfg.dataset.upstream_totals() == (8192, 2048, 2048)
    assert cfg.model.embedding_dim == 64
    assert cfg.model.in_frames == 3999


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="top-level"):
        AppConfig.from_dict({"trian": {}})
    with pytest.raises(ValueError, match="section 'train'"):
        AppConfig.from_dict({"train": {"learning_rate": 1e-3}})
    with pytest.raises(ValueError, match="seed"):
        AppConfig.from_dict({"seed": "zero"})


def test_section_overrides_and_tuple_coercion():
    cfg = AppConfig.from_dict({
        "seed": 7,
        "model": {"kernels": [[1, 4], [2, 4]], "strides": [[1, 2], [2, 2]],
                  "channels": 2},
        "train": {"tau": 0.5},
    })
    assert cfg.model.kernels == ((1, 4), (2, 4))
    assert cfg.model.channels == 2
    assert cfg.train.tau == 0.5
    assert cfg.train.master_seed == 7  # inherited from the top-level seed


def test_apply_scale_syncs_frame_count():
    cfg = AppConfig.from_dict({})
    cfg.apply_scale(0.05, segment_s=1.0)
    assert cfg.model.in_frames == n_frames(16000)
    assert cfg.dataset.segment_s == 1.0
    assert cfg.dataset.upstream_rooms < 64


def test_effective_echo_roundtrip(tmp_path):
    cfg = AppConfig.from_dict({"seed": 3, "train": {"tau": 0.1}})
    path = cfg.echo(tmp_path)
    with open(path) as f:
        doc = json.load(f)
    # the echo is itself a loadable config describing the same settings
    again = AppConfig.from_dict(doc)
    assert again.seed == 3
    assert again.train.tau == 0.1
    assert again.effective_dict() == cfg.effective_dict()


def test_load_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 11, "signal": {"snr_db": 20.0}}))
    cfg = AppConfig.load(path)
    assert cfg.seed == 11
    assert cfg.signal.snr_db == 20.0
    assert AppConfig.load(None).seed == 0
