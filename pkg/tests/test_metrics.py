import csv

import numpy as np
import pytest

from aenv.dataset import DatasetConfig, SyntheticCorpus, build_upstream
from aenv.metrics import (classification_metrics, compute_embeddings,
                          export_embeddings, regression_metrics,
                          room_silhouette)
from aenv.model import Encoder, EncoderConfig
from aenv.signal import n_frames
from test_dataset import fake_store


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# regression metrics
# ---------------------------------------------------------------------------

def test_regression_perfect(rng):
    t = rng.standard_normal(20)
    rep = regression_metrics(t, t)
    assert rep.rmse == 0.0 and rep.bias == 0.0
    assert rep.pearson_corr == pytest.approx(1.0)
    assert rep.n == 20


def test_regression_constant_offset(rng):
    t = rng.standard_normal(50)
    rep = regression_metrics(t + 0.1, t)
    assert rep.rmse == pytest.approx(0.1, rel=1e-9)
    assert rep.bias == pytest.approx(0.1, rel=1e-9)
    assert rep.pearson_corr == pytest.approx(1.0)


def test_regression_matches_loop_oracle(rng):
    e = rng.standard_normal(64)
    t = rng.standard_normal(64)
    rep = regression_metrics(e, t)
    rmse = np.sqrt(sum((a - b) ** 2 for a, b in zip(e, t)) / 64)
    bias = sum(a - b for a, b in zip(e, t)) / 64
    em, tm = e.mean(), t.mean()
    corr = (sum((a - em) * (b - tm) for a, b in zip(e, t))
            / np.sqrt(sum((a - em) ** 2 for a in e))
            / np.sqrt(sum((b - tm) ** 2 for b in t)))
    assert rep.rmse == pytest.approx(rmse, abs=1e-9)
    assert rep.bias == pytest.approx(bias, abs=1e-9)
    assert rep.pearson_corr == pytest.approx(corr, abs=1e-9)


def test_regression_bias_variance_identity(rng):
    e = rng.standard_normal(100)
    t = rng.standard_normal(100)
    rep = regression_metrics(e, t)
    assert rep.rmse ** 2 == pytest.approx(rep.bias ** 2 + np.var(e - t),
                                          abs=1e-9)


def test_regression_affine_invariant_corr(rng):
    e = rng.standard_normal(30)
    t = rng.standard_normal(30)
    base = regression_metrics(e, t).pearson_corr
    assert regression_metrics(3.0 * e + 7.0, t).pearson_corr == \
        pytest.approx(base, abs=1e-12)


def test_regression_zero_variance_sentinel():
    rep = regression_metrics(np.ones(5), np.arange(5.0))
    assert rep.pearson_corr is None and rep.corr_undefined
    assert np.isfinite(rep.rmse)


def test_regression_length_errors():
    with pytest.raises(ValueError, match="lengths"):
        regression_metrics([1.0], [1.0, 2.0])
    with pytest.raises(ValueError, match="lengths"):
        regression_metrics([], [])


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

def test_classification_perfect():
    rep = classification_metrics([0, 1, 0, 1], [0, 1, 0, 1])
    assert rep.accuracy == rep.precision == rep.recall == 1.0
    assert np.array_equal(rep.confusion, [[2, 0], [0, 2]])


def test_classification_all_one_on_balanced_truth():
    rep = classification_metrics([1, 1, 1, 1], [0, 0, 1, 1])
    assert rep.accuracy == 0.5
    # class 0 never predicted: its precision enters the macro average as 0
    assert rep.precision == pytest.approx(0.25)
    assert rep.undefined_precision_classes == [0]
    assert rep.recall == pytest.approx(0.5)  # (0 + 1) / 2


def test_classification_absent_truth_class_flagged():
    rep = classification_metrics([0, 1, 0], [0, 0, 0])
    assert rep.undefined_recall_classes == [1]
    assert rep.recall == pytest.approx(2 / 3)  # class 0 only


def test_classification_matches_confusion_oracle(rng):
    p = rng.integers(0, 2, 200)
    t = rng.integers(0, 2, 200)
    rep = classification_metrics(p, t)
    conf = np.zeros((2, 2), dtype=int)
    for a, b in zip(t, p):
        conf[a, b] += 1
    assert np.array_equal(rep.confusion, conf)
    assert rep.accuracy == pytest.approx((conf[0, 0] + conf[1, 1]) / 200)
    prec = np.mean([conf[c, c] / conf[:, c].sum() for c in (0, 1)])
    rec = np.mean([conf[c, c] / conf[c, :].sum() for c in (0, 1)])
    assert rep.precision == pytest.approx(prec)
    assert rep.recall == pytest.approx(rec)


def test_classification_permutation_invariance(rng):
    p = rng.integers(0, 2, 60)
    t = rng.integers(0, 2, 60)
    perm = rng.permutation(60)
    a = classification_metrics(p, t)
    b = classification_metrics(p[perm], t[perm])
    assert (a.accuracy, a.precision, a.recall) == (b.accuracy, b.precision,
                                                   b.recall)


def test_classification_errors():
    with pytest.raises(ValueError, match="out of range"):
        classification_metrics([0, 2], [0, 1])
    with pytest.raises(ValueError, match="lengths"):
        classification_metrics([0], [0, 1])


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_setup():
    store = fake_store(3, 2, seed=1, prefix="mroom")
    corpus = SyntheticCorpus(12, master_seed=7, segment_s=0.25)
    cfg = DatasetConfig(upstream_rooms=3, upstream_per_room=(4, 1, 1),
                        segment_s=0.25)
    manifest = build_upstream(store, corpus, cfg,
                              np.random.default_rng(0))["train"]
    enc_cfg = EncoderConfig(kernels=((1, 4), (2, 4)), strides=((1, 2), (2, 2)),
                            channels=2, embedding_dim=8,
                            in_freq=17, in_frames=n_frames(4000))
    encoder = Encoder(enc_cfg, np.random.default_rng(1))
    return encoder, manifest, store, corpus


def test_export_embeddings_csv(tiny_setup, tmp_path):
    encoder, manifest, store, corpus = tiny_setup
    path = export_embeddings(encoder, manifest, store, corpus,
                             tmp_path / "emb.csv")
    with open(path) as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    assert header[:6] == ["sample_id", "room_id", "rir_id", "rt60_s",
                          "c50_db", "volume_m3"]
    assert header[6:] == [f"e{i}" for i in range(8)]
    assert len(body) == len(manifest.entries)
    for row in body:
        vec = np.array([float(v) for v in row[6:]])
        assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-5)


def test_compute_embeddings_order_and_determinism(tiny_setup):
    encoder, manifest, store, corpus = tiny_setup
    a = compute_embeddings(encoder, manifest, store, corpus, batch_size=5)
    b = compute_embeddings(encoder, manifest, store, corpus, batch_size=3)
    assert a.shape == (len(manifest.entries), 8)
    assert np.allclose(a, b, atol=1e-6)


def test_room_silhouette_orders_cluster_quality(rng):
    centers = np.eye(3)
    tight = np.repeat(centers, 10, axis=0) + rng.standard_normal((30, 3)) * 0.01
    loose = np.repeat(centers, 10, axis=0) + rng.standard_normal((30, 3)) * 1.0
    labels = np.repeat(["a", "b", "c"], 10)
    assert room_silhouette(tight, labels) > room_silhouette(loose, labels)
    assert room_silhouette(tight, labels) > 0.9
