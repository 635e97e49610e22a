import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soilbench.dataset import Camera, Category, DatasetManifest, apply_split
from soilbench.errors import DataError, ManifestError, ValidationError
from soilbench.evaluation import (REGIMES, AnySoiling, PerClass, RegimeSettings, Ratio,
                                  confusion_4way, evaluate, hamming_error, image_tpr_fpr,
                                  mean_hamming, parse_cameras, read_norm_confusion, read_report,
                                  run_regime, tile_pr, write_report)
from soilbench.geometry import SoilingClass
from soilbench.nn import EncoderConfig, ModelConfig, TrainConfig
from soilbench.synth import SynthConfig, build_synthetic_dataset

import oracles

VECS = [(0, 0), (0, 1), (1, 0), (1, 1)]
vec = st.sampled_from(VECS)


# -- hamming -----------------------------------------------------------------------

@pytest.mark.parametrize("a,b,d", [((0, 0), (0, 0), 0), ((1, 0), (0, 1), 2), ((1, 1), (1, 0), 1)])
def test_hamming_examples(a, b, d):
    assert hamming_error(a, b) == d


def test_hamming_symmetric_and_triangle():
    for a, b, c in itertools.product(VECS, repeat=3):
        assert hamming_error(a, b) == hamming_error(b, a)
        assert hamming_error(a, c) <= hamming_error(a, b) + hamming_error(b, c)


def test_mean_hamming_examples():
    assert mean_hamming(VECS, VECS) == 0
    assert mean_hamming(VECS, [(1 - a, 1 - b) for a, b in VECS]) == 2
    assert mean_hamming([(0, 0), (1, 1)], [(0, 1), (1, 1)]) == 0.5


def test_mean_hamming_empty():
    with pytest.raises(ValidationError):
        mean_hamming(np.zeros((0, 2)), np.zeros((0, 2)))


def test_non_binary_vector_rejected():
    with pytest.raises(ValidationError):
        hamming_error((0, 2), (0, 0))


# -- confusion ---------------------------------------------------------------------

def test_perfect_predictions_give_identity():
    cm = confusion_4way(VECS * 3, VECS * 3)
    assert np.array_equal(cm.normalized, np.eye(4))


def test_single_clean_predicted_opaque():
    cm = confusion_4way([(1, 0)], [(0, 0)])
    want = np.zeros((4, 4), int)
    want[Category.CLEAN, Category.OPAQUE] = 1
    assert np.array_equal(cm.raw, want)
    assert cm.zero_rows.tolist() == [False, True, True, True]
    assert (cm.normalized[1:] == 0).all()


@settings(max_examples=30, deadline=None)
@given(pairs=st.lists(st.tuples(vec, vec), min_size=1, max_size=60))
def test_mean_hamming_zero_iff_diagonal(pairs):
    p, g = zip(*pairs)
    cm = confusion_4way(p, g)
    diagonal = (cm.raw == np.diag(np.diag(cm.raw))).all()
    assert (mean_hamming(p, g) == 0) == diagonal


@settings(max_examples=30, deadline=None)
@given(pairs=st.lists(st.tuples(vec, vec), min_size=1, max_size=60))
def test_confusion_matches_oracle(pairs):
    p, g = zip(*pairs)
    cm = confusion_4way(p, g)
    assert cm.raw.tolist() == oracles.confusion(p, g)
    assert cm.total == len(pairs)
    rows = cm.normalized.sum(axis=1)
    assert np.allclose(rows[~cm.zero_rows], 1.0, atol=1e-9)


# -- tile precision / recall ----------------------------------------------------------

def test_perfect_tiles():
    g = np.random.default_rng(0).integers(0, 2, (3, 2, 4, 4))
    c = tile_pr(g, g).per_camera["all"]
    assert c.precision.value == 1.0 and c.recall.value == 1.0


def test_all_positive_predictor():
    g = np.zeros((1, 2, 4, 4), int)
    g[0, 0, :2, :2] = 1  # 4 of 16 tiles
    c = tile_pr(np.ones_like(g), g).per_camera["all"]
    assert c.precision.value == 0.25 and c.recall.value == 1.0


def test_undefined_ratios_are_flagged():
    g = np.zeros((1, 2, 2, 2), int)
    c = tile_pr(g, g).per_camera["all"]
    assert c.precision.value is None and c.recall.value is None
    assert str(c.precision) == "undefined"
    assert Ratio(0, 5).value == 0.0


def test_per_class_positive():
    g = np.zeros((1, 2, 1, 2), int)
    g[0, 1, 0, 0] = 1           # transparent only in tile 0
    p = np.zeros_like(g)
    p[0, 0, 0, 1] = 1           # opaque only in tile 1
    any_c = tile_pr(p, g, positive=AnySoiling()).per_camera["all"]
    assert (any_c.tp, any_c.fp, any_c.fn, any_c.tn) == (0, 1, 1, 0)
    op = tile_pr(p, g, positive=PerClass(SoilingClass.OPAQUE)).per_camera["all"]
    assert (op.tp, op.fp, op.fn, op.tn) == (0, 1, 0, 1)


def test_per_camera_split_and_pool():
    r = np.random.default_rng(1)
    g = r.integers(0, 2, (6, 2, 2, 3))
    p = r.integers(0, 2, (6, 2, 2, 3))
    cams = [Camera.LEFT, Camera.FRONT, Camera.LEFT, Camera.REAR, Camera.FRONT, Camera.FRONT]
    rep = tile_pr(p, g, cams)
    assert list(rep.per_camera) == ["front", "rear", "left", "all"]
    pooled = tile_pr(p, g).per_camera["all"]
    assert rep.per_camera["all"] == pooled


def test_tile_shape_mismatch():
    with pytest.raises(ValidationError):
        tile_pr(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)))


# -- rates -----------------------------------------------------------------------------

def test_perfect_rates():
    r = image_tpr_fpr(VECS, VECS)
    assert r.tpr.value == 1.0 and r.fpr.value == 0.0


def test_all_positive_rates():
    r = image_tpr_fpr([(1, 1)] * 4, [(0, 0), (0, 0), (1, 0), (0, 1)])
    assert r.tpr.value == 1.0 and r.fpr.value == 1.0


def test_rates_undefined_without_negatives():
    r = image_tpr_fpr([(1, 0)], [(1, 0)])
    assert r.fpr.value is None


# -- oracle sweep over 1000 random pairs --------------------------------------------

def test_all_metrics_against_enumeration_oracles():
    rng = np.random.default_rng(1234)
    n = 1000
    p = rng.integers(0, 2, (n, 2))
    g = rng.integers(0, 2, (n, 2))
    assert mean_hamming(p, g) == sum(oracles.hamming(a, b) for a, b in zip(p, g)) / n
    assert confusion_4way(p, g).raw.tolist() == oracles.confusion(p.tolist(), g.tolist())
    r = image_tpr_fpr(p, g)
    assert (r.tp, r.fp, r.fn, r.tn) == oracles.pr_counts(p.any(1).tolist(), g.any(1).tolist())
    pg = rng.integers(0, 2, (n, 2, 2, 2))
    gg = rng.integers(0, 2, (n, 2, 2, 2))
    c = tile_pr(pg, gg).per_camera["all"]
    assert (c.tp, c.fp, c.fn, c.tn) == oracles.pr_counts(pg.max(1).ravel().tolist(),
                                                         gg.max(1).ravel().tolist())


# -- report bundle -----------------------------------------------------------------

def _report(seed=0, n=40, with_tiles=True):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(0, 2, (n, 2)), rng.integers(0, 2, (n, 2))
    g[:, 1] = 0  # leave the transparent and both rows empty
    tiles = (rng.integers(0, 2, (n, 2, 2, 3)), rng.integers(0, 2, (n, 2, 2, 3))) \
        if with_tiles else (None, None)
    cams = [list(Camera)[i % 4] for i in range(n)] if with_tiles else None
    return evaluate(p, g, *tiles, cameras=cams, info={"seed": str(seed), "regime": "3"})


@pytest.mark.parametrize("with_tiles", [True, False])
def test_report_round_trip(tmp_path, with_tiles):
    rep = _report(with_tiles=with_tiles)
    write_report(rep, tmp_path)
    expected = {"confusion_raw.csv", "confusion_norm.csv", "rates.csv", "summary.txt"}
    if with_tiles:
        expected.add("tile_pr.csv")
    assert {p.name for p in tmp_path.iterdir()} == expected
    back = read_report(tmp_path)
    assert back == rep
    norm, flags = read_norm_confusion(tmp_path)
    assert np.array_equal(norm, rep.confusion.normalized)
    assert flags.tolist() == rep.confusion.zero_rows.tolist()
    assert "no support" in (tmp_path / "summary.txt").read_text()


def test_report_missing_file(tmp_path):
    write_report(_report(), tmp_path)
    (tmp_path / "rates.csv").unlink()
    with pytest.raises(DataError, match="rates.csv"):
        read_report(tmp_path)


# -- regimes -----------------------------------------------------------------------

def test_regime_table():
    fr = (Camera.FRONT, Camera.REAR)
    assert REGIMES["1"] == (fr, fr)
    assert REGIMES["2"] == (fr, tuple(Camera))
    assert REGIMES["3"] == (tuple(Camera), tuple(Camera))


def test_parse_cameras():
    assert parse_cameras("all") == tuple(Camera)
    assert parse_cameras("rear, front") == (Camera.FRONT, Camera.REAR)
    with pytest.raises(ValidationError):
        parse_cameras("")
    with pytest.raises(ValidationError):
        parse_cameras("roof")


TINY_MODEL = ModelConfig(
    encoder=EncoderConfig(input_height=32, input_width=32, stem_channels=4, widths=(4, 6),
                          strides=(2, 2)),
    heads=("tile", "image"), soiling_hidden=4)


@pytest.fixture(scope="module")
def regime_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("regime")
    cfg = SynthConfig(seed=2, width=32, height=32, n_frames=40,
                      category_quotas={c: 10 for c in Category})
    return root, apply_split(build_synthetic_dataset(cfg, root), seed=0)


def test_run_regime_produces_full_bundle(regime_set, tmp_path):
    root, m = regime_set
    rep, model = run_regime(m, root, "front,rear", "all", TINY_MODEL,
                            TrainConfig(steps=3, batch_size=4), seed=1)
    assert rep.n_frames == len(m.select("test"))
    assert rep.info["train_cameras"] == "front,rear"
    assert set(rep.tile_pr.per_camera) == {"front", "rear", "left", "right", "all"}
    write_report(rep, tmp_path)
    assert read_report(tmp_path) == rep


def test_run_regime_is_deterministic(regime_set):
    root, m = regime_set
    a, _ = run_regime(m, root, "all", "all", TINY_MODEL, TrainConfig(steps=2, batch_size=4), 3)
    b, _ = run_regime(m, root, "all", "all", TINY_MODEL, TrainConfig(steps=2, batch_size=4), 3)
    assert a == b


def test_empty_test_filter_is_an_error(regime_set):
    root, m = regime_set
    front_only = DatasetManifest([r for r in m.records if r.camera == Camera.FRONT],
                                 {k: v for k, v in m.split_assignment.items()
                                  if k in {r.frame_id for r in m.records
                                           if r.camera == Camera.FRONT}})
    with pytest.raises(ManifestError, match="no test frames"):
        run_regime(front_only, root, "front", "left", TINY_MODEL, TrainConfig(steps=1))


def test_unsplit_manifest_is_an_error(regime_set):
    root, m = regime_set
    with pytest.raises(ManifestError, match="split"):
        run_regime(DatasetManifest(m.records), root, "all", "all", TINY_MODEL,
                   TrainConfig(steps=1))


def test_evaluation_needs_image_head(regime_set):
    from soilbench.evaluation import evaluate_model
    from soilbench.nn import SoilingNet
    import dataclasses
    root, m = regime_set
    model = SoilingNet(dataclasses.replace(TINY_MODEL, heads=("tile",)))
    with pytest.raises(ValidationError):
        evaluate_model(model, m.select("test"), root, RegimeSettings())
