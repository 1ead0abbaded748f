import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _synth import noise_image, write_sequence
from xrcmatch.evaluation import (
    DatasetError,
    EvalReport,
    Homography,
    PointAtInfinityError,
    aggregate,
    apply_homography,
    bias_count,
    bias_histogram,
    category_of,
    curve_area,
    evaluate_pairs,
    find_sequences,
    load_pairs,
    load_sequence,
    mma,
    mma_csv,
    read_ratios,
    resolution_sweep,
    summarize,
)
from xrcmatch.imgio import ResizeSpec
from xrcmatch.matcher import PipelineConfig

T = tuple(range(1, 11))


def test_homography_examples():
    assert apply_homography(Homography.identity(), (5, 7)) == (5, 7)
    h = Homography(np.array([[1, 0, 3], [0, 1, -2], [0, 0, 1]], dtype=float))
    assert apply_homography(h, (0, 0)) == (3, -2)
    assert apply_homography(Homography(np.diag([2.0, 2.0, 1.0])), (4, 5)) == (8, 10)


def test_homography_normalised_and_checked():
    h = Homography(np.diag([4.0, 4.0, 2.0]))
    assert h.matrix[2, 2] == 1.0 and h.matrix[0, 0] == 2.0
    with pytest.raises(ValueError):
        Homography(np.zeros((3, 3)))
    with pytest.raises(PointAtInfinityError):
        Homography(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 1]], dtype=float)).apply(np.array([[-1.0, 0.0]]))


def _pairs(src, tgt):
    return np.hstack([np.asarray(src, float), np.asarray(tgt, float)])


def test_exact_matches():
    pts = np.random.default_rng(0).random((20, 2)) * 100
    r = mma(_pairs(pts, pts + [3, -2]), Homography.translation(3, -2))
    assert np.all(r.mma == 1) and r.auc == 1.0 and r.n_matches == 20


def test_off_by_two_pixels():
    pts = np.zeros((4, 2))
    r = mma(_pairs(pts, pts + [2.0, 0.0]), Homography.identity())
    assert r.mma_at(1) == 0 and r.mma_at(2) == 1
    # trapezoid: 0.5 for [1, 2] and 8 for [2, 10], over a span of 9
    assert r.auc == pytest.approx(8.5 / 9)


def test_half_far_off():
    pts = np.zeros((6, 2))
    tgt = pts.copy()
    tgt[3:] += [100, 0]
    r = mma(_pairs(pts, tgt), Homography.identity())
    assert np.all(r.mma == 0.5) and r.auc == pytest.approx(0.5)


def test_empty_is_flagged():
    r = mma(np.zeros((0, 4)), Homography.identity())
    assert not r.valid and r.n_matches == 0 and math.isnan(r.auc)


def test_aggregate_is_mean():
    a = EvalReport(T, np.ones(10), 1.0, 5)
    b = EvalReport(T, np.full(10, 0.5), 0.5, 5)
    agg = aggregate([a, b])
    assert agg.mma_at(3) == 0.75 and agg.n_matches == 10
    invalid = mma(np.zeros((0, 4)), Homography.identity())
    assert aggregate([a, invalid]).mma_at(3) == 1.0
    assert not aggregate([invalid]).valid


def test_categories():
    assert category_of("i_ajuntament") == "illumination"
    assert category_of("v_wall") == "viewpoint"
    assert category_of("x") == "overall"


@given(st.lists(st.floats(0, 1), min_size=2, max_size=12))
def test_mma_properties(errs):
    src = np.zeros((len(errs), 2))
    tgt = np.stack([np.asarray(errs) * 15, np.zeros(len(errs))], axis=1)
    r = mma(_pairs(src, tgt), Homography.identity())
    assert np.all(np.diff(r.mma) >= 0) and np.all((r.mma >= 0) & (r.mma <= 1))
    assert 0 <= r.auc <= 1
    perm = np.random.default_rng(len(errs)).permutation(len(errs))
    np.testing.assert_array_equal(mma(_pairs(src[perm], tgt[perm]), Homography.identity()).mma, r.mma)


@given(st.floats(0, 1))
def test_area_of_constant_curve(c):
    assert curve_area(np.full(10, c), T) == pytest.approx(c)


# -- datasets ---------------------------------------------------------------------


@pytest.fixture
def identity_dataset(tmp_path):
    img = noise_image(64, 64, seed=21)
    write_sequence(tmp_path, "i_same", [img] * 6, [np.eye(3)] * 5)
    write_sequence(tmp_path, "v_same", [img] * 6, [np.eye(3)] * 5)
    return tmp_path


CFG64 = PipelineConfig(resolution=ResizeSpec(64))


def test_identity_sequence(identity_dataset):
    pairs = load_sequence(identity_dataset / "i_same")
    assert len(pairs) == 5 and pairs[0].category == "illumination"
    reports = evaluate_pairs(pairs, CFG64)
    assert all(np.all(r.mma == 1) for r in reports)


def test_parallel_evaluation_preserves_order(identity_dataset):
    pairs = load_pairs(identity_dataset)
    assert [p.category for p in pairs] == ["illumination"] * 5 + ["viewpoint"] * 5
    a = evaluate_pairs(pairs, CFG64)
    b = evaluate_pairs(pairs, CFG64, workers=3)
    assert [r.category for r in a] == [r.category for r in b]
    assert all(np.array_equal(x.mma, y.mma) for x, y in zip(a, b))


def test_summary_and_csv(identity_dataset):
    summary = summarize(evaluate_pairs(load_pairs(identity_dataset), CFG64))
    text = mma_csv(summary)
    lines = text.splitlines()
    assert lines[0] == "threshold,mma_illum,mma_view,mma_all"
    assert lines[1] == "1,1.0000,1.0000,1.0000" and len(lines) == 11


def test_sequence_errors(tmp_path):
    img = noise_image(32, 32)
    seq = write_sequence(tmp_path, "v_short", [img] * 5, [np.eye(3)] * 4)
    with pytest.raises(DatasetError, match="expected 6 images"):
        load_sequence(seq)
    seq = write_sequence(tmp_path, "v_noh", [img] * 6, [np.eye(3)] * 4)
    with pytest.raises(DatasetError, match="missing H_1_6"):
        load_sequence(seq)
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no sequences found"):
        find_sequences(tmp_path / "empty")


def test_sweep(identity_dataset):
    pairs = load_pairs(identity_dataset)[:1]
    table = resolution_sweep(pairs, [32, 64], CFG64)
    lines = table.to_csv().splitlines()
    assert lines[0] == "resolution,auc_illum,auc_view,auc_all,wall_s,peak_mem_mb"
    assert [r.resolution for r in table.rows] == [32, 64]
    assert all(r.auc_all == 1.0 for r in table.rows)
    assert lines[1].startswith("32,1.0000,nan,1.0000,")
    with pytest.raises(ValueError):
        resolution_sweep(pairs, [], CFG64)
    with pytest.raises(ValueError):
        resolution_sweep(pairs, [64, 32], CFG64)


# -- bias histogram -----------------------------------------------------------------


def test_bias_hand_example():
    a, b = [0.9, 0.9], [0.1, 0.95]
    assert bias_count(a, b, 0.75, 0.2) == 1
    assert bias_count(a, b, 0.75, 0.75) == 1
    hist = bias_histogram(a, b, 0.75)
    np.testing.assert_allclose(hist.tau_neg, np.linspace(0, 0.75, 11))
    # pair 1 (b=0.1) enters once tau- exceeds 0.1, i.e. from the third step (0.15)
    assert hist.counts.tolist() == [0, 0] + [1] * 9


def test_bias_equal_inputs_all_zero():
    a = np.random.default_rng(0).random(50)
    assert not bias_histogram(a, a, 0.75).counts.any()


def test_bias_validation(tmp_path):
    with pytest.raises(ValueError):
        bias_count([0.5], [0.5, 0.1], 0.5, 0.2)
    with pytest.raises(ValueError):
        bias_count([1.5], [0.5], 0.5, 0.2)
    p = tmp_path / "r.txt"
    p.write_text("0.1\n0.5\n")
    assert read_ratios(p).tolist() == [0.1, 0.5]


ratio_vectors = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).random((2, 40)))


@given(ratio_vectors, st.floats(0, 1))
def test_bias_monotone_and_straddle(ab, tau):
    a, b = ab
    counts = bias_histogram(a, b, tau).counts
    assert counts[0] == 0 and np.all(np.diff(counts) >= 0)
    straddle = np.sum(((a > tau) & (b < tau)) | ((b > tau) & (a < tau)))
    assert bias_count(a, b, tau, tau) + bias_count(b, a, tau, tau) <= straddle
