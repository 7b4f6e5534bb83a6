import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from cmswinkan.kernels import DimensionError
from cmswinkan.voting import (
    LinearSvm,
    PatchRecord,
    SvmTrainingError,
    VoteError,
    VoteParams,
    group_by_slide,
    hard_vote,
    patch_weight,
    read_records,
    soft_vote,
    svm_predict_probs,
    svm_train,
    write_records,
)

from oracles import brute_soft_vote

NEUROPIL_ONLY = (1.0, 0.0, 0.0)
STROMA_ONLY = (0.0, 1.0, 0.0)
OTHER_ONLY = (0.0, 0.0, 1.0)


def _rec(cp, tp=OTHER_ONLY, sid="s", x=0, y=0):
    return PatchRecord(sid, x, y, np.asarray(cp, float), np.asarray(tp, float))


def _random_simplex(rng, n, c):
    return rng.dirichlet(np.ones(c), size=n)


# --- patch weights ----------------------------------------------------------------


@pytest.mark.parametrize("tp,w", [((0.5, 0.25, 0.25), 2.5), (OTHER_ONLY, 1.0), (NEUROPIL_ONLY, 1.0), (STROMA_ONLY, 8.0)])
def test_patch_weight_examples(tp, w):
    assert patch_weight(tp) == pytest.approx(w, abs=1e-15)


def test_other_gets_gamma():
    assert patch_weight((0.3, 0.3, 0.4), VoteParams(1, 8, 0.25)) == 0.25


@given(p1=st.floats(0, 0.2), p2=st.floats(0.4, 0.8), d=st.floats(0, 0.2))
def test_weight_monotone_in_stroma(p1, p2, d):
    assume(p1 + p2 + d <= 1)
    assert patch_weight((p1, p2 + d, 1 - p1 - p2 - d)) >= patch_weight((p1, p2, 1 - p1 - p2))


def test_vote_params_validation():
    with pytest.raises(ValueError):
        VoteParams(-1, 8, 1)
    with pytest.raises(ValueError):
        VoteParams(0, 0, 0)


def test_record_validation():
    with pytest.raises(ValueError):
        _rec([0.6, 0.6])
    with pytest.raises(ValueError):
        _rec([1.2, -0.2])
    with pytest.raises(DimensionError):
        _rec([0.5, 0.5], (0.5, 0.5))


# --- voting -----------------------------------------------------------------------


@pytest.fixture
def planted():
    probs = [[0.6, 0.4], [0.55, 0.45], [0.1, 0.9]]
    tissues = [NEUROPIL_ONLY, NEUROPIL_ONLY, STROMA_ONLY]
    return [_rec(p, t, x=i) for i, (p, t) in enumerate(zip(probs, tissues))]


def test_planted_soft_beats_hard(planted):
    soft = soft_vote(planted)
    assert soft.weights == [1.0, 1.0, 8.0]
    np.testing.assert_allclose(soft.probs, [0.195, 0.805], atol=1e-15)
    assert soft.label == 1 and not soft.tie
    hard = hard_vote(planted)
    assert hard.label == 0 and not hard.tie


def test_single_patch_soft_vote(rng):
    p = _random_simplex(rng, 1, 4)[0]
    assert soft_vote([_rec(p, (0.2, 0.7, 0.1))]).label == int(np.argmax(p))


def test_all_other_equals_mean_vote(rng):
    P = _random_simplex(rng, 30, 4)
    v = soft_vote([_rec(p) for p in P])
    np.testing.assert_allclose(v.probs, P.mean(0), atol=1e-14)
    assert v.label == int(np.argmax(P.mean(0)))


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 200), c=st.integers(2, 5))
def test_soft_vote_matches_brute_force(seed, n, c):
    rng = np.random.default_rng(seed)
    P, Tp = _random_simplex(rng, n, c), _random_simplex(rng, n, 3)
    params = VoteParams(*rng.uniform(0.1, 10, 3))
    v = soft_vote([_rec(p, t) for p, t in zip(P, Tp)], params)
    np.testing.assert_allclose(v.probs, brute_soft_vote(P, Tp, params), rtol=0, atol=1e-12)
    assert abs(v.probs.sum() - 1) < 1e-9
    assert np.all(v.probs >= 0)


@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
def test_label_invariant_to_weight_scale(seed, scale):
    rng = np.random.default_rng(seed)
    P, Tp = _random_simplex(rng, 20, 3), _random_simplex(rng, 20, 3)
    base = VoteParams(1.0, 8.0, 1.0)
    scaled = VoteParams(scale, 8.0 * scale, scale)
    recs = [_rec(p, t) for p, t in zip(P, Tp)]
    a, b = soft_vote(recs, base), soft_vote(recs, scaled)
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)


def test_zero_weights_fall_back_to_uniform():
    recs = [_rec([0.7, 0.3], NEUROPIL_ONLY), _rec([0.2, 0.8], NEUROPIL_ONLY), _rec([0.4, 0.6], NEUROPIL_ONLY)]
    v = soft_vote(recs, VoteParams(0.0, 8.0, 1.0))
    assert v.uniform_fallback
    np.testing.assert_allclose(v.probs, [13 / 30, 17 / 30], atol=1e-15)


def test_hard_vote_majority_and_tie():
    assert hard_vote([_rec([0.9, 0.1]), _rec([0.8, 0.2]), _rec([0.1, 0.9])]).label == 0
    v = hard_vote([_rec([0.9, 0.1]), _rec([0.1, 0.9])])
    assert v.label == 0 and v.tie


def test_soft_vote_tie_flagged():
    v = soft_vote([_rec([0.5, 0.5])])
    assert v.label == 0 and v.tie


def test_empty_and_mixed_slides_rejected():
    with pytest.raises(VoteError):
        soft_vote([])
    with pytest.raises(VoteError):
        hard_vote([])
    with pytest.raises(VoteError):
        soft_vote([_rec([1, 0], sid="a"), _rec([1, 0], sid="b")])


def test_group_by_slide_keeps_order():
    recs = [_rec([1, 0], sid=s, x=i) for i, s in enumerate("abab")]
    g = group_by_slide(recs)
    assert list(g) == ["a", "b"] and [r.x for r in g["b"]] == [1, 3]


def test_verdict_text_mentions_flags(planted):
    text = soft_vote([_rec([0.5, 0.5])]).to_text()
    assert "tie" in text and "weight histogram" in text
    assert "flags" not in soft_vote(planted).to_text()


def test_record_roundtrip(tmp_path, rng):
    recs = [_rec(p, t, sid=f"s{i % 2}", x=512 * i, y=7) for i, (p, t) in
            enumerate(zip(_random_simplex(rng, 6, 4), _random_simplex(rng, 6, 3)))]
    write_records(tmp_path / "r.tsv", recs)
    back = read_records(tmp_path / "r.tsv")
    for a, b in zip(recs, back):
        assert (a.slide_id, a.x, a.y) == (b.slide_id, b.x, b.y)
        assert np.array_equal(a.class_probs, b.class_probs) and np.array_equal(a.tissue_probs, b.tissue_probs)


# --- SVM --------------------------------------------------------------------------


def _blobs(rng, n=60, d=5, classes=2, sep=6.0):
    centres = rng.normal(size=(classes, d)) * sep
    y = np.repeat(np.arange(classes), n)
    return centres[y] + rng.normal(size=(len(y), d)), y


def test_separable_blobs_fit_perfectly(rng):
    X, y = _blobs(rng)
    svm = svm_train(X, y, lam=1e-3, epochs=30, num_classes=2)
    assert svm.train_accuracy == 1.0
    assert np.all(svm.margins(X).argmax(1) == y)


def test_three_class_blobs(rng):
    X, y = _blobs(rng, classes=3)
    svm = svm_train(X, y)
    assert svm.weights.shape == (3, 5) and svm.train_accuracy == 1.0


def test_weight_norm_shrinks_with_lambda(rng):
    X, y = _blobs(rng, sep=2.0, classes=3)
    norms = [np.linalg.norm(svm_train(X, y, lam=lam, epochs=20).weights) for lam in (1e-3, 1e-2, 1e-1, 1.0, 10.0)]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_svm_deterministic(rng):
    X, y = _blobs(rng, classes=3)
    a, b = svm_train(X, y, seed=4), svm_train(X, y, seed=4)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_single_class_rejected(rng):
    with pytest.raises(SvmTrainingError):
        svm_train(rng.normal(size=(10, 3)), np.zeros(10, int))


def _svm(weights, bias=None):
    w = np.asarray(weights, float)
    return LinearSvm(w, np.zeros(len(w)) if bias is None else np.asarray(bias, float), 1e-3,
                     np.zeros(w.shape[1]), np.ones(w.shape[1]))


def test_zero_weights_give_uniform_probs(rng):
    np.testing.assert_allclose(svm_predict_probs(_svm(np.zeros((3, 4))), rng.normal(size=4)), 1 / 3, atol=1e-15)


def test_large_first_margin():
    p = svm_predict_probs(_svm(np.eye(3)), [10.0, 0.0, 0.0])
    assert p[0] > 0.99


@given(st.integers(0, 2**32 - 1))
def test_probs_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    p = svm_predict_probs(_svm(rng.normal(size=(3, 6)) * 5, rng.normal(size=3)), rng.normal(size=(4, 6)) * 10)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_feature_length_mismatch():
    with pytest.raises(DimensionError):
        svm_predict_probs(_svm(np.eye(3)), np.zeros(4))


@given(st.floats(0.0, 5.0))
def test_stroma_weight_monotone_through_svm(delta):
    # raising the stroma margin raises P2 and keeps the stroma argmax, so the weight cannot drop
    svm = _svm(np.eye(3))
    base = np.array([0.5, 2.0, 0.0])
    w0 = patch_weight(svm_predict_probs(svm, base))
    w1 = patch_weight(svm_predict_probs(svm, base + [0, delta, 0]))
    assert w1 >= w0 - 1e-12


def test_svm_save_load(tmp_path, rng):
    X, y = _blobs(rng, classes=3)
    svm = svm_train(X, y)
    svm.save(tmp_path / "t.svm")
    back = LinearSvm.load(tmp_path / "t.svm")
    np.testing.assert_array_equal(back.margins(X), svm.margins(X))
