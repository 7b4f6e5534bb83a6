import numpy as np
import pytest

from cmswinkan import tensor as T
from cmswinkan.cmsa import Cdfa, Cmsa, CmsaConfig
from cmswinkan.gradcheck import check_gradients
from cmswinkan.swin import StageFeatures
from cmswinkan.tensor import DimensionError, Tensor
from oracles import cdfa_reference, randomize_cdfa


def _inputs(rng, B, C, H, W):
    return [rng.normal(size=(B, C, H, W)) for _ in range(3)]


@pytest.mark.parametrize("K,C,H,W,training", [(3, 8, 6, 6, True), (3, 4, 5, 7, False), (1, 8, 4, 4, True), (5, 4, 6, 6, True)])
def test_vectorized_matches_scalar_reference(rng, K, C, H, W, training):
    cdfa = Cdfa(C, K, rng)
    randomize_cdfa(cdfa, rng)
    cdfa.train(training)
    F1, F2, F3 = _inputs(rng, 2, C, H, W)
    ref, _ = cdfa_reference(cdfa, F1, F2, F3)
    out = cdfa(Tensor(F1), Tensor(F2), Tensor(F3)).data
    assert np.max(np.abs(out - ref)) < 1e-10


def test_k1_reduces_to_cbr_and_projection(rng):
    cdfa = Cdfa(8, 1, rng)
    randomize_cdfa(cdfa, rng)
    F1, F2, F3 = _inputs(rng, 2, 8, 5, 5)
    out = cdfa(Tensor(F1), Tensor(F2), Tensor(F3)).data
    np.testing.assert_array_equal(out, cdfa.values(Tensor(F3)).data)


def test_k1_attention_stage_is_spatially_equivariant(rng):
    # with K=1 the attention maps are 1x1, so F1/F2 can be permuted freely;
    # the 3x3 CBR on F3 is what couples neighbours
    cdfa = Cdfa(4, 1, rng)
    F1, F2, F3 = _inputs(rng, 1, 4, 4, 4)
    perm = rng.permutation(16)
    P1 = F1.reshape(1, 4, 16)[..., perm].reshape(F1.shape)
    P2 = F2.reshape(1, 4, 16)[..., perm].reshape(F2.shape)
    a = cdfa(Tensor(F1), Tensor(F2), Tensor(F3)).data
    b = cdfa(Tensor(P1), Tensor(P2), Tensor(F3)).data
    np.testing.assert_array_equal(a, b)


def test_attention_maps_row_stochastic(rng):
    cdfa = Cdfa(8, 3, rng)
    F = Tensor(rng.normal(scale=3, size=(2, 8, 4, 4)))
    for which in (1, 2):
        a = cdfa.attention_maps(F, which).data
        assert a.shape == (2, 4, 4, 9, 9)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_micro_shape_arithmetic(rng):
    cdfa = Cdfa(48, 3, rng)
    assert cdfa.attn1.weight.shape == (81, 48)
    F = [Tensor(rng.normal(size=(1, 48, 28, 28))) for _ in range(3)]
    assert T.unfold_kxk(cdfa.values(F[2]), 3, padding=1).shape == (1, 48, 9, 28, 28)
    assert cdfa(*F).shape == (1, 48, 28, 28)


def test_mismatched_inputs_rejected(rng):
    cdfa = Cdfa(4, 3, rng)
    with pytest.raises(DimensionError):
        cdfa(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 2, 2))))


@pytest.mark.parametrize("K,s", [(2, 1), (0, 1), (3, 2)])
def test_config_validation(K, s):
    with pytest.raises(ValueError):
        CmsaConfig(K=K, s=s)


def _stage_features(rng, C=8, B=2, res=8):
    return StageFeatures(
        Tensor(rng.normal(size=(B, 2 * C, res, res))),
        Tensor(rng.normal(size=(B, 4 * C, res // 2, res // 2))),
        Tensor(rng.normal(size=(B, 8 * C, res // 4, res // 4))),
        Tensor(rng.normal(size=(B, 8 * C, res // 4, res // 4))),
    )


def test_prepare_shapes_micro(rng):
    cmsa = Cmsa(24, CmsaConfig(), rng)
    sf = _stage_features(rng, C=24, B=1, res=28)
    F1, F2, F3 = cmsa.prepare(sf)
    assert F1.shape == F2.shape == F3.shape == (1, 48, 28, 28)


def test_scale_weights_gate_branches(rng):
    cmsa = Cmsa(8, CmsaConfig(scale_init=(1.0, 0.0, 0.0)), rng)
    sf = _stage_features(rng)
    F1, F2, F3 = cmsa.prepare(sf)
    np.testing.assert_array_equal(F1.data, sf.f1.data)
    assert not F2.data.any() and not F3.data.any()


def test_zero_scale_weights_give_cdfa_of_zeros(rng):
    cmsa = Cmsa(8, CmsaConfig(scale_init=(0.0, 0.0, 0.0)), rng)
    out = cmsa(_stage_features(rng)).data
    z = Tensor(np.zeros((2, 16, 8, 8)))
    np.testing.assert_array_equal(out, cmsa.cdfa(z, z, z).data)


@pytest.mark.parametrize("res", [4, 8, 16])
def test_output_matches_first_stage_size(rng, res):
    assert Cmsa(8, CmsaConfig(), rng)(_stage_features(rng, res=res)).shape == (2, 16, res, res)


def test_every_parameter_receives_gradient(rng):
    cmsa = Cmsa(8, CmsaConfig(), rng)
    sf = _stage_features(rng)
    R = Tensor(rng.normal(size=(2, 16, 8, 8)))
    T.tsum(cmsa(sf) * R).backward()
    for name, p in cmsa.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
    assert np.all(cmsa.scale_weights.grad != 0)


def test_end_to_end_gradcheck(rng):
    cmsa = Cmsa(4, CmsaConfig(), rng)
    sf = _stage_features(rng, C=4, res=4)
    R = Tensor(rng.normal(size=(2, 8, 4, 4)))
    params = list(cmsa.named_parameters())
    res = check_gradients(lambda: T.tsum(cmsa(sf) * R), params, num_samples=150, seed=3)
    assert res.max_rel_error < 1e-4
    j = [e for e in check_gradients(lambda: T.tsum(cmsa(sf) * R), [("scale", cmsa.scale_weights)], 3).entries]
    assert all(abs(e.numeric) > 1e-8 and e.rel_error < 1e-4 for e in j)
