import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmswinkan import tensor as T
from cmswinkan.gradcheck import check_gradients
from cmswinkan.kan import GridError, KanLayer, KanStack, SplineGrid, bspline_basis, kan_init
from cmswinkan.tensor import DimensionError, Tensor
from oracles import fd_grad, max_rel_err


def test_hand_recursion_degree_one():
    g = SplineGrid(np.arange(5.0), 1, 1.0, 3.0)
    np.testing.assert_allclose(bspline_basis(1.5, g), [0.5, 0.5, 0.0], atol=1e-15)


def test_degree_zero_selects_segment_on_interior_knot():
    g = SplineGrid(np.arange(5.0), 0, 0.0, 4.0)
    np.testing.assert_array_equal(bspline_basis(2.0, g), [0, 0, 1, 0])


@pytest.mark.parametrize("k", [1, 2, 3])
def test_partition_unity_support_nonnegativity(k):
    g = SplineGrid.uniform(5, k)
    x = np.linspace(-1, 1, 10_000)
    B = bspline_basis(x, g)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(B >= 0)
    t = g.knots
    for i in range(g.num_basis):
        outside = (x < t[i]) | (x > t[i + k + 1])
        assert np.all(B[outside, i] == 0.0)


@given(st.integers(1, 3), st.lists(st.floats(0.05, 2.0), min_size=9, max_size=12), st.integers(0, 2**31))
def test_spline_properties_on_random_knots(k, gaps, seed):
    t = np.concatenate([[0.0], np.cumsum(gaps)])
    n = len(t) - 1
    lo, hi = t[k], t[n - k]
    g = SplineGrid(t, k, lo, hi)
    x = np.random.default_rng(seed).uniform(lo, hi, 500)
    B = bspline_basis(x, g)
    assert np.all(B >= 0)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-10)
    for i in range(g.num_basis):
        assert np.all(B[(x < t[i]) | (x > t[i + k + 1]), i] == 0.0)


def test_out_of_range_inputs_clamped():
    g = SplineGrid.uniform()
    np.testing.assert_array_equal(bspline_basis(-3.0, g), bspline_basis(-1.0, g))
    np.testing.assert_array_equal(bspline_basis(9.0, g), bspline_basis(1.0, g))


@pytest.mark.parametrize(
    "knots,k,lo,hi",
    [
        ([0, 1, 1, 2, 3, 4, 5], 1, 1, 3),  # repeated knot
        ([0, 1, 2, 3], 2, 1, 2),  # too few knots
        (np.arange(8.0), 3, 0.5, 4.0),  # range starts before t_k
        (np.arange(8.0), 1, 2.0, 1.5),  # lo >= hi
    ],
)
def test_invalid_grids_rejected_at_construction(knots, k, lo, hi):
    with pytest.raises(GridError):
        SplineGrid(np.asarray(knots, float), k, lo, hi)


def _naive_forward(layer: KanLayer, x: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], layer.out_dim))
    for b in range(x.shape[0]):
        for o in range(layer.out_dim):
            for i in range(layer.in_dim):
                xv = x[b, i]
                silu = xv / (1 + np.exp(-xv))
                spline = float(np.dot(layer.coef.data[o, i], bspline_basis(xv, layer.grid)))
                out[b, o] += layer.w_b.data[o, i] * silu + layer.w_s.data[o, i] * spline
    return out


def test_forward_matches_per_edge_sum(rng):
    layer = kan_init(4, 3, seed=1)
    x = rng.uniform(-1.5, 1.5, size=(6, 4))
    np.testing.assert_allclose(layer(Tensor(x)).data, _naive_forward(layer, x), atol=1e-12)


def test_base_path_only_at_zero():
    layer = kan_init(3, 3, seed=0)
    layer.w_s.data[:] = 0.0
    layer.w_b.data[:] = np.eye(3)
    np.testing.assert_array_equal(layer(Tensor(np.zeros((1, 3)))).data, 0.0)


def test_constant_coefficients_give_row_sums(rng):
    layer = kan_init(5, 4, seed=2)
    layer.w_b.data[:] = 0.0
    layer.coef.data[:] = 1.0
    out = layer(Tensor(rng.uniform(-1, 1, size=(7, 5)))).data
    np.testing.assert_allclose(out, np.broadcast_to(layer.w_s.data.sum(axis=1), out.shape), atol=1e-12)


def test_reproduces_identity_inside_spline_space():
    g = SplineGrid.uniform(5, 3)
    layer = KanLayer(1, 1, np.random.default_rng(0), g)
    layer.w_b.data[:] = 0.0
    layer.w_s.data[:] = 1.0
    t, k = g.knots, g.k
    # Greville abscissae: coefficients that reproduce f(x) = x exactly
    layer.coef.data[0, 0] = [t[i + 1 : i + k + 1].mean() for i in range(g.num_basis)]
    x = np.linspace(-0.999, 0.999, 101)[:, None]
    np.testing.assert_allclose(layer(Tensor(x)).data, x, atol=1e-8)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        kan_init(3, 2)(Tensor(np.zeros((2, 4))))


@pytest.mark.parametrize("bad", [(0, 3), (3, 0), (-1, 2)])
def test_nonpositive_dims_rejected(bad):
    with pytest.raises(ValueError):
        kan_init(*bad)


def test_coefficient_gradient_matches_fd(rng):
    layer = kan_init(3, 2, seed=4)
    x = Tensor(rng.uniform(-0.9, 0.9, size=(5, 3)))
    T.mean(layer(x)).backward()

    def f():
        with T.no_grad():
            return T.mean(layer(x)).item()

    assert max_rel_err(layer.coef.grad, fd_grad(f, layer.coef.data)) < 1e-4


def test_input_gradient_matches_fd(rng):
    layer = kan_init(3, 2, seed=5)
    x = T.parameter(rng.uniform(-0.9, 0.9, size=(4, 3)))
    T.tsum(layer(x) * layer(x)).backward()

    def f():
        with T.no_grad():
            y = layer(Tensor(x.data)).data
        return float(np.sum(y * y))

    assert max_rel_err(x.grad, fd_grad(f, x.data)) < 1e-4


def test_two_layer_stack_full_gradcheck(rng):
    stack = KanStack([4, 6, 3], rng)
    x = Tensor(rng.uniform(-1.2, 1.2, size=(5, 4)))
    y = np.array([0, 1, 2, 1, 0])
    res = check_gradients(lambda: T.cross_entropy_loss(stack(x), y), list(stack.named_parameters()), num_samples=10**6)
    assert len(res.entries) == stack.num_parameters()
    assert res.max_rel_error < 1e-4


def test_init_deterministic():
    a, b = kan_init(6, 5, seed=9), kan_init(6, 5, seed=9)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)
    assert all(p.requires_grad for p in a.parameters())


def test_he_normal_variance():
    layer = kan_init(50, 2000, seed=0)
    assert layer.w_b.size >= 10**5
    assert layer.w_b.data.var() == pytest.approx(2 / 50, rel=0.05)
    assert layer.coef.data.std() == pytest.approx(0.1, rel=0.05)
