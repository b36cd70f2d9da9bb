import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featmap import diffcore as dc


def naive_conv(x, w, b, stride):
    """Direct summation over the 3x3 window with zero padding 1."""
    n, h, wd, c = x.shape
    o = w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, ho, wo, o))
    for bi in range(n):
        for i in range(ho):
            for j in range(wo):
                for di in range(3):
                    for dj in range(3):
                        y, xx = i * stride + di - 1, j * stride + dj - 1
                        if 0 <= y < h and 0 <= xx < wd:
                            out[bi, i, j] += w[:, di, dj, :] @ x[bi, y, xx]
                out[bi, i, j] += b
    return out


def test_relu_forward():
    x = dc.leaf("x")
    out = dc.forward_eval(dc.relu(x), {"x": np.array([-1.0, 0.0, 2.0])})
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


def test_affine_identity():
    v = np.array([0.3, -1.2, 5.0])
    out = dc.forward_eval(dc.affine(dc.leaf("x"), dc.leaf("w"), dc.leaf("b")),
                          {"x": v, "w": np.eye(3), "b": np.zeros(3)})
    np.testing.assert_array_equal(out, v)


def test_conv_constant_image_interior_is_window_sum():
    x = np.ones((1, 64, 64, 1))
    w = np.ones((1, 3, 3, 1))
    out = dc.forward_eval(dc.conv2d(dc.leaf("x"), dc.leaf("w"), dc.leaf("b"), stride=2),
                          {"x": x, "w": w, "b": np.zeros(1)})
    assert out.shape == (1, 32, 32, 1)
    ref = naive_conv(x, w, np.zeros(1), 2)
    assert ref[0, 10, 10, 0] == 9.0
    assert out[0, 10, 10, 0] == 9.0
    # top-left output sees the padding
    assert out[0, 0, 0, 0] == 4.0


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("size", [(7, 6), (8, 8)])
def test_conv_matches_direct_summation(stride, size):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, *size, 3))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = dc.forward_eval(dc.conv2d(dc.leaf("x"), dc.leaf("w"), dc.leaf("b"), stride),
                          {"x": x, "w": w, "b": b})
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride), rtol=0, atol=1e-12)


def test_backward_sum_of_squares():
    v = dc.param("v")
    root = dc.sum_(dc.square(v))
    dc.forward_eval(root, {"v": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(dc.backward_accumulate(root)["v"], [2.0, 4.0])


def test_backward_mean():
    v = dc.param("v")
    root = dc.mean(v)
    dc.forward_eval(root, {"v": np.arange(4.0)})
    np.testing.assert_array_equal(dc.backward_accumulate(root)["v"], [0.25] * 4)


def test_accumulators_reset_between_passes():
    v = dc.param("v")
    root = dc.sum_(dc.square(v))
    b = {"v": np.array([1.0, -3.0])}
    dc.forward_eval(root, b)
    first = dc.backward_accumulate(root)["v"].copy()
    dc.forward_eval(root, b)
    np.testing.assert_array_equal(dc.backward_accumulate(root)["v"], first)


def mlp_graph(rng, widths=(5, 7, 6, 3), batch=4):
    x = dc.leaf("x")
    h = x
    binds = {"x": rng.standard_normal((batch, widths[0]))}
    for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        h = dc.affine(h, dc.param(f"w{k}"), dc.param(f"b{k}"))
        binds[f"w{k}"] = rng.standard_normal((b, a))
        binds[f"b{k}"] = rng.standard_normal(b)
        if k < len(widths) - 2:
            h = dc.relu(h)
    return dc.sum_(dc.square(h)), binds


def test_three_layer_mlp_gradient_check():
    root, binds = mlp_graph(np.random.default_rng(0))
    assert dc.finite_diff_check(root, binds, eps=1e-4) < 1e-6


def test_quadratic_gradient_check_is_tight():
    rng = np.random.default_rng(1)
    v = dc.param("v")
    c = dc.leaf("c")
    root = dc.sum_(dc.square(dc.sub(v, c)))
    binds = {"v": rng.standard_normal(20), "c": rng.standard_normal(20)}
    assert dc.finite_diff_check(root, binds, eps=1e-3) < 1e-9


def _op_cases():
    rng = np.random.default_rng(7)
    p, q = dc.param("p"), dc.param("q")
    m = dc.param("m")
    cases = {
        "affine": (dc.affine(dc.leaf("x"), p, q), {"x": rng.standard_normal((3, 4)), "p": rng.standard_normal((2, 4)),
                                                  "q": rng.standard_normal(2)}),
        "affine_vector": (dc.affine(dc.leaf("x"), p, q), {"x": rng.standard_normal(4), "p": rng.standard_normal((2, 4)),
                                                         "q": rng.standard_normal(2)}),
        "conv_s1": (dc.conv2d(m, p, q, 1), {"m": rng.standard_normal((2, 5, 5, 2)),
                                            "p": rng.standard_normal((3, 3, 3, 2)), "q": rng.standard_normal(3)}),
        "conv_s2": (dc.conv2d(m, p, q, 2), {"m": rng.standard_normal((2, 6, 7, 2)),
                                            "p": rng.standard_normal((3, 3, 3, 2)), "q": rng.standard_normal(3)}),
        "relu": (dc.relu(p), {"p": rng.standard_normal((4, 5))}),
        "add": (dc.add(p, q), {"p": rng.standard_normal(6), "q": rng.standard_normal(6)}),
        "sub": (dc.sub(p, q), {"p": rng.standard_normal(6), "q": rng.standard_normal(6)}),
        "mul": (dc.mul(p, q), {"p": rng.standard_normal(6), "q": rng.standard_normal(6)}),
        "mul_scalar": (dc.mul(p, q), {"p": np.asarray(1.7), "q": rng.standard_normal(6)}),
        "square": (dc.square(p), {"p": rng.standard_normal(6)}),
        "sum_axis": (dc.sum_(p, axis=1), {"p": rng.standard_normal((3, 4))}),
        "mean_axis": (dc.mean(p, axis=0), {"p": rng.standard_normal((3, 4))}),
        "mean": (dc.mean(p), {"p": rng.standard_normal((3, 4))}),
        "reshape": (dc.reshape(p, (-1, 6)), {"p": rng.standard_normal((3, 4))}),
        "concat": (dc.concat([p, q], axis=1), {"p": rng.standard_normal((2, 3)), "q": rng.standard_normal((2, 2))}),
    }
    return cases


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_each_op_passes_gradient_check(name):
    out, binds = _op_cases()[name]
    # weight the output by a fixed random tensor so every output coordinate matters
    wts = dc.leaf("wts")
    root = dc.sum_(dc.mul(out, wts))
    dc.forward_eval(out, binds)
    binds = dict(binds, wts=np.random.default_rng(11).standard_normal(out.value.shape))
    assert dc.finite_diff_check(root, binds, eps=1e-5) < 1e-6


def test_relu_graph_away_from_kinks():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(50)
    x[np.abs(x) < 0.01] = 0.5
    v = dc.param("v")
    root = dc.sum_(dc.square(dc.relu(v)))
    assert dc.finite_diff_check(root, {"v": x}, eps=1e-4) < 1e-6


def test_kink_exclusion_skips_flipping_coordinates():
    v = dc.param("v")
    root = dc.sum_(dc.relu(v))
    # coordinate 0 sits on the kink; central differences would give 0.5 against an analytic 0
    binds = {"v": np.array([0.0, 1.0, -1.0])}
    assert dc.finite_diff_check(root, binds, eps=1e-4) < 1e-9
    assert dc.finite_diff_check(root, binds, eps=1e-4, exclude_kinks=False) > 0.4


def test_relu_subgradient_at_zero_is_zero():
    v = dc.param("v")
    root = dc.sum_(dc.relu(v))
    dc.forward_eval(root, {"v": np.zeros(3)})
    np.testing.assert_array_equal(dc.backward_accumulate(root)["v"], np.zeros(3))


def test_shape_mismatch_names_op_and_shapes():
    root = dc.affine(dc.leaf("x"), dc.leaf("w"), dc.leaf("b"))
    with pytest.raises(dc.ShapeError) as err:
        dc.forward_eval(root, {"x": np.ones((2, 3)), "w": np.ones((4, 5)), "b": np.ones(4)})
    assert err.value.op == "affine"
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_unbound_leaf():
    with pytest.raises(dc.UnboundLeafError):
        dc.forward_eval(dc.relu(dc.leaf("nope")), {})


def test_non_scalar_root_rejected():
    v = dc.param("v")
    root = dc.square(v)
    dc.forward_eval(root, {"v": np.ones(3)})
    with pytest.raises(dc.ShapeError):
        dc.backward_accumulate(root)


def test_conv_rejects_channel_mismatch():
    root = dc.conv2d(dc.leaf("x"), dc.leaf("w"), dc.leaf("b"))
    with pytest.raises(dc.ShapeError) as err:
        dc.forward_eval(root, {"x": np.ones((1, 4, 4, 2)), "w": np.ones((3, 3, 3, 1)), "b": np.ones(3)})
    assert err.value.op == "conv2d"


# -- ADAM -----------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_value():
    p = dc.Parameter("w", np.array([1.0, -2.0, 3.0]))
    dc.adam_step([p], {"w": np.zeros(3)}, lr=0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0, 3.0])
    assert p.step == 1


def test_adam_first_step_is_signed_lr():
    g = np.array([0.5, -3.0, 1e-3])
    p = dc.Parameter("w", np.zeros(3))
    lr = 1e-3
    dc.adam_step([p], {"w": g}, lr=lr)
    # t=1: m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
    expected = -lr * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.value, expected, rtol=1e-12)
    np.testing.assert_allclose(np.sign(p.value), -np.sign(g))
    assert np.all(np.abs(np.abs(p.value) - lr) < lr * 1e-4)


def test_adam_moments_follow_closed_form_ema():
    g = np.array([0.2, -1.5])
    p = dc.Parameter("w", np.ones(2))
    dc.adam_step([p], {"w": g}, lr=1e-2)
    dc.adam_step([p], {"w": g}, lr=1e-2)
    assert p.step == 2
    np.testing.assert_allclose(p.m, (1 - 0.9**2) * g, rtol=1e-14)
    np.testing.assert_allclose(p.v, (1 - 0.999**2) * g * g, rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = dc.Parameter("theta.g", np.ones(2))
    with pytest.raises(dc.NonFiniteError, match="theta.g"):
        dc.adam_step([p], {"theta.g": np.array([1.0, np.nan])})
    np.testing.assert_array_equal(p.value, np.ones(2))


def test_adam_rejects_missing_or_misshaped_gradient():
    p = dc.Parameter("w", np.ones(2))
    with pytest.raises(dc.GraphError):
        dc.adam_step([p], {})
    with pytest.raises(dc.ShapeError):
        dc.adam_step([p], {"w": np.ones(3)})


# -- properties ---------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    v = dc.param("v")
    w = dc.param("w")
    l1 = dc.sum_(dc.square(dc.affine(dc.leaf("x"), w, v)))
    l2 = dc.mean(dc.relu(dc.affine(dc.leaf("x"), w, v)))
    combo = dc.add(dc.mul(dc.leaf("a"), l1), dc.mul(dc.leaf("b"), l2))
    binds = {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((2, 4)), "v": rng.standard_normal(2),
             "a": np.asarray(a), "b": np.asarray(b)}
    dc.forward_eval(combo, binds)
    gc = dc.backward_accumulate(combo)
    dc.forward_eval(l1, binds)
    g1 = dc.backward_accumulate(l1)
    dc.forward_eval(l2, binds)
    g2 = dc.backward_accumulate(l2)
    for k in ("v", "w"):
        np.testing.assert_allclose(gc[k], a * g1[k] + b * g2[k], rtol=0, atol=1e-12)


def test_forward_and_backward_are_deterministic():
    def run():
        root, binds = mlp_graph(np.random.default_rng(42))
        val = dc.forward_eval(root, binds).copy()
        return val, dc.backward_accumulate(root)

    v1, g1 = run()
    v2, g2 = run()
    assert v1.tobytes() == v2.tobytes()
    assert all(g1[k].tobytes() == g2[k].tobytes() for k in g1)


def test_finite_diff_check_rejects_bad_eps():
    root, binds = mlp_graph(np.random.default_rng(0))
    with pytest.raises(ValueError):
        dc.finite_diff_check(root, binds, eps=0.1)


def test_finite_diff_check_subsamples_large_parameters():
    rng = np.random.default_rng(2)
    v = dc.param("v")
    root = dc.sum_(dc.square(v))
    assert dc.finite_diff_check(root, {"v": rng.standard_normal(20_000)}, eps=1e-3, max_coords=200) < 1e-5
