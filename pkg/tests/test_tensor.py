"""Tensor engine: op semantics, backward rules vs finite differences."""
import numpy as np
import pytest

from admloc.tensor import (ShapeError, Tensor, add_bias, block_tail, channel_scale,
                           cheb_mix, concat, depthwise_tconv, finite_difference_grad,
                           lowrank_row_attention, mul_const, time_mix)

NUM_SEEDS = 100
GRAD_TOL = 1e-6


def check_grads(build, arrays, tol=GRAD_TOL, h=1e-5, atol=1e-8):
    """Compare analytic grads of a scalar-valued builder against central FD.

    Acceptance is |ga - fd| <= atol + tol * (|ga| + |fd|); the absolute floor
    absorbs finite-difference roundoff on near-zero gradient entries.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    for i in range(len(arrays)):
        def f(arr, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(arr)
            return build(*args).item()
        fd = finite_difference_grad(f, arrays[i], h=h)
        ga = tensors[i].grad
        assert ga is not None, f"input {i} got no gradient"
        err = np.abs(ga - fd) - tol * (np.abs(ga) + np.abs(fd))
        assert err.max() <= atol, f"input {i}: excess error {err.max():.3e}"


def scalar_loss(t: Tensor) -> Tensor:
    # weighted sum so the loss is sensitive to every position differently
    w = np.arange(1, t.size + 1, dtype=np.float64).reshape(t.shape)
    return (t * Tensor(w)).sum()


# -- forward semantics --------------------------------------------------------

def test_matmul_shape_rule():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    assert (a @ b).shape == (2, 4)


def test_matmul_inner_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_elementwise_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_softmax_of_constant_rows_is_uniform():
    n = 5
    y = Tensor(np.full((3, n), 2.7)).softmax(axis=1)
    assert np.allclose(y.data, 1.0 / n, atol=1e-15)


def test_softmax_rows_sum_to_one_and_are_positive(rng):
    x = Tensor(rng.normal(0, 10, size=(4, 7)))
    y = x.softmax(axis=-1)
    assert np.abs(y.data.sum(axis=-1) - 1.0).max() <= 1e-12
    assert (y.data > 0).all()


def test_softmax_invalid_axis():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))).softmax(axis=2)


def test_l2_norm_three_four_five():
    assert Tensor(np.array([3.0, 4.0])).l2_norm().item() == pytest.approx(5.0, abs=1e-15)


def test_forward_determinism(rng):
    x = rng.normal(size=(3, 4))
    a = Tensor(x)
    y1 = ((a * a).softmax(axis=0) @ Tensor(np.eye(4))).tanh()
    y2 = ((a * a).softmax(axis=0) @ Tensor(np.eye(4))).tanh()
    assert np.array_equal(y1.data, y2.data)


def test_grad_buffer_matches_shape(rng):
    x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.shape == x.shape


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


# -- hand-checked backward rules ----------------------------------------------

def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-15)


def test_backward_linear_map_gives_column_sums():
    a = np.arange(12, dtype=np.float64).reshape(3, 4)
    x = Tensor(np.ones((4, 1)), requires_grad=True)
    (Tensor(a) @ x).sum().backward()
    assert np.allclose(x.grad[:, 0], a.sum(axis=0), atol=1e-12)


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    assert np.allclose(x.grad, [4.0, 8.0])


def test_backward_random_composite_graph_matches_fd(rng):
    arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]

    def build(a, b):
        h = (a @ b).tanh()
        s = h.softmax(axis=1)
        return (s * s).sum() + (a.sigmoid()).mean() + h.l2_norm()
    check_grads(build, arrays)


def test_finite_difference_sum_of_squares():
    g = finite_difference_grad(lambda x: float((x * x).sum()),
                               np.array([1.0, 2.0]), h=1e-5)
    assert np.abs(g - [2.0, 4.0]).max() <= 1e-8


def test_finite_difference_constant_function():
    g = finite_difference_grad(lambda x: 7.0, np.ones(4))
    assert np.array_equal(g, np.zeros(4))


def test_finite_difference_sigmoid_slope_at_zero():
    g = finite_difference_grad(lambda x: float((1.0 / (1.0 + np.exp(-x))).sum()),
                               np.zeros(3))
    assert np.abs(g - 0.25).max() <= 1e-8


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_grad(lambda x: 0.0, np.ones(2), h=0.0)


def test_transpose_reshape_inverse_composition_is_gradient_exact(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    y = x.transpose((2, 0, 1)).transpose((1, 2, 0)).reshape(24).reshape(2, 3, 4)
    scalar_loss(y).backward()
    w = np.arange(1, 25, dtype=np.float64).reshape(2, 3, 4)
    assert np.array_equal(x.grad, w)


# -- per-op finite-difference sweep -------------------------------------------

def _safe_normal(rng, shape, margin=0.05):
    """Normal draws nudged away from zero, for kinked ops (relu masks)."""
    x = rng.normal(size=shape)
    return x + margin * np.sign(x) + (x == 0)


CORE_OPS = {
    "add": (lambda a, b: scalar_loss(a + b),
            lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "sub": (lambda a, b: scalar_loss(a - b),
            lambda r: [r.normal(size=(2, 5)), r.normal(size=(2, 5))]),
    "mul": (lambda a, b: scalar_loss(a * b),
            lambda r: [r.normal(size=(4, 3)), r.normal(size=(4, 3))]),
    "neg": (lambda a: scalar_loss(-a), lambda r: [r.normal(size=(6,))]),
    "scalar_mul": (lambda a: scalar_loss(a * 1.7), lambda r: [r.normal(size=(2, 3))]),
    "scalar_add": (lambda a: scalar_loss(a + 2.5), lambda r: [r.normal(size=(5,))]),
    "scalar_rsub": (lambda a: scalar_loss(3.0 - a), lambda r: [r.normal(size=(5,))]),
    "matmul_2d": (lambda a, b: scalar_loss(a @ b),
                  lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "matmul_shared_rhs": (lambda a, b: scalar_loss(a @ b),
                          lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
    "matmul_batched": (lambda a, b: scalar_loss(a @ b),
                       lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))]),
    "matvec": (lambda a, b: scalar_loss(a @ b),
               lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "reshape": (lambda a: scalar_loss(a.reshape(6, 2)), lambda r: [r.normal(size=(3, 4))]),
    "transpose": (lambda a: scalar_loss(a.transpose((1, 2, 0))),
                  lambda r: [r.normal(size=(2, 3, 4))]),
    "slice": (lambda a: scalar_loss(a[1:3, :2]), lambda r: [r.normal(size=(4, 3))]),
    "concat": (lambda a, b: scalar_loss(concat([a, b], axis=1)),
               lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "sum_axis": (lambda a: scalar_loss(a.sum(axes=1)), lambda r: [r.normal(size=(3, 4))]),
    "sum_keepdims": (lambda a: scalar_loss(a.sum(axes=(0,), keepdims=True)),
                     lambda r: [r.normal(size=(3, 4))]),
    "sum_all": (lambda a: a.sum(), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda a: scalar_loss(a.mean(axes=0)), lambda r: [r.normal(size=(4, 3))]),
    "relu": (lambda a: scalar_loss(a.relu()), lambda r: [_safe_normal(r, (3, 4))]),
    "sigmoid": (lambda a: scalar_loss(a.sigmoid()), lambda r: [r.normal(size=(3, 4))]),
    "tanh": (lambda a: scalar_loss(a.tanh()), lambda r: [r.normal(size=(3, 4))]),
    "softmax": (lambda a: scalar_loss(a.softmax(axis=1)), lambda r: [r.normal(size=(3, 5))]),
    "l2_norm_all": (lambda a: a.l2_norm(), lambda r: [r.normal(size=(3, 4)) + 0.1]),
    "l2_norm_axis": (lambda a: scalar_loss(a.l2_norm(axes=(1,))),
                     lambda r: [r.normal(size=(3, 4)) + 0.1]),
    "add_bias": (lambda a, b: scalar_loss(add_bias(a, b)),
                 lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4,))]),
    "channel_scale": (lambda a, b: scalar_loss(channel_scale(a, b)),
                      lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4,))]),
}


@pytest.mark.parametrize("op", sorted(CORE_OPS))
def test_op_gradients_match_finite_differences(op):
    build, sample = CORE_OPS[op]
    for seed in range(NUM_SEEDS):
        rng = np.random.Generator(np.random.PCG64([seed, sum(map(ord, op))]))
        check_grads(build, sample(rng))


def test_mul_const_gradient():
    for seed in range(NUM_SEEDS):
        rng = np.random.Generator(np.random.PCG64(seed))
        arr = rng.normal(size=(3, 1, 4))  # broadcasts against (3, 2, 4)
        check_grads(lambda a: scalar_loss(mul_const(a, arr)),
                    [rng.normal(size=(3, 2, 4))])


# -- fused model ops: forward oracles and gradients ---------------------------

def _cheb_reference(basis, x, theta, attention=None):
    """Independent einsum evaluation of the fused graph convolution."""
    if attention is not None:
        mod = attention[:, None] * basis[None]      # (B, K, J, J)
        mixed = np.einsum("bkij,bjwc->bkiwc", mod, x)
    else:
        mixed = np.einsum("kij,bjwc->bkiwc", basis, x)
    return np.einsum("bkiwc,kcd->biwd", mixed, theta)


def _cheb_case(rng, K, C, B=2, J=3, W=2, D=3, with_attention=True):
    basis = rng.normal(size=(K, J, J))
    arrays = [rng.normal(size=(B, J, W, C)), rng.normal(size=(K, C, D))]
    if with_attention:
        arrays.append(rng.normal(size=(B, J, J)))
    return basis, arrays


@pytest.mark.parametrize("K,C,label", [(2, 2, "narrow"), (7, 5, "wide")])
@pytest.mark.parametrize("with_attention", [False, True])
def test_cheb_mix_forward_matches_reference(K, C, label, with_attention, rng):
    basis, arrays = _cheb_case(rng, K, C, with_attention=with_attention)
    att = Tensor(arrays[2]) if with_attention else None
    out = cheb_mix(basis, Tensor(arrays[0]), Tensor(arrays[1]), attention=att)
    ref = _cheb_reference(basis, arrays[0], arrays[1],
                          arrays[2] if with_attention else None)
    assert np.abs(out.data - ref).max() < 1e-12


@pytest.mark.parametrize("K,C,label", [(2, 2, "narrow"), (7, 5, "wide")])
@pytest.mark.parametrize("with_attention", [False, True])
def test_cheb_mix_gradients(K, C, label, with_attention):
    for seed in range(NUM_SEEDS):
        rng = np.random.Generator(np.random.PCG64([seed, K, C, with_attention]))
        basis, arrays = _cheb_case(rng, K, C, with_attention=with_attention)
        if with_attention:
            check_grads(lambda x, t, a: scalar_loss(cheb_mix(basis, x, t, attention=a)),
                        arrays)
        else:
            check_grads(lambda x, t: scalar_loss(cheb_mix(basis, x, t)), arrays)


def test_cheb_mix_shape_mismatch():
    with pytest.raises(ShapeError):
        cheb_mix(np.zeros((2, 3, 3)), Tensor(np.zeros((1, 3, 2, 2))),
                 Tensor(np.zeros((2, 5, 4))))


def test_lowrank_row_attention_forward_matches_reference(rng):
    feats = rng.normal(size=(2, 4, 6))
    q = rng.normal(size=(6, 3))
    k = rng.normal(size=(6, 3))
    out = lowrank_row_attention(Tensor(feats), Tensor(q), Tensor(k))
    scores = (feats @ q) @ np.swapaxes(feats @ k, -1, -2)
    sig = 1.0 / (1.0 + np.exp(-scores))
    e = np.exp(sig - sig.max(axis=-1, keepdims=True))
    ref = e / e.sum(axis=-1, keepdims=True)
    assert np.abs(out.data - ref).max() < 1e-12
    assert np.abs(out.data.sum(axis=-1) - 1.0).max() <= 1e-12


def test_lowrank_row_attention_gradients():
    for seed in range(NUM_SEEDS):
        rng = np.random.Generator(np.random.PCG64([seed, 0xA77]))
        arrays = [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)),
                  rng.normal(size=(4, 2))]
        check_grads(lambda f, q, k: scalar_loss(lowrank_row_attention(f, q, k)),
                    arrays)


def test_time_mix_forward_matches_einsum(rng):
    e = rng.normal(size=(2, 3, 3))
    x = rng.normal(size=(2, 4, 3, 2))
    out = time_mix(Tensor(e), Tensor(x))
    assert np.abs(out.data - np.einsum("buw,bjwc->bjuc", e, x)).max() < 1e-12


def test_time_mix_gradients():
    for seed in range(NUM_SEEDS):
        rng = np.random.Generator(np.random.PCG64([seed, 0x71E]))
        check_grads(lambda e, x: scalar_loss(time_mix(e, x)),
                    [rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 2, 3, 2))])


def _tconv_reference(x, kernel):
    B, J, W, D = x.shape
    taps = kernel.shape[0]
    pad = taps // 2
    xpad = np.zeros((B, J, W + taps - 1, D))
    xpad[:, :, pad:pad + W] = x
    return sum(xpad[:, :, t:t + W] * kernel[t] for t in range(taps))


def test_depthwise_tconv_forward_matches_reference(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    k = rng.normal(size=(3, 4))
    out = depthwise_tconv(Tensor(x), Tensor(k))
    assert np.abs(out.data - _tconv_reference(x, k)).max() < 1e-12


def test_depthwise_tconv_rejects_even_taps():
    with pytest.raises(ShapeError):
        depthwise_tconv(Tensor(np.zeros((1, 2, 3, 4))), Tensor(np.zeros((2, 4))))


def test_depthwise_tconv_gradients():
    for seed in range(NUM_SEEDS):
        rng = np.random.Generator(np.random.PCG64([seed, 0x7C0]))
        check_grads(lambda x, k: scalar_loss(depthwise_tconv(x, k)),
                    [rng.normal(size=(2, 2, 4, 3)), rng.normal(size=(3, 3))])


def test_block_tail_forward_matches_unfused_composition(rng):
    h = rng.normal(size=(2, 3, 4, 5))
    bias = rng.normal(size=(5,))
    kernel = rng.normal(size=(3, 5))
    x = rng.normal(size=(2, 3, 4, 2))
    resid = rng.normal(size=(2, 5))
    out = block_tail(Tensor(h), Tensor(bias), Tensor(kernel), Tensor(x), Tensor(resid))
    ref = np.maximum(_tconv_reference(h + bias, kernel), 0.0) + x @ resid
    assert np.abs(out.data - ref).max() < 1e-12


def test_block_tail_gradients_match_unfused_composition():
    """The fused tail must agree with the equivalent chain of primitive ops,
    in both output and every parameter gradient."""
    for seed in range(25):
        rng = np.random.Generator(np.random.PCG64([seed, 0xB7A]))
        arrays = [rng.normal(size=(2, 2, 4, 3)), rng.normal(size=(3,)),
                  rng.normal(size=(3, 3)), rng.normal(size=(2, 2, 4, 2)),
                  rng.normal(size=(2, 3))]

        fused = [Tensor(a, requires_grad=True) for a in arrays]
        scalar_loss(block_tail(*fused)).backward()

        plain = [Tensor(a, requires_grad=True) for a in arrays]
        h, bias, kernel, x, resid = plain
        y = depthwise_tconv(add_bias(h, bias), kernel).relu() + (x @ resid)
        scalar_loss(y).backward()

        for f, p in zip(fused, plain):
            assert np.abs(f.grad - p.grad).max() < 1e-12


def test_block_tail_gradients_match_finite_differences():
    for seed in range(NUM_SEEDS):
        rng = np.random.Generator(np.random.PCG64([seed, 0xB7B]))
        arrays = [rng.normal(size=(1, 2, 4, 3)), rng.normal(size=(3,)),
                  rng.normal(size=(3, 3)), rng.normal(size=(1, 2, 4, 2)),
                  rng.normal(size=(2, 3))]
        # keep the relu mask away from the finite-difference step
        pre = _tconv_reference(arrays[0] + arrays[1], arrays[2])
        if np.abs(pre).min() < 1e-3:
            continue
        check_grads(lambda *a: scalar_loss(block_tail(*a)), arrays)


def test_concat_forward_and_split_backward(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    out = concat([ta, tb], axis=1)
    assert np.array_equal(out.data, np.concatenate([a, b], axis=1))
    out.sum().backward()
    assert np.array_equal(ta.grad, np.ones((2, 3)))
    assert np.array_equal(tb.grad, np.ones((2, 2)))
