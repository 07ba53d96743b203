"""Finite-difference verification of every operation's backward pass.

All graphs here are built in double precision on tensors no larger than
2x4x8x8, with central differences at step 1e-5.
"""

import numpy as np
import pytest

from roie_net import tensor_core as tc

STEP = 1e-5
TOL = 1e-4


def _param(name, rng, shape, lo=-1.0, hi=1.0):
    return tc.Parameter(name, rng.uniform(lo, hi, shape).astype(np.float64))


def _linear_probe(out, rng):
    """Contract an op output to a scalar through a fixed random weighting."""
    probe = tc.Tensor(rng.standard_normal(out.data.shape))
    return tc.reduce_mean(tc.ew_mul(out, probe))


def op_cases():
    """(name, build_params, build_loss) triples for every differentiable op."""
    cases = []

    def case(name):
        def wrap(fn):
            cases.append((name, fn))
            return fn

        return wrap

    @case("conv2d_depthwise")
    def _(rng):
        x = _param("x", rng, (2, 3, 6, 6))
        w = _param("w", rng, (3, 1, 3, 3))
        b = _param("b", rng, (3,))
        return [x, w, b], lambda: _linear_probe(
            tc.conv2d_depthwise(x.tensor, w.tensor, b.tensor), np.random.default_rng(99)
        )

    @case("conv2d_pointwise")
    def _(rng):
        x = _param("x", rng, (2, 3, 5, 5))
        w = _param("w", rng, (4, 3, 1, 1))
        b = _param("b", rng, (4,))
        return [x, w, b], lambda: _linear_probe(
            tc.conv2d_pointwise(x.tensor, w.tensor, b.tensor), np.random.default_rng(98)
        )

    @case("batch_norm_train")
    def _(rng):
        x = _param("x", rng, (2, 3, 4, 4))
        g = _param("gamma", rng, (3,), 0.5, 1.5)
        b = _param("beta", rng, (3,))
        rm, rv = np.zeros(3), np.ones(3)
        return [x, g, b], lambda: _linear_probe(
            tc.batch_norm(x.tensor, g.tensor, b.tensor, rm, rv, "train"),
            np.random.default_rng(97),
        )

    @case("batch_norm_eval")
    def _(rng):
        x = _param("x", rng, (2, 3, 4, 4))
        g = _param("gamma", rng, (3,), 0.5, 1.5)
        b = _param("beta", rng, (3,))
        rm = rng.uniform(-0.5, 0.5, 3)
        rv = rng.uniform(0.5, 1.5, 3)
        return [x, g, b], lambda: _linear_probe(
            tc.batch_norm(x.tensor, g.tensor, b.tensor, rm, rv, "eval"),
            np.random.default_rng(96),
        )

    @case("relu")
    def _(rng):
        # keep values away from the kink so the difference quotient is valid
        data = rng.uniform(0.1, 1.0, (2, 4, 8, 8)) * rng.choice([-1.0, 1.0], (2, 4, 8, 8))
        x = tc.Parameter("x", data)
        return [x], lambda: _linear_probe(tc.relu(x.tensor), np.random.default_rng(95))

    @case("sigmoid")
    def _(rng):
        x = _param("x", rng, (2, 4, 8, 8), -3.0, 3.0)
        return [x], lambda: _linear_probe(tc.sigmoid(x.tensor), np.random.default_rng(94))

    @case("max_pool2")
    def _(rng):
        x = _param("x", rng, (2, 2, 6, 6))
        return [x], lambda: _linear_probe(tc.max_pool2(x.tensor), np.random.default_rng(93))

    @case("upsample_bilinear2")
    def _(rng):
        x = _param("x", rng, (2, 2, 4, 4))
        return [x], lambda: _linear_probe(
            tc.upsample_bilinear2(x.tensor), np.random.default_rng(92)
        )

    @case("concat_channels")
    def _(rng):
        a = _param("a", rng, (2, 2, 4, 4))
        b = _param("b", rng, (2, 3, 4, 4))
        return [a, b], lambda: _linear_probe(
            tc.concat_channels([a.tensor, b.tensor]), np.random.default_rng(91)
        )

    @case("global_avg_pool")
    def _(rng):
        x = _param("x", rng, (2, 4, 6, 6))
        return [x], lambda: _linear_probe(tc.global_avg_pool(x.tensor), np.random.default_rng(90))

    @case("dense")
    def _(rng):
        x = _param("x", rng, (3, 5))
        w = _param("w", rng, (4, 5))
        b = _param("b", rng, (4,))
        return [x, w, b], lambda: _linear_probe(
            tc.dense(x.tensor, w.tensor, b.tensor), np.random.default_rng(89)
        )

    @case("ew_mul")
    def _(rng):
        a = _param("a", rng, (2, 3, 4, 4))
        b = _param("b", rng, (2, 3, 4, 4))
        return [a, b], lambda: _linear_probe(tc.ew_mul(a.tensor, b.tensor), np.random.default_rng(88))

    @case("ew_mul_broadcast")
    def _(rng):
        u = _param("u", rng, (2, 3, 4, 4))
        x = _param("x", rng, (2, 1, 4, 4), 0.1, 0.9)
        return [u, x], lambda: _linear_probe(tc.ew_mul(u.tensor, x.tensor), np.random.default_rng(87))

    @case("ew_add_broadcast")
    def _(rng):
        u = _param("u", rng, (2, 3, 4, 4))
        x = _param("x", rng, (2, 1, 4, 4))
        return [u, x], lambda: _linear_probe(tc.ew_add(u.tensor, x.tensor), np.random.default_rng(86))

    @case("scale")
    def _(rng):
        x = _param("x", rng, (2, 2, 4, 4))
        return [x], lambda: _linear_probe(tc.scale(x.tensor, -1.7), np.random.default_rng(85))

    @case("reduce_mean")
    def _(rng):
        x = _param("x", rng, (2, 3, 4, 4))
        return [x], lambda: tc.reduce_mean(x.tensor)

    @case("reshape")
    def _(rng):
        x = _param("x", rng, (2, 3, 4, 4))
        return [x], lambda: _linear_probe(
            tc.reshape(x.tensor, (2, 3 * 4 * 4)), np.random.default_rng(84)
        )

    @case("bce_loss")
    def _(rng):
        x = tc.Parameter("x", rng.uniform(0.05, 0.95, (2, 1, 6, 6)))
        y = tc.Tensor((rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64))
        return [x], lambda: tc.bce_loss(x.tensor, y)

    @case("composite_conv_bn_relu_bce")
    def _(rng):
        x = _param("x", rng, (2, 2, 4, 4))
        dw = _param("dw", rng, (2, 1, 3, 3))
        pw = _param("pw", rng, (1, 2, 1, 1))
        g = _param("gamma", rng, (1,), 0.5, 1.5)
        b = _param("beta", rng, (1,))
        rm, rv = np.zeros(1), np.ones(1)
        y = tc.Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))

        def build():
            h = tc.conv2d_depthwise(x.tensor, dw.tensor)
            h = tc.conv2d_pointwise(h, pw.tensor)
            h = tc.batch_norm(h, g.tensor, b.tensor, rm, rv, "train")
            h = tc.relu(h)
            return tc.bce_loss(tc.sigmoid(h), y)

        return [x, dw, pw, g, b], build

    return cases


@pytest.mark.parametrize("name,make", op_cases(), ids=[n for n, _ in op_cases()])
def test_gradients_match_finite_differences(name, make):
    rng = np.random.default_rng(hash(name) % 2**32)
    params, build = make(rng)
    report = tc.grad_check(build, params, step=STEP, tolerance=TOL)
    assert report.ok, f"{name}:\n{report}"


def test_pure_linear_error_is_machine_scale():
    rng = np.random.default_rng(42)
    w = tc.Parameter("w", rng.uniform(-1, 1, (3, 4)))
    c = tc.Tensor(rng.standard_normal((3, 4)))
    report = tc.grad_check(lambda: tc.reduce_mean(tc.ew_mul(w.tensor, c)), [w], step=STEP)
    assert report.worst() < 1e-8


def test_corrupted_gradient_is_reported():
    rng = np.random.default_rng(43)
    w = tc.Parameter("w", rng.uniform(0.2, 1.0, (2, 3)))

    def build():
        return tc.reduce_mean(tc.ew_mul(w.tensor, w.tensor))

    loss = build()
    tc.backward(loss, [w])
    corrupted = 2.0 * w.grad
    numeric = tc.numerical_gradients(build, [w], STEP)["w"]
    err = tc.max_relative_error(corrupted, numeric)
    assert err > TOL  # the doubled gradient must be flagged


def test_gradcheck_report_does_not_raise_on_failure():
    w = tc.Parameter("w", np.array([1.0]))

    def build():
        return tc.reduce_mean(tc.ew_mul(w.tensor, w.tensor))

    report = tc.grad_check(build, [w], step=STEP, tolerance=1e-30)
    assert not report.ok  # impossible tolerance flags it, without raising
    assert "FAIL" in str(report)
