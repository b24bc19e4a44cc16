"""Gradient and contract tests for the computation kernel.

Every analytic backward is compared against central finite differences via
grad_check, which is itself exercised on a closed-form case first.
"""

import numpy as np
import pytest

from vqvoice import numerics as nk


def rng64(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def test_affine_grad_check():
    r = rng64(1)
    x = r.normal(size=(4, 5))
    w = r.normal(size=(5, 3))
    b = r.normal(size=3)

    def op(x, w, b):
        y, cache = nk.affine_forward(x, w, b)
        loss = float((y ** 2).sum())
        dx, dw, db = nk.affine_backward(2.0 * y, cache)
        return loss, (dx, dw, db)

    assert nk.grad_check(op, [x, w, b]) < 1e-6


def test_affine_shapes_batched():
    r = rng64(2)
    x = r.normal(size=(2, 7, 5))
    w = r.normal(size=(5, 3))
    b = np.zeros(3)
    y, cache = nk.affine_forward(x, w, b)
    assert y.shape == (2, 7, 3)
    dx, dw, db = nk.affine_backward(np.ones_like(y), cache)
    assert dx.shape == x.shape and dw.shape == w.shape and db.shape == b.shape


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

def test_conv1d_identity_kernel():
    r = rng64(3)
    x = r.normal(size=(1, 1, 10))
    w = np.ones((1, 1, 1))
    y, _ = nk.conv1d_forward(x, w, np.zeros(1), stride=1)
    np.testing.assert_allclose(y, x)


def test_conv1d_length_formula():
    x = np.zeros((1, 1, 10))
    w = np.zeros((1, 1, 2))
    y, _ = nk.conv1d_forward(x, w, np.zeros(1), stride=2)
    assert y.shape == (1, 1, 5)


def test_conv1d_rejects_short_input():
    with pytest.raises(ValueError):
        nk.conv1d_forward(np.zeros((1, 1, 3)), np.zeros((1, 1, 4)), np.zeros(1), 1)


def test_conv1d_grad_check():
    r = rng64(4)
    x = r.normal(size=(2, 3, 14))
    w = r.normal(size=(4, 3, 5))
    b = r.normal(size=4)

    def op(x, w, b):
        y, cache = nk.conv1d_forward(x, w, b, stride=2)
        loss = float((y ** 2).sum())
        dx, dw, db = nk.conv1d_backward(2.0 * y, cache)
        return loss, (dx, dw, db)

    assert nk.grad_check(op, [x, w, b]) < 1e-4


# ---------------------------------------------------------------------------
# instance norm
# ---------------------------------------------------------------------------

def test_instance_norm_normalizes():
    r = rng64(5)
    x = r.normal(loc=3.0, scale=2.5, size=(2, 4, 50))
    y, _ = nk.instance_norm_forward(x)
    np.testing.assert_allclose(y.mean(axis=2), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=2), 1.0, atol=1e-4)


def test_instance_norm_grad_check():
    r = rng64(6)
    x = r.normal(size=(2, 3, 9))
    target = r.normal(size=(2, 3, 9))

    def op(x):
        y, cache = nk.instance_norm_forward(x)
        loss = float(((y - target) ** 2).sum())
        dx = nk.instance_norm_backward(2.0 * (y - target), cache)
        return loss, (dx,)

    assert nk.grad_check(op, [x]) < 1e-5


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

def make_cell(seed, input_dim, hidden_dim):
    return nk.RecurrentParams.create(np.random.default_rng(seed), input_dim,
                                     hidden_dim, dtype=np.float64)


def test_recurrent_zero_weights_keeps_state():
    cell = make_cell(0, 3, 4)
    for p in cell.named("c").values():
        p.value[...] = 0.0
    h = np.array([[0.3, -1.2, 0.5, 2.0]])
    x = np.array([[1.0, -2.0, 0.25]])
    h_new, out = nk.recurrent_step(h, x, cell)
    np.testing.assert_array_equal(h_new, h)
    np.testing.assert_array_equal(out, h_new)


def test_recurrent_dim_mismatch():
    cell = make_cell(0, 3, 4)
    with pytest.raises(ValueError):
        nk.recurrent_step(np.zeros((1, 5)), np.zeros((1, 3)), cell)
    with pytest.raises(ValueError):
        nk.recurrent_forward(np.zeros((1, 2, 7)), np.zeros((1, 4)), cell)


def _unroll_op(cell, steps, batch=2, input_dim=3, hidden_dim=4):
    """Build a grad-check operation over all cell weights for a fixed unroll."""
    r = rng64(42 + steps)
    xs = r.normal(size=(batch, steps, input_dim))
    h0 = r.normal(size=(batch, hidden_dim))
    names = ["wg", "ug", "bg", "wc", "uc", "bc"]

    def op(*weights):
        for name, w in zip(names, weights):
            getattr(cell, name).value = w
            getattr(cell, name).zero_grad()
        hs, cache = nk.recurrent_forward(xs, h0, cell)
        loss = float((hs ** 2).sum())
        nk.recurrent_backward(2.0 * hs, cache, cell)
        return loss, tuple(getattr(cell, n).grad for n in names)

    return op, [getattr(cell, n).value.copy() for n in names]


def test_recurrent_grad_check_unroll_1():
    cell = make_cell(7, 3, 4)
    op, weights = _unroll_op(cell, steps=1)
    assert nk.grad_check(op, weights) < 1e-4


def test_recurrent_grad_check_unroll_32():
    cell = make_cell(8, 3, 4)
    op, weights = _unroll_op(cell, steps=32)
    assert nk.grad_check(op, weights) < 1e-3


def test_recurrent_input_grad_check():
    cell = make_cell(9, 3, 4)
    r = rng64(10)
    h0 = r.normal(size=(2, 4))

    def op(xs, h0):
        hs, cache = nk.recurrent_forward(xs, h0, cell)
        loss = float((hs ** 2).sum())
        for p in cell.named("c").values():
            p.zero_grad()
        dxs, dh0 = nk.recurrent_backward(2.0 * hs, cache, cell)
        return loss, (dxs, dh0)

    xs = r.normal(size=(2, 6, 3))
    assert nk.grad_check(op, [xs, h0]) < 1e-4


def test_recurrent_long_unroll_stays_finite():
    cell = make_cell(11, 3, 8)
    r = rng64(12)
    xs = r.normal(size=(1, 2000, 3))
    hs, cache = nk.recurrent_forward(xs, np.zeros((1, 8)), cell)
    assert np.all(np.isfinite(hs))
    dxs, _ = nk.recurrent_backward(np.ones_like(hs) / hs.size, cache, cell)
    assert np.all(np.isfinite(dxs))


# ---------------------------------------------------------------------------
# mu-law + categorical loss
# ---------------------------------------------------------------------------

def test_mu_law_round_trip_within_one_step():
    x = np.linspace(-1.0, 1.0, 4001)
    classes = nk.mu_law_encode(x)
    decoded = nk.mu_law_decode(classes)
    # bin edges around each class in the companded domain
    edges = nk.mu_law_decode(np.arange(257) - 0.5)
    widths = np.diff(edges)
    assert np.all(np.abs(decoded - x) <= widths[classes] + 1e-12)


def test_mu_law_encode_range_and_determinism():
    r = rng64(13)
    x = r.uniform(-1, 1, size=1000)
    c1 = nk.mu_law_encode(x)
    c2 = nk.mu_law_encode(x)
    assert c1.min() >= 0 and c1.max() <= 255
    np.testing.assert_array_equal(c1, c2)


def test_xent_uniform_logits():
    logits = np.zeros((3, 256))
    loss, _ = nk.softmax_xent_forward(logits, np.array([0, 100, 255]))
    assert abs(loss - np.log(256)) < 1e-12


def test_xent_one_hot_limit():
    logits = np.full((1, 16), -50.0)
    logits[0, 3] = 50.0
    loss, _ = nk.softmax_xent_forward(logits, np.array([3]))
    assert loss < 1e-12


def test_xent_rejects_bad_class():
    with pytest.raises(ValueError):
        nk.softmax_xent_forward(np.zeros((1, 8)), np.array([8]))
    with pytest.raises(ValueError):
        nk.softmax_xent_forward(np.zeros((1, 8)), np.array([-1]))


def test_xent_grad_check():
    r = rng64(14)
    logits = r.normal(size=(5, 11))
    targets = r.integers(0, 11, size=5)

    def op(logits):
        loss, cache = nk.softmax_xent_forward(logits, targets)
        return loss, (nk.softmax_xent_backward(cache),)

    assert nk.grad_check(op, [logits]) < 1e-5


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = nk.Parameter(np.array([1.0, -2.0, 3.0]))
    before = p.value.copy()
    nk.adam_step([p], learning_rate=0.1)
    np.testing.assert_array_equal(p.value, before)


def test_adam_first_step_magnitude():
    # with constant gradient g, bias-corrected step 1 moves by ~lr exactly
    p = nk.Parameter(np.array([0.0]))
    p.grad = np.array([0.73])
    nk.adam_step([p], learning_rate=0.01)
    assert abs(abs(p.value[0]) - 0.01) < 1e-6


def test_adam_determinism():
    def run():
        p = nk.Parameter(np.linspace(-1, 1, 8))
        for step in range(25):
            p.grad = np.sin(p.value * (step + 1))
            nk.adam_step([p], learning_rate=0.05)
        return p.value

    np.testing.assert_array_equal(run(), run())


# ---------------------------------------------------------------------------
# grad_check self-test
# ---------------------------------------------------------------------------

def test_grad_check_detects_wrong_gradient():
    def good(x):
        return float((x ** 3).sum()), (3.0 * x ** 2,)

    def bad(x):
        return float((x ** 3).sum()), (2.0 * x ** 2,)

    x = np.array([0.5, -1.25, 2.0])
    assert nk.grad_check(good, [x]) < 1e-8
    assert nk.grad_check(bad, [x]) > 1e-2
