"""Codebook behavior: nearest-neighbor assignment, EMA learning against a
planted-centroid oracle, mixing, utilization, and JSON round-trips."""

import numpy as np
import pytest

from vqvoice import vq


def make_book(vectors, decay=0.99, epsilon=1e-5):
    vectors = np.asarray(vectors, dtype=np.float64)
    return vq.Codebook(
        vectors=vectors.copy(),
        ema_cluster_size=np.zeros(len(vectors)),
        ema_vector_sum=np.zeros_like(vectors),
        decay=decay,
        epsilon=epsilon,
    )


# ---------------------------------------------------------------------------
# quantize
# ---------------------------------------------------------------------------

def test_quantize_exact_match_selects_entry():
    rng = np.random.default_rng(0)
    cb = make_book(rng.normal(size=(8, 3)))
    res = vq.quantize(cb.vectors[5][None, :], cb)
    assert res.codes[0] == 5
    np.testing.assert_array_equal(res.vectors[0], cb.vectors[5])
    assert res.commitment_loss == 0.0


def test_quantize_tie_breaks_to_lowest_code():
    vectors = np.full((8, 2), 100.0)
    vectors[2] = (1.0, 0.0)
    vectors[7] = (-1.0, 0.0)
    cb = make_book(vectors)
    res = vq.quantize(np.zeros((1, 2)), cb)
    assert res.codes[0] == 2


def test_quantize_dimension_mismatch():
    cb = make_book(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        vq.quantize(np.zeros((2, 5)), cb)


def brute_force_codes(inputs, vectors):
    codes = []
    for x in inputs:
        best, best_d = 0, np.inf
        for k, e in enumerate(vectors):
            d = float(np.sum((x - e) ** 2))
            if d < best_d:
                best, best_d = k, d
        codes.append(best)
    return np.array(codes)


def test_quantize_matches_brute_force_scan():
    rng = np.random.default_rng(42)
    for _ in range(20):
        k = int(rng.integers(2, 40))
        d = int(rng.integers(1, 8))
        cb = make_book(rng.normal(size=(k, d)))
        x = rng.normal(size=(30, d))
        res = vq.quantize(x, cb)
        np.testing.assert_array_equal(res.codes, brute_force_codes(x, cb.vectors))


# ---------------------------------------------------------------------------
# straight-through
# ---------------------------------------------------------------------------

def test_straight_through_copies_gradient():
    g = np.random.default_rng(1).normal(size=(5, 4))
    out = vq.straight_through(g)
    np.testing.assert_array_equal(out, g)
    assert out is not g
    np.testing.assert_array_equal(vq.straight_through(np.zeros(3)), np.zeros(3))


# ---------------------------------------------------------------------------
# commitment loss
# ---------------------------------------------------------------------------

def test_commitment_zero_when_equal():
    x = np.random.default_rng(2).normal(size=(6, 3))
    assert vq.commitment_loss(x, x.copy(), beta=0.25) == 0.0


def test_commitment_single_vector_closed_form():
    x = np.array([[0.0, 0.0]])
    q = np.array([[3.0, 4.0]])  # distance 5
    assert abs(vq.commitment_loss(x, q, beta=0.25) - 0.25 * 25.0) < 1e-12


def test_commitment_batch_equals_naive_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(17, 5))
    q = rng.normal(size=(17, 5))
    naive = 0.3 * np.mean([np.sum((a - b) ** 2) for a, b in zip(x, q)])
    assert abs(vq.commitment_loss(x, q, 0.3) - naive) < 1e-12


# ---------------------------------------------------------------------------
# EMA updates
# ---------------------------------------------------------------------------

def test_ema_unassigned_entry_never_moves():
    cb = make_book([[5.0, 5.0], [0.0, 0.0]], decay=0.9)
    x = np.array([[0.1, -0.1], [0.2, 0.0]])
    codes = vq.quantize(x, cb).codes
    assert set(codes) == {1}
    vq.ema_update(cb, x, codes)
    np.testing.assert_array_equal(cb.vectors[0], [5.0, 5.0])


def test_ema_decay_zero_gives_batch_mean():
    cb = make_book([[0.0, 0.0], [10.0, 10.0]], decay=0.0, epsilon=0.0)
    x = np.array([[1.0, 2.0], [3.0, 4.0], [11.0, 9.0]])
    codes = np.array([0, 0, 1])
    vq.ema_update(cb, x, codes)
    np.testing.assert_array_equal(cb.vectors[0], [2.0, 3.0])
    np.testing.assert_array_equal(cb.vectors[1], [11.0, 9.0])


def planted_cluster_run(seed, steps=500, batch=64, decay=0.95):
    """EMA learning against 4 planted Gaussian clusters; the planted means
    are the oracle the learned entries must land on."""
    rng = np.random.default_rng(seed)
    means = np.array([[2.0, 2.0, -2.0, 0.0],
                      [-2.0, 2.0, 2.0, 1.0],
                      [2.0, -2.0, 1.0, -2.0],
                      [-2.0, -2.0, -1.0, 2.0]])
    first = means[rng.integers(0, 4, size=batch)] + 0.1 * rng.standard_normal((batch, 4))
    cb = vq.init_from_samples(first, size=4, rng=rng, decay=decay)
    for _ in range(steps):
        x = means[rng.integers(0, 4, size=batch)] + 0.1 * rng.standard_normal((batch, 4))
        res = vq.quantize(x, cb)
        vq.ema_update(cb, x, res.codes)
    errs = []
    for mean in means:
        d = np.sqrt(np.sum((cb.vectors - mean) ** 2, axis=1))
        errs.append(d.min())
    return max(errs)


@pytest.mark.parametrize("seed", range(10))
def test_ema_recovers_planted_centroids(seed):
    assert planted_cluster_run(seed) < 0.05


def test_ema_entries_stay_finite_and_dimensional():
    rng = np.random.default_rng(7)
    cb = make_book(rng.normal(size=(16, 3)))
    for _ in range(50):
        x = rng.normal(size=(20, 3)) * rng.uniform(0.1, 5.0)
        vq.ema_update(cb, x, vq.quantize(x, cb).codes)
        assert cb.vectors.shape == (16, 3)
        assert np.all(np.isfinite(cb.vectors))


def test_reseed_dead_codes():
    rng = np.random.default_rng(8)
    cb = make_book(np.full((4, 2), 50.0))
    unused = np.array([2500, 0, 2500, 100])
    recent = rng.normal(size=(10, 2))
    n = vq.reseed_dead_codes(cb, recent, unused, killable_steps=2000, rng=rng)
    assert n == 2
    assert unused[0] == 0 and unused[2] == 0
    assert np.all(np.abs(cb.vectors[[0, 2]]) < 10.0)
    np.testing.assert_array_equal(cb.vectors[1], [50.0, 50.0])


# ---------------------------------------------------------------------------
# utilization
# ---------------------------------------------------------------------------

def test_utilization_empty():
    stats = vq.utilization(np.zeros(16))
    assert stats.used_count == 0
    assert stats.entropy == 0.0


def test_utilization_uniform_entropy():
    stats = vq.utilization(np.full(32, 7))
    assert stats.used_count == 32
    assert abs(stats.entropy - np.log(32)) < 1e-12
    assert abs(stats.frequencies.sum() - 1.0) < 1e-12


def test_utilization_collapse_shape():
    # a 512-entry book reporting 161 used is a legal, collapse-indicating shape
    counts = np.zeros(512)
    counts[:161] = np.arange(1, 162)
    stats = vq.utilization(counts)
    assert stats.used_count == 161
    assert stats.used_count <= 512


def test_utilization_rejects_negative():
    with pytest.raises(ValueError):
        vq.utilization(np.array([1, -2, 3]))


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

def test_mix_identical_codes_is_identity():
    cb = make_book(np.random.default_rng(9).normal(size=(6, 4)))
    np.testing.assert_array_equal(vq.mix_codes(cb, 3, 3), cb.vectors[3])


def test_mix_arithmetic_and_midpoint():
    cb = make_book([[0.0, 0.0], [2.0, 4.0]])
    mixed = vq.mix_codes(cb, 0, 1)
    np.testing.assert_array_equal(mixed, [1.0, 2.0])
    d0 = np.linalg.norm(mixed - cb.vectors[0])
    d1 = np.linalg.norm(mixed - cb.vectors[1])
    assert abs(d0 - d1) < 1e-12


def test_mix_commutative_property():
    rng = np.random.default_rng(10)
    cb = make_book(rng.normal(size=(12, 5)))
    for _ in range(50):
        i, j = rng.integers(0, 12, size=2)
        np.testing.assert_array_equal(vq.mix_codes(cb, i, j), vq.mix_codes(cb, j, i))


def test_mix_rejects_out_of_range():
    cb = make_book(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        vq.mix_codes(cb, 0, 4)
    with pytest.raises(ValueError):
        vq.mix_codes(cb, -1, 0)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_json_round_trip_is_exact_for_float32():
    rng = np.random.default_rng(11)
    cb = vq.Codebook.create(16, 8, rng)
    x = rng.standard_normal((40, 8)).astype(np.float32)
    vq.ema_update(cb, x, vq.quantize(x, cb).codes)
    restored = vq.from_json(vq.to_json(cb))
    np.testing.assert_array_equal(restored.vectors, cb.vectors)
    np.testing.assert_array_equal(restored.ema_cluster_size, cb.ema_cluster_size)
    np.testing.assert_array_equal(restored.ema_vector_sum, cb.ema_vector_sum)
    assert restored.decay == cb.decay and restored.epsilon == cb.epsilon
    # serialization is stable: a second round trip produces identical text
    assert vq.to_json(restored) == vq.to_json(cb)
