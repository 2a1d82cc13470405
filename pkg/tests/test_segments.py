import numpy as np

from forplane import segments


def loop_exclusive(x, ids):
    out = np.zeros_like(x, dtype=np.float64)
    acc = {}
    for i, (v, r) in enumerate(zip(x, ids)):
        out[i] = acc.get(r, 0.0)
        acc[r] = acc.get(r, 0.0) + v
    return out


def test_exclusive_cumsum_matches_loop():
    rng = np.random.default_rng(0)
    ids = np.sort(rng.integers(0, 10, 100))
    x = rng.standard_normal(100)
    np.testing.assert_allclose(segments.exclusive_cumsum(x, ids),
                               loop_exclusive(x, ids), rtol=1e-12)


def test_exclusive_cumsum_empty():
    out = segments.exclusive_cumsum(np.array([]), np.array([], dtype=np.int64))
    assert out.size == 0


def test_segment_sum_with_holes():
    ids = np.array([0, 0, 3, 3, 3])
    x = np.array([1.0, 2.0, 1.0, 1.0, 1.0])
    out = segments.segment_sum(x, ids, 5)
    np.testing.assert_array_equal(out, [3, 0, 0, 3, 0])


def test_segment_sum_2d():
    ids = np.array([0, 1, 1])
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = segments.segment_sum(x, ids, 3)
    np.testing.assert_array_equal(out, [[1, 2], [8, 10], [0, 0]])


def test_suffix_sum_matches_loop():
    rng = np.random.default_rng(1)
    ids = np.sort(rng.integers(0, 6, 50))
    x = rng.standard_normal(50)
    got = segments.suffix_sum(x, ids, 6)
    expect = np.zeros(50)
    for i in range(50):
        expect[i] = x[(ids == ids[i]) & (np.arange(50) >= i)].sum()
    np.testing.assert_allclose(got, expect, rtol=1e-12)
