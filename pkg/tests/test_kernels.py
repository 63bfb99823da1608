import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mtnat import kernels
from mtnat.kernels import _numpy as npk

nbk = pytest.importorskip("mtnat.kernels._numba")

rows = st.integers(1, 9)
cols = st.integers(1, 17)
values = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def matrices(r, c):
    return hnp.arrays(np.float64, (r, c), elements=values)


def close(a, b, scale=1.0):
    # absolute slack grows with operand magnitude: cancellation leaves ~eps * scale
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12 * max(scale, 1.0))


@settings(max_examples=60, deadline=None)
@given(st.data(), rows, cols)
def test_softmax_backends_agree(data, r, c):
    x = data.draw(matrices(r, c))
    g = data.draw(matrices(r, c))
    y = npk.softmax_rows(x)
    close(nbk.softmax_rows(x), y)
    close(nbk.softmax_rows_backward(y, g), npk.softmax_rows_backward(y, g))


@settings(max_examples=60, deadline=None)
@given(st.data(), rows, cols)
def test_layer_norm_backends_agree(data, r, c):
    x = data.draw(matrices(r, c))
    gamma = data.draw(hnp.arrays(np.float64, c, elements=values))
    beta = data.draw(hnp.arrays(np.float64, c, elements=values))
    g = data.draw(matrices(r, c))
    a, b = npk.layer_norm_rows(x, gamma, beta, 1e-5), nbk.layer_norm_rows(x, gamma, beta, 1e-5)
    for u, v in zip(a, b):
        close(u, v, np.abs(x).max() * a[2].max() * (1 + np.abs(gamma).max()))
    scale = c * a[2].max() * np.abs(g).max() * np.abs(gamma).max() * 10
    for u, v in zip(npk.layer_norm_rows_backward(g, a[1], a[2], gamma), nbk.layer_norm_rows_backward(g, a[1], a[2], gamma)):
        close(u, v, scale)


@settings(max_examples=60, deadline=None)
@given(st.data(), rows, st.integers(2, 12), st.floats(0.0, 0.5))
def test_cross_entropy_backends_agree(data, r, c, smoothing):
    logits = data.draw(matrices(r, c))
    targets = np.array(data.draw(st.lists(st.integers(0, c - 1), min_size=r, max_size=r)), dtype=np.int64)
    ignore = int(targets[0]) if r > 1 else -1
    a = npk.cross_entropy_rows(logits, targets, ignore, smoothing)
    b = nbk.cross_entropy_rows(logits, targets, ignore, smoothing)
    assert a[1] == b[1]
    close(a[0], b[0])
    close(a[2], b[2])


@settings(max_examples=40, deadline=None)
@given(st.data(), st.integers(1, 6), st.integers(1, 20), st.integers(1, 5))
def test_scatter_add_backends_agree(data, n, m, d):
    ids = np.array(data.draw(st.lists(st.integers(0, n - 1), min_size=m, max_size=m)), dtype=np.int64)
    g = data.draw(matrices(m, d))
    close(nbk.scatter_add_rows(n, ids, g), npk.scatter_add_rows(n, ids, g))


def test_bootstrap_sums_backends_agree():
    rng = np.random.default_rng(0)
    stats = rng.integers(0, 9, size=(30, 10)).astype(np.float64)
    idx = rng.integers(0, 30, size=(50, 30))
    # integer-valued sums are exact in both backends
    np.testing.assert_array_equal(nbk.bootstrap_sums(stats, idx), npk.bootstrap_sums(stats, idx))


def test_backend_flag_is_exposed():
    assert kernels.BACKEND in ("numba", "numpy")
