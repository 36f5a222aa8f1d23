import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gsq.tensor import (
    GUMBEL_U_MAX,
    GUMBEL_U_MIN,
    RngStream,
    TensorError,
    as_matrix,
    decode_tensor,
    encode_tensor,
    frobenius_sq,
    gumbel_from_uniform,
    matmul,
    read_tensor,
    sample_gaussian,
    sample_gumbel,
    write_tensor,
)

EULER_GAMMA = 0.5772156649


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i][t]) * float(b[t][j])
            out[i][j] = acc
    return out


def test_matmul_identity_left():
    a = np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)
    assert np.array_equal(matmul(np.eye(2), a), a)


def test_matmul_hand_example():
    assert matmul([[1, 2], [3, 4]], [[1], [1]]).tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((8, 8)).astype(np.float32)
    b = rng.standard_normal((8, 8)).astype(np.float32)
    ref = np.array(naive_matmul(a.tolist(), b.tolist()))
    got = matmul(a, b)
    assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-3)) <= 1e-6


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-100, 100, width=32)))
def test_identity_is_exact_on_both_sides(a):
    assert np.array_equal(matmul(a, np.eye(a.shape[1])), a)
    assert np.array_equal(matmul(np.eye(a.shape[0]), a), a)


def test_matmul_shape_mismatch():
    with pytest.raises(TensorError, match="mismatch"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_vectors():
    with pytest.raises(TensorError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_overflow_is_reported():
    big = np.full((1, 2), 3e38, dtype=np.float32)
    with pytest.raises(TensorError, match="non-finite"):
        matmul(big, big.T)


def test_as_matrix_rejects_nan():
    with pytest.raises(TensorError):
        as_matrix([[1.0, float("nan")]])


def test_frobenius():
    a = np.array([[3.0, 4.0]])
    assert frobenius_sq(a) == 25.0
    assert frobenius_sq(np.zeros((3, 2))) == 0.0
    assert frobenius_sq(a - a) == 0.0


def test_gumbel_fixed_point():
    assert gumbel_from_uniform(1 / math.e) == pytest.approx(0.0, abs=1e-15)


def test_gumbel_transform_is_finite_at_edges():
    g = gumbel_from_uniform([0.0, 1.0, GUMBEL_U_MIN, GUMBEL_U_MAX])
    assert np.all(np.isfinite(g))


def test_gumbel_mean_is_euler_gamma():
    g = sample_gumbel(RngStream(7), 10**6).astype(np.float64)
    assert abs(g.mean() - EULER_GAMMA) <= 0.01
    assert abs(g.var() - math.pi**2 / 6) <= 0.02


def test_gaussian_moments():
    z = sample_gaussian(RngStream(8), 10**6).astype(np.float64)
    assert abs(z.mean()) <= 0.01
    assert abs(z.var() - 1.0) <= 0.02


@pytest.mark.parametrize("n", [0, (0, 3)])
def test_sampling_needs_positive_count(n):
    with pytest.raises(ValueError):
        sample_gumbel(RngStream(0), n)


def test_replay_same_state_is_bitwise_identical():
    a, b = RngStream(3, 5, 11), RngStream(3, 5, 11)
    assert np.array_equal(a.gumbel((4, 4)), b.gumbel((4, 4)))
    assert np.array_equal(a.gaussian(9), b.gaussian(9))
    assert a.counter == b.counter == 13


def test_fork_replays_without_advancing_parent():
    r = RngStream(1)
    r.uniform(3)
    f = r.fork()
    assert np.array_equal(f.uniform(5), r.uniform(5))


def test_each_call_consumes_one_counter():
    r = RngStream(2)
    first, second = r.uniform(4), r.uniform(4)
    assert not np.array_equal(first, second)
    assert np.array_equal(RngStream(2, 0, 1).uniform(4), second)


def test_derived_streams_are_uncorrelated():
    root = RngStream(9)
    a = root.derive("a").gaussian(20000).astype(np.float64)
    b = root.derive("b").gaussian(20000).astype(np.float64)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03
    assert root.derive("a").stream == RngStream(9).derive("a").stream


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_gsqt_roundtrip(a):
    back = decode_tensor(encode_tensor(a))
    assert back.shape == a.shape
    assert np.array_equal(back, a)


def test_gsqt_header_layout():
    buf = encode_tensor(np.zeros((2, 3), np.float32))
    assert buf[:4] == b"GSQT"
    assert len(buf) == 4 + 2 + 1 + 1 + 2 * 8 + 6 * 4


@pytest.mark.parametrize(
    "mutate, msg",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x02\x00" + b[6:], "version"),
        (lambda b: b[:6] + b"\x07" + b[7:], "dtype"),
        (lambda b: b[:-1], "bytes"),
        (lambda b: b + b"\x00", "bytes"),
        (lambda b: b[:6], "magic"),
        (lambda b: b[:-4] + np.float32("inf").tobytes(), "non-finite"),
    ],
)
def test_gsqt_rejects_malformed(mutate, msg):
    buf = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(TensorError, match=msg):
        decode_tensor(mutate(buf))


def test_write_tensor_is_atomic_and_readable(tmp_path):
    p = tmp_path / "a.gsqt"
    write_tensor(p, np.arange(6, dtype=np.float32).reshape(2, 3))
    assert read_tensor(p).tolist() == [[0, 1, 2], [3, 4, 5]]
    assert [q.name for q in tmp_path.iterdir()] == ["a.gsqt"]
