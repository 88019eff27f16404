import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepdot.errors import InvalidArgument
from deepdot.framelet import (
    circular_convolve,
    decode,
    encode,
    flip_filter,
    framelet_roundtrip,
    hankel_lift,
    hankel_unlift,
    lifted_reconstruction,
)


def test_small_hankel():
    np.testing.assert_array_equal(hankel_lift(np.array([1, 2, 3]), 2), [[1, 2], [2, 3], [3, 1]])
    f = np.arange(5.0)
    np.testing.assert_array_equal(hankel_lift(f, 1)[:, 0], f)


@pytest.mark.parametrize("d", [0, 6])
def test_window_out_of_range(d):
    with pytest.raises(InvalidArgument):
        hankel_lift(np.ones(5), d)


def test_hankel_entries_wrap():
    f = np.random.default_rng(0).normal(size=11)
    H = hankel_lift(f, 4)
    for n in range(11):
        for j in range(4):
            assert H[n, j] == f[(n + j) % 11]


@given(st.integers(1, 40), st.data())
@settings(max_examples=60, deadline=None)
def test_hankel_product_is_convolution(N, data):
    d = data.draw(st.integers(1, N))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    f, psi = rng.normal(size=N), rng.normal(size=d)
    lhs = hankel_lift(f, d) @ psi
    np.testing.assert_allclose(lhs, circular_convolve(f, flip_filter(psi, N)), atol=1e-12)


def test_circular_convolve_brute_force():
    rng = np.random.default_rng(1)
    f, v = rng.normal(size=9), rng.normal(size=4)
    ref = [sum(f[(n - k) % 9] * v[k] for k in range(4)) for n in range(9)]
    np.testing.assert_allclose(circular_convolve(f, v), ref, atol=1e-14)


def test_unlift_inverts_lift():
    f = np.random.default_rng(2).normal(size=17)
    np.testing.assert_allclose(hankel_unlift(hankel_lift(f, 5)), f, atol=1e-14)


def test_identity_roundtrip():
    f = np.random.default_rng(3).normal(size=64)
    I64, I4 = np.eye(64), np.eye(4)
    np.testing.assert_allclose(framelet_roundtrip(f, 4, I64, I64, I4, I4), f, atol=1e-10)


def test_orthogonal_frames_roundtrip():
    rng = np.random.default_rng(4)
    f = rng.normal(size=32)
    Phi, _ = np.linalg.qr(rng.normal(size=(32, 32)))
    Psi, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    np.testing.assert_allclose(framelet_roundtrip(f, 6, Phi, Phi, Psi, Psi), f, atol=1e-10)
    C = encode(f, 6, Phi, Psi)
    np.testing.assert_allclose(C, Phi.T @ hankel_lift(f, 6) @ Psi, atol=1e-12)
    np.testing.assert_allclose(decode(C, 6, Phi, Psi), f, atol=1e-10)


def test_lifted_identity():
    rng = np.random.default_rng(5)
    f = rng.normal(size=20)
    Phi, _ = np.linalg.qr(rng.normal(size=(20, 20)))
    Psi, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    np.testing.assert_allclose(lifted_reconstruction(f, 5, Phi, Phi, Psi, Psi), hankel_lift(f, 5),
                               atol=1e-12)


def test_rank_deficient_row_space():
    f = np.full(16, 2.5)
    psi = np.ones((4, 1)) / 2.0
    I = np.eye(16)
    np.testing.assert_allclose(lifted_reconstruction(f, 4, I, I, psi, psi), hankel_lift(f, 4),
                               atol=1e-12)
    np.testing.assert_allclose(framelet_roundtrip(f, 4, I, I, psi, psi), f, atol=1e-10)


def test_incomplete_frame_is_not_exact():
    f = np.random.default_rng(6).normal(size=16)
    psi = np.ones((4, 1)) / 2.0
    I = np.eye(16)
    assert np.abs(framelet_roundtrip(f, 4, I, I, psi, psi) - f).max() > 1e-3


def test_frame_shape_errors():
    f = np.ones(8)
    with pytest.raises(InvalidArgument):
        framelet_roundtrip(f, 2, np.eye(7), np.eye(7), np.eye(2), np.eye(2))
    with pytest.raises(InvalidArgument):
        framelet_roundtrip(f, 2, np.eye(8), np.eye(8), np.eye(3), np.eye(3))
