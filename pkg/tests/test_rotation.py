import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spectproj.core import ShapeError
from spectproj.rotation import padded_size, rotate_plane, rotate_plane_adjoint, rotate_stack

METHODS = ["bilinear", "three_pass_1d"]


def loop_bilinear(p, theta):
    """Per-pixel bilinear resampling about the plane center, written as plain loops."""
    n = p.shape[0]
    c0 = (n - 1) / 2
    cs, sn = math.cos(theta), math.sin(theta)
    out = np.zeros_like(p, dtype=float)
    for a in range(n):
        for b in range(n):
            xs = c0 + cs * (a - c0) + sn * (b - c0)
            ys = c0 - sn * (a - c0) + cs * (b - c0)
            i0, j0 = math.floor(xs), math.floor(ys)
            fx, fy = xs - i0, ys - j0
            for i, wi in ((i0, 1 - fx), (i0 + 1, fx)):
                for j, wj in ((j0, 1 - fy), (j0 + 1, fy)):
                    if 0 <= i < n and 0 <= j < n:
                        out[a, b] += wi * wj * p[i, j]
    return out


def matrix(fn, n, theta, method, kernels=None):
    m = np.empty((n * n, n * n))
    for j in range(n * n):
        e = np.zeros(n * n)
        e[j] = 1.0
        m[:, j] = fn(e.reshape(n, n), theta, method, kernels).ravel()
    return m


def blob(n, cx, cy, sigma):
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.exp(-((a - cx) ** 2 + (b - cy) ** 2) / (2 * sigma**2))


@pytest.mark.parametrize("method", METHODS)
def test_zero_angle_is_identity(method, kernels, rng):
    p = rng.random((7, 7))
    assert np.array_equal(rotate_plane(p, 0.0, method, kernels), p)
    assert np.array_equal(rotate_plane_adjoint(p, 0.0, method, kernels), p)


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("n", [6, 7])
def test_quarter_turn_is_a_permutation(method, n, kernels, rng):
    p = rng.random((n, n))
    c0 = (n - 1) / 2
    expect = np.empty_like(p)
    for a in range(n):
        for b in range(n):
            expect[a, b] = p[round(c0 + (b - c0)), round(c0 - (a - c0))]
    out = rotate_plane(p, math.pi / 2, method, kernels)
    assert np.array_equal(out, expect)
    # adjoint of a permutation is its inverse
    assert np.array_equal(rotate_plane_adjoint(out, math.pi / 2, method, kernels), p)


def test_impulse_at_30_degrees_matches_explicit_matrix(kernels):
    n, theta = 8, math.radians(30)
    oracle = np.column_stack([loop_bilinear(np.eye(n * n)[j].reshape(n, n), theta).ravel()
                              for j in range(n * n)])
    p = np.zeros((n, n))
    p[2, 5] = 1.0
    out = rotate_plane(p, theta, "bilinear", kernels)
    assert np.allclose(out.ravel(), oracle @ p.ravel(), atol=1e-12)
    assert np.allclose(matrix(rotate_plane, n, theta, "bilinear", kernels), oracle, atol=1e-12)


@pytest.mark.parametrize("theta", [0.37, 1.2, 2.9, 4.4, 5.9])
def test_bilinear_matches_loop_oracle(theta, kernels, rng):
    p = rng.random((9, 9))
    assert np.allclose(rotate_plane(p, theta, "bilinear", kernels), loop_bilinear(p, theta), atol=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_adjoint_dot_product(method, kernels, rng):
    x, y = rng.random((8, 8)), rng.random((8, 8))
    lhs = np.vdot(rotate_plane(x, 0.37, method, kernels), y)
    rhs = np.vdot(x, rotate_plane_adjoint(y, 0.37, method, kernels))
    assert abs(lhs - rhs) <= 1e-5 * np.linalg.norm(x) * np.linalg.norm(y)


@pytest.mark.parametrize("method", METHODS)
def test_adjoint_matrix_is_transpose_over_100_trials(method, rng):
    n = 8
    for _ in range(100):
        theta = rng.uniform(0, 2 * math.pi)
        fwd = matrix(rotate_plane, n, theta, method)
        adj = matrix(rotate_plane_adjoint, n, theta, method)
        assert np.max(np.abs(adj - fwd.T)) <= 1e-6


def test_bilinear_adjoint_is_not_inverse_rotation(rng):
    # A linear-interpolation shear by s has the shear by -s as its exact
    # transpose, so only the bilinear path makes this distinction visible.
    p = rng.random((8, 8))
    assert not np.allclose(rotate_plane_adjoint(p, 0.37), rotate_plane(p, -0.37))


@given(st.floats(0, 2 * math.pi), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from(METHODS),
       st.integers(0, 2**31))
def test_linearity(theta, alpha, beta, method, seed):
    r = np.random.default_rng(seed)
    x, y = r.random((6, 6)), r.random((6, 6))
    lhs = rotate_plane(alpha * x + beta * y, theta, method)
    rhs = alpha * rotate_plane(x, theta, method) + beta * rotate_plane(y, theta, method)
    assert np.allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("theta", [0.3, 0.8, 2.0, 3.7])
def test_bilinear_preserves_mass_of_interior_blob(theta):
    p = blob(40, 19.5, 19.5, 3.0)
    p[p < 1e-12] = 0.0  # support well inside the plane
    out = rotate_plane(p, theta, "bilinear")
    assert abs(out.sum() - p.sum()) <= 1e-4 * p.sum()


@pytest.mark.parametrize("theta", [0.3, 0.7, 1.9, 3.3, 5.0])
def test_three_pass_agrees_with_bilinear_on_smooth_images(theta):
    p = blob(32, 13.0, 18.0, 3.0) + 0.5 * blob(32, 20.0, 11.0, 2.5)
    a = rotate_plane(p, theta, "bilinear")
    b = rotate_plane(p, theta, "three_pass_1d")
    assert np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(a**2)) <= 0.03


def test_non_square_plane_rejected():
    with pytest.raises(ShapeError):
        rotate_plane(np.zeros((4, 5)), 0.1)
    with pytest.raises(ShapeError):
        rotate_plane_adjoint(np.zeros((4,)), 0.1)


@pytest.mark.parametrize("nx,ny", [(8, 8), (7, 7), (64, 64), (5, 9)])
def test_padded_plane_holds_the_slice_at_any_angle(nx, ny):
    n = padded_size(nx, ny)
    m = max(nx, ny)
    assert n >= math.ceil(math.sqrt(2) * m) and (n - m) % 2 == 0
    # corners of the slice stay inside the working plane
    half = math.hypot(nx - 1, ny - 1) / 2
    assert half <= (n - 1) / 2


@pytest.mark.parametrize("method", METHODS)
def test_stack_rotation_crops_padded_plane(method, rng):
    # for a centered slice the stack path is the padded-plane rotation cropped back
    nx = ny = 6
    n = padded_size(nx, ny)
    o = (n - nx) // 2
    x = rng.random((nx, ny, 2))
    full = np.zeros((n, n))
    full[o:o + nx, o:o + ny] = x[:, :, 1]
    ref = rotate_plane(full, 0.9, method)[o:o + nx, o:o + ny]
    assert np.allclose(rotate_stack(x, 0.9, method)[:, :, 1], ref, atol=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_backends_agree(method, rng):
    from spectproj import backend
    if not backend.HAVE_COMPILED:
        pytest.skip("compiled kernels not built")
    x = rng.random((10, 7, 3))
    for adjoint in (False, True):
        a = rotate_stack(x, 2.2, method, adjoint=adjoint, kernels=backend.get("python"))
        b = rotate_stack(x, 2.2, method, adjoint=adjoint, kernels=backend.get("compiled"))
        assert np.allclose(a, b, atol=1e-13)
