import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spectproj.core import ParameterError, ShapeError, ValidationError
from spectproj.psf import (FWHM_PER_SIGMA, convolve_slice, convolve_slice_adjoint, delta_psf,
                           gaussian_kernel, gaussian_psf, linear_fwhm)
from spectproj.projector import random_symmetric_kernels


def spatial_conv(plane, kernel):
    """Replicate-padded correlation with a centered kernel, by direct summation."""
    n1, n2 = plane.shape
    px, pz = kernel.shape
    hx, hz = px // 2, pz // 2
    out = np.zeros((n1, n2))
    for i in range(n1):
        for k in range(n2):
            s = 0.0
            for a in range(px):
                for b in range(pz):
                    ii = min(max(i + a - hx, 0), n1 - 1)
                    kk = min(max(k + b - hz, 0), n2 - 1)
                    s += kernel[a, b] * plane[ii, kk]
            out[i, k] = s
    return out


def conv_matrix(fn, shape, kernel, kernels=None):
    n = shape[0] * shape[1]
    return np.column_stack([fn(np.eye(n)[j].reshape(shape), kernel, kernels).ravel() for j in range(n)])


def test_tiny_fwhm_gives_delta():
    k = gaussian_kernel(1.0, (5, 5), 4.8)
    assert k[2, 2] == 1.0 and k.sum() == 1.0


def test_unit_sigma_kernel_is_symmetric_and_normalized():
    k = gaussian_kernel(FWHM_PER_SIGMA * 4.8, (5, 5), 4.8)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    assert k[2, 2] == k.max()
    assert np.allclose(k, k[::-1]) and np.allclose(k, k[:, ::-1]) and np.allclose(k, k.T)


def test_second_moment_matches_sigma():
    fwhm = linear_fwhm(8, 4.8, 12.0, 0.15)
    psf = gaussian_psf(fwhm, (15, 15), 4.8, 2)
    off = np.arange(15) - 7
    for j, f in enumerate(fwhm):
        sigma = f / FWHM_PER_SIGMA / 4.8
        if sigma < 1:
            continue
        k = psf.kernels[:, :, j, 0]
        var = np.sum(k.sum(axis=1) * off**2)
        assert var == pytest.approx(sigma**2, rel=0.05)


def test_even_kernel_and_bad_fwhm_rejected():
    with pytest.raises(ParameterError):
        gaussian_psf([5.0], (4, 3), 4.8, 1)
    with pytest.raises(ParameterError):
        gaussian_psf([0.0], (3, 3), 4.8, 1)


def test_delta_kernel_is_identity(kernels, rng):
    p = rng.random((6, 6))
    d = delta_psf(1, 1, (3, 5)).kernels[:, :, 0, 0]
    assert np.allclose(convolve_slice(p, d, kernels), p, atol=1e-14)
    assert np.allclose(convolve_slice_adjoint(p, d, kernels), p, atol=1e-14)


def test_constant_plane_is_preserved(kernels, rng):
    k = random_symmetric_kernels(rng, 5, 3, ())
    out = convolve_slice(np.full((7, 7), 3.25), k, kernels)
    assert np.allclose(out, 3.25, rtol=1e-14)


@pytest.mark.parametrize("size", [(3, 3), (5, 3), (7, 9)])
def test_fft_matches_spatial_oracle(size, kernels, rng):
    p = rng.random((8, 8))
    p /= np.linalg.norm(p)
    k = random_symmetric_kernels(rng, *size, ())
    assert np.allclose(convolve_slice(p, k, kernels), spatial_conv(p, k), atol=1e-5)
    assert np.max(np.abs(convolve_slice(p, k, kernels) - spatial_conv(p, k))) < 1e-13


def test_adjoint_dot_product_5x3(kernels, rng):
    x, y = rng.random((8, 8)), rng.random((8, 8))
    k = random_symmetric_kernels(rng, 5, 3, ())
    lhs = np.vdot(convolve_slice(x, k, kernels), y)
    rhs = np.vdot(x, convolve_slice_adjoint(y, k, kernels))
    assert abs(lhs - rhs) <= 1e-5 * np.linalg.norm(x) * np.linalg.norm(y)


@given(st.integers(0, 2**31), st.sampled_from([(1, 3), (3, 3), (5, 3), (5, 7)]))
def test_adjoint_matrix_is_transpose(seed, size):
    r = np.random.default_rng(seed)
    k = random_symmetric_kernels(r, *size, ())
    fwd = conv_matrix(convolve_slice, (5, 4), k)
    adj = conv_matrix(convolve_slice_adjoint, (5, 4), k)
    assert np.max(np.abs(adj - fwd.T)) <= 1e-6
    oracle = np.column_stack([spatial_conv(np.eye(20)[j].reshape(5, 4), k).ravel() for j in range(20)])
    assert np.max(np.abs(adj - oracle.T)) <= 1e-6


def test_single_cell_plane_scales_by_kernel_sum(kernels, rng):
    k = 0.8 * random_symmetric_kernels(rng, 1, 1, ())
    assert convolve_slice_adjoint(np.array([[2.0]]), k, kernels)[0, 0] == pytest.approx(1.6)
    k3 = 0.8 * random_symmetric_kernels(rng, 1, 1, ())
    assert convolve_slice(np.array([[2.0]]), k3, kernels)[0, 0] == pytest.approx(1.6)


def test_adjoint_rejects_asymmetric_kernel():
    k = np.zeros((3, 3))
    k[0, 1] = 1.0
    with pytest.raises(ValidationError):
        convolve_slice_adjoint(np.ones((4, 4)), k)


def test_kernel_larger_than_padded_plane():
    with pytest.raises(ShapeError):
        convolve_slice(np.ones((3, 3)), np.ones((7, 3)) / 21)
