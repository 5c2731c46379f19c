"""Reference constructions built from the stage definitions, not from the package operators."""

import math

import numpy as np


def rotation_matrix(nx, ny, npad, theta):
    """Bilinear rotation of an (nx, ny) slice embedded in the centered padded plane, cropped back.

    Acts on the C-order flattening ``i * ny + j``.
    """
    ox, oy = (npad - nx) // 2, (npad - ny) // 2
    c0 = (npad - 1) / 2
    cs, sn = math.cos(theta), math.sin(theta)
    m = np.zeros((nx * ny, nx * ny))
    for a in range(ox, ox + nx):
        for b in range(oy, oy + ny):
            xs = c0 + cs * (a - c0) + sn * (b - c0)
            ys = c0 - sn * (a - c0) + cs * (b - c0)
            i0, j0 = math.floor(xs), math.floor(ys)
            fx, fy = xs - i0, ys - j0
            for i, wi in ((i0, 1 - fx), (i0 + 1, fx)):
                for j, wj in ((j0, 1 - fy), (j0 + 1, fy)):
                    si, sj = i - ox, j - oy
                    if 0 <= si < nx and 0 <= sj < ny:
                        m[(a - ox) * ny + (b - oy), si * ny + sj] += wi * wj
    return m


def survival(mu, dy):
    """exp(-dy * (mu/2 + sum of mu beyond the voxel toward the detector)), by explicit sums."""
    ny = mu.shape[1]
    out = np.empty_like(mu, dtype=float)
    for j in range(ny):
        out[:, j] = np.exp(-dy * (0.5 * mu[:, j] + mu[:, j + 1:].sum(axis=1)))
    return out


def clamped_conv(plane, kernel):
    """Replicate-padded centered correlation over the first two axes of ``plane``."""
    n1, n2 = plane.shape[:2]
    px, pz = kernel.shape
    out = np.zeros_like(plane, dtype=float)
    for a in range(px):
        ia = np.clip(np.arange(n1) + a - px // 2, 0, n1 - 1)
        for b in range(pz):
            kb = np.clip(np.arange(n2) + b - pz // 2, 0, n2 - 1)
            out += kernel[a, b] * plane[ia][:, kb]
    return out


def dense_system_matrix(shape, npad, angles, mu, dy, psf):
    """Dense bilinear-rotation projector; rows and columns in i-fastest order."""
    nx, ny, nz = shape
    n = nx * ny * nz
    cols = np.eye(n).reshape(nx, ny, nz, n, order="F")
    blocks = []
    for l, theta in enumerate(angles):
        r = rotation_matrix(nx, ny, npad, theta)
        rot = np.einsum("pq,qkc->pkc", r, cols.reshape(nx * ny, nz, n)).reshape(nx, ny, nz, n)
        if mu is not None:
            mrot = (r @ mu.reshape(nx * ny, nz)).reshape(nx, ny, nz)
            rot = rot * survival(mrot, dy)[..., None]
        det = np.zeros((nx, nz, n))
        for j in range(ny):
            det += clamped_conv(rot[:, j], psf[:, :, j, l])
        blocks.append(det.reshape(nx * nz, n, order="F"))
    return np.vstack(blocks)
