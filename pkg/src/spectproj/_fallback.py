"""Pure numpy implementation of the projector kernels.

Same interface and arithmetic as the compiled ``_kernels`` module, but
vectorized over whole planes. It allocates temporaries on every call and
ignores the thread count; views are processed in ascending order.
"""

import numpy as np

BILINEAR = 0
THREE_PASS = 1

_QUARTERS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def _bilinear_taps(nx, ny, cx, cy, c, s):
    a, b = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    dx, dy = a - cx, b - cy
    xs = cx + c * dx + s * dy
    ys = cy - s * dx + c * dy
    a0, b0 = np.floor(xs).astype(np.intp), np.floor(ys).astype(np.intp)
    wx, wy = xs - a0, ys - b0
    taps = []
    for da, wa in ((0, 1.0 - wx), (1, wx)):
        for db, wb in ((0, 1.0 - wy), (1, wy)):
            ai, bi = a0 + da, b0 + db
            ok = (ai >= 0) & (ai < nx) & (bi >= 0) & (bi < ny)
            w = np.where(ok, wa * wb, 0.0)
            taps.append((np.where(ok, ai * ny + bi, 0).ravel(), w.ravel()))
    return taps


def rot_bilinear(src, cx, cy, c, s, adjoint):
    nx, ny, nz = src.shape
    flat = src.reshape(nx * ny, nz)
    out = np.zeros_like(flat)
    for idx, w in _bilinear_taps(nx, ny, cx, cy, c, s):
        if adjoint:
            np.add.at(out, idx, w[:, None] * flat)
        else:
            out += w[:, None] * flat[idx]
    return out.reshape(nx, ny, nz)


def _shear(f, factor, axis, adjoint):
    n = f.shape[0]
    shift = factor * (np.arange(n) - 0.5 * (n - 1))
    fs = np.floor(shift).astype(np.intp)
    w = shift - fs
    pos = np.arange(n)
    g = np.moveaxis(f, axis, 0)  # g[pos, line]
    if adjoint:
        taps = ((pos[:, None] - fs[None, :], 1.0 - w), (pos[:, None] - fs[None, :] - 1, w))
    else:
        taps = ((pos[:, None] + fs[None, :], 1.0 - w), (pos[:, None] + fs[None, :] + 1, w))
    out = np.zeros_like(g)
    line = np.broadcast_to(np.arange(n)[None, :], (n, n))
    for p, wt in taps:
        ok = (p >= 0) & (p < n)
        wt = np.where(ok, wt[None, :], 0.0)
        out += wt[..., None] * g[np.where(ok, p, 0), line]
    return np.moveaxis(out, 0, axis)


def _quarter_index(n, nx, ny, ox, oy, q):
    cq, sq = _QUARTERS[q % 4]
    bx = ((n - 1) * (1 - cq - sq)) // 2
    by = ((n - 1) * (1 + sq - cq)) // 2
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    xs = bx + cq * a + sq * b - ox
    ys = by - sq * a + cq * b - oy
    ok = (xs >= 0) & (xs < nx) & (ys >= 0) & (ys < ny)
    return ok, xs, ys


def rot_threepass(src, n, q, tan_half, sin_phi, adjoint):
    nx, ny, nz = src.shape
    ox, oy = (n - nx) // 2, (n - ny) // 2
    ok, xs, ys = _quarter_index(n, nx, ny, ox, oy, q)
    if not adjoint:
        P = np.zeros((n, n, nz))
        P[ok] = src[xs[ok], ys[ok]]
        Q = _shear(P, tan_half, 0, False)
        P = _shear(Q, -sin_phi, 1, False)
        Q = _shear(P, tan_half, 0, False)
        return Q[ox:ox + nx, oy:oy + ny].copy()
    Q = np.zeros((n, n, nz))
    Q[ox:ox + nx, oy:oy + ny] = src
    P = _shear(Q, tan_half, 0, True)
    Q = _shear(P, -sin_phi, 1, True)
    P = _shear(Q, tan_half, 0, True)
    out = np.zeros((nx, ny, nz))
    out[xs[ok], ys[ok]] += P[ok]
    return out


def rotate(src, out, npad, method, cos_t, sin_t, q, tan_half, sin_phi, adjoint):
    src = np.asarray(src, dtype=np.float64)
    nx, ny, _ = src.shape
    if method == BILINEAR:
        ox, oy = (npad - nx) // 2, (npad - ny) // 2
        cx, cy = 0.5 * (npad - 1) - ox, 0.5 * (npad - 1) - oy
        out[...] = rot_bilinear(src, cx, cy, cos_t, sin_t, adjoint)
    else:
        out[...] = rot_threepass(src, npad, q, tan_half, sin_phi, adjoint)


def attenuation_factors(mu, dy):
    # tail[j] = mu[j+1] + mu[j+2] + ..., accumulated from the detector side
    rc = np.cumsum(mu[:, ::-1, :], axis=1)[:, ::-1, :]
    tail = np.zeros_like(mu)
    tail[:, :-1, :] = rc[:, 1:, :]
    return np.exp(-dy * (0.5 * mu + tail))


def attenuation(mu, dy, out):
    out[...] = attenuation_factors(np.asarray(mu, dtype=np.float64), dy)


def fft2(re, im, inverse):
    z = np.asarray(re) + 1j * np.asarray(im)
    z = np.fft.ifft2(z) * z.size if inverse else np.fft.fft2(z)
    re[...] = z.real
    im[...] = z.imag


def _fold(p, h, n, axis):
    """Adjoint of edge padding by ``h`` cells on both sides of ``axis``."""
    p = np.moveaxis(p, axis, 0)
    out = p[h:h + n].copy()
    out[0] += p[:h].sum(axis=0)
    out[n - 1] += p[h + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


class Workspace:
    def __init__(self, plan, nthreads=1):
        self.nthreads = nthreads
        self.arrays = {}

    @property
    def nbytes(self):
        return 0


class Plan:
    def __init__(self, shape, npad, mu, dy, psf, view_invariant, rot_params, method):
        self.nx, self.ny, self.nz = shape
        self.npad = npad
        self.ox, self.oy = (npad - self.nx) // 2, (npad - self.ny) // 2
        self.cx = 0.5 * (npad - 1) - self.ox
        self.cy = 0.5 * (npad - 1) - self.oy
        self.method = method
        self.dy = dy
        self.has_mu = mu is not None
        self.mu = None if mu is None else np.ascontiguousarray(mu, dtype=np.float64)
        self.psf = np.ascontiguousarray(psf, dtype=np.float64)
        self.px, self.pz, _, self.nview = self.psf.shape
        self.cos_t, self.sin_t, self.q, self.tan_half, self.sin_phi = (np.asarray(a) for a in rot_params)
        self.fft_shape = (1 << (self.nx + self.px - 2).bit_length(),
                          1 << (self.nz + self.pz - 2).bit_length())
        self.cached = view_invariant
        self._spec = self._spectra(0) if view_invariant else None

    def new_workspace(self, nthreads=1):
        return Workspace(self, nthreads)

    def _spectra(self, l):
        lx, lz = self.fft_shape
        kp = np.zeros((self.ny, lx, lz))
        kp[:, :self.px, :self.pz] = np.moveaxis(self.psf[:, :, :, l], 2, 0)
        return np.fft.fft2(kp)

    def _rotate(self, l, src, adjoint):
        if self.method == BILINEAR:
            return rot_bilinear(src, self.cx, self.cy, self.cos_t[l], self.sin_t[l], adjoint)
        return rot_threepass(src, self.npad, int(self.q[l]), self.tan_half[l], self.sin_phi[l], adjoint)

    def _mubar(self, l):
        return attenuation_factors(self._rotate(l, self.mu, False), self.dy)

    def forward(self, x, out, ws, nthreads):
        x = np.asarray(x, dtype=np.float64)
        hx, hz = (self.px - 1) // 2, (self.pz - 1) // 2
        for l in range(self.nview):
            xr = self._rotate(l, x, False)
            if self.has_mu:
                xr = xr * self._mubar(l)
            planes = np.pad(np.moveaxis(xr, 1, 0), ((0, 0), (hx, hx), (hz, hz)), mode="edge")
            spec = self._spec if self.cached else self._spectra(l)
            acc = (np.fft.fft2(planes, s=self.fft_shape) * spec).sum(axis=0)
            v = np.fft.ifft2(acc).real
            out[:, :, l] = v[self.px - 1:self.px - 1 + self.nx, self.pz - 1:self.pz - 1 + self.nz]

    def back(self, v, out, ws, nthreads):
        v = np.asarray(v, dtype=np.float64)
        hx, hz = (self.px - 1) // 2, (self.pz - 1) // 2
        mx, mz = self.nx + self.px - 1, self.nz + self.pz - 1
        acc = np.zeros((self.nx, self.ny, self.nz))
        for l in range(self.nview):
            spec = self._spec if self.cached else self._spectra(l)
            V = np.fft.fft2(v[:, :, l], s=self.fft_shape)
            p = np.fft.ifft2(V[None] * spec).real[:, :mx, :mz]
            p = _fold(_fold(p, hx, self.nx, 1), hz, self.nz, 2)
            xr = np.moveaxis(p, 0, 1)
            if self.has_mu:
                xr = xr * self._mubar(l)
            acc += self._rotate(l, xr, True)
        out[...] = acc


def conv2d(plane, kernel, out, adjoint):
    n1, n2 = plane.shape
    plan = Plan((n1, 1, n2), n1, None, 1.0, np.asarray(kernel)[:, :, None, None], True,
                ([1.0], [0.0], [0], [0.0], [0.0]), BILINEAR)
    if adjoint:
        res = np.zeros((n1, 1, n2))
        plan.back(np.asarray(plane).reshape(n1, n2, 1), res, None, 1)
        out[...] = res[:, 0, :]
    else:
        res = np.zeros((n1, n2, 1))
        plan.forward(np.asarray(plane)[:, None, :], res, None, 1)
        out[...] = res[:, :, 0]
