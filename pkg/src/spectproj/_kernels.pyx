# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, nonecheck=False
"""Compiled projector kernels.

Everything here works on double precision work buffers; the public entry
points accept float32 or float64 arrays and cast at the boundary. The
numpy module ``_fallback`` implements the same interface.
"""

import numpy as np

from cython.parallel cimport prange
from libc.math cimport floor, exp
from libc.string cimport memset, memcpy

ctypedef fused real:
    float
    double

cdef enum:
    BILINEAR = 0
    THREE_PASS = 1


# ---------------------------------------------------------------------------
# FFT (radix-2, split real/imaginary storage)
# ---------------------------------------------------------------------------

cdef struct FftTab:
    Py_ssize_t n
    const double* wc
    const double* ws
    const Py_ssize_t* rev


cdef void fft1(double* re, double* im, Py_ssize_t stride, FftTab* tab,
               bint inverse) noexcept nogil:
    cdef Py_ssize_t n = tab.n
    cdef Py_ssize_t i, j, size, half, step, start, k, a, b
    cdef double tr, ti, wr, wi
    for i in range(n):
        j = tab.rev[i]
        if j > i:
            tr = re[i * stride]; re[i * stride] = re[j * stride]; re[j * stride] = tr
            ti = im[i * stride]; im[i * stride] = im[j * stride]; im[j * stride] = ti
    size = 2
    while size <= n:
        half = size >> 1
        step = n // size
        start = 0
        while start < n:
            for k in range(half):
                wr = tab.wc[k * step]
                wi = tab.ws[k * step]
                if not inverse:
                    wi = -wi
                a = (start + k) * stride
                b = a + half * stride
                tr = wr * re[b] - wi * im[b]
                ti = wr * im[b] + wi * re[b]
                re[b] = re[a] - tr
                im[b] = im[a] - ti
                re[a] = re[a] + tr
                im[a] = im[a] + ti
            start = start + size
        size <<= 1


cdef void fft2_forward(double* re, double* im, FftTab* tx, FftTab* tz,
                       Py_ssize_t nrows) noexcept nogil:
    # rows >= nrows are known to be zero and skip the row pass
    cdef Py_ssize_t i, k, lz = tz.n
    for i in range(nrows):
        fft1(re + i * lz, im + i * lz, 1, tz, 0)
    for k in range(lz):
        fft1(re + k, im + k, lz, tx, 0)


cdef void fft2_inverse(double* re, double* im, FftTab* tx, FftTab* tz,
                       Py_ssize_t r0, Py_ssize_t r1) noexcept nogil:
    # unnormalized; only rows [r0, r1) of the result are completed
    cdef Py_ssize_t i, k, lz = tz.n
    for k in range(lz):
        fft1(re + k, im + k, lz, tx, 1)
    for i in range(r0, r1):
        fft1(re + i * lz, im + i * lz, 1, tz, 1)


# ---------------------------------------------------------------------------
# in-plane rotation; stacks are laid out [a][b][k] with k contiguous
# ---------------------------------------------------------------------------

cdef inline void _axpy(double* y, const double* x, double w, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(n):
        y[k] = y[k] + w * x[k]


cdef void rot_bilinear(const double* src, double* dst, Py_ssize_t nx, Py_ssize_t ny,
                       Py_ssize_t nz, double cx, double cy, double c, double s,
                       bint adjoint) noexcept nogil:
    """Forward: dst = R src (gather). Adjoint: dst = R^T src (scatter)."""
    cdef Py_ssize_t a, b, a0, b0, ai, bi, da, db
    cdef double dx, dy, xs, ys, wx, wy, wa, w
    if adjoint:
        memset(dst, 0, nx * ny * nz * sizeof(double))
    for a in range(nx):
        dx = a - cx
        for b in range(ny):
            dy = b - cy
            xs = cx + c * dx + s * dy
            ys = cy - s * dx + c * dy
            a0 = <Py_ssize_t>floor(xs)
            b0 = <Py_ssize_t>floor(ys)
            wx = xs - a0
            wy = ys - b0
            if not adjoint:
                memset(dst + (a * ny + b) * nz, 0, nz * sizeof(double))
            for da in range(2):
                ai = a0 + da
                if ai < 0 or ai >= nx:
                    continue
                wa = wx if da else 1.0 - wx
                for db in range(2):
                    bi = b0 + db
                    if bi < 0 or bi >= ny:
                        continue
                    w = wa * (wy if db else 1.0 - wy)
                    if w == 0.0:
                        continue
                    if adjoint:
                        _axpy(dst + (ai * ny + bi) * nz, src + (a * ny + b) * nz, w, nz)
                    else:
                        _axpy(dst + (a * ny + b) * nz, src + (ai * ny + bi) * nz, w, nz)


cdef void _shear(const double* f, double* g, Py_ssize_t n, Py_ssize_t nz,
                 double factor, int axis, bint adjoint) noexcept nogil:
    """1D linear-interpolation shear of an n x n stack along ``axis``.

    Forward: g(a, b) = f(a + factor*(b - c), b) for axis 0 (roles swapped
    for axis 1). The shift is constant along each line, so the adjoint is
    the same two-tap filter mirrored.
    """
    cdef double cpad = 0.5 * (n - 1)
    cdef Py_ssize_t line, pos, p0, fs, p
    cdef double shift, w
    cdef double* out
    for line in range(n):
        shift = factor * (line - cpad)
        fs = <Py_ssize_t>floor(shift)
        w = shift - fs
        for pos in range(n):
            if axis == 0:
                out = g + (pos * n + line) * nz
            else:
                out = g + (line * n + pos) * nz
            memset(out, 0, nz * sizeof(double))
            if adjoint:
                p0 = pos - fs
                # taps: f(p0) * (1 - w) and f(p0 - 1) * w
                p = p0
                if 0 <= p < n and w != 1.0:
                    _axpy(out, f + ((p * n + line) if axis == 0 else (line * n + p)) * nz, 1.0 - w, nz)
                p = p0 - 1
                if 0 <= p < n and w != 0.0:
                    _axpy(out, f + ((p * n + line) if axis == 0 else (line * n + p)) * nz, w, nz)
            else:
                p0 = pos + fs
                p = p0
                if 0 <= p < n and w != 1.0:
                    _axpy(out, f + ((p * n + line) if axis == 0 else (line * n + p)) * nz, 1.0 - w, nz)
                p = p0 + 1
                if 0 <= p < n and w != 0.0:
                    _axpy(out, f + ((p * n + line) if axis == 0 else (line * n + p)) * nz, w, nz)


cdef void _quarter(const double* f, double* g, Py_ssize_t nx, Py_ssize_t ny,
                   Py_ssize_t nz, Py_ssize_t n, Py_ssize_t ox, Py_ssize_t oy,
                   int cq, int sq, bint adjoint) noexcept nogil:
    """Embed an (nx, ny) stack into the n x n plane and turn by q quarters.

    Forward writes the n x n plane ``g`` from source ``f``; adjoint
    writes the (nx, ny) stack ``g`` from plane ``f``.
    """
    cdef Py_ssize_t a, b, xs, ys
    cdef Py_ssize_t bx = ((n - 1) * (1 - cq - sq)) // 2
    cdef Py_ssize_t by = ((n - 1) * (1 + sq - cq)) // 2
    if adjoint:
        memset(g, 0, nx * ny * nz * sizeof(double))
    for a in range(n):
        for b in range(n):
            xs = bx + cq * a + sq * b - ox
            ys = by - sq * a + cq * b - oy
            if 0 <= xs < nx and 0 <= ys < ny:
                if adjoint:
                    _axpy(g + (xs * ny + ys) * nz, f + (a * n + b) * nz, 1.0, nz)
                else:
                    memcpy(g + (a * n + b) * nz, f + (xs * ny + ys) * nz, nz * sizeof(double))
            elif not adjoint:
                memset(g + (a * n + b) * nz, 0, nz * sizeof(double))


cdef void _crop(const double* f, double* g, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                Py_ssize_t n, Py_ssize_t ox, Py_ssize_t oy, bint adjoint) noexcept nogil:
    # forward: g (nx,ny) <- window of plane f; adjoint: plane g <- zero-embedded f
    cdef Py_ssize_t a
    if adjoint:
        memset(g, 0, n * n * nz * sizeof(double))
        for a in range(nx):
            memcpy(g + ((a + ox) * n + oy) * nz, f + a * ny * nz, ny * nz * sizeof(double))
    else:
        for a in range(nx):
            memcpy(g + a * ny * nz, f + ((a + ox) * n + oy) * nz, ny * nz * sizeof(double))


cdef void rot_threepass(const double* src, double* dst, double* P, double* Q,
                        Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz, Py_ssize_t n,
                        Py_ssize_t ox, Py_ssize_t oy, int cq, int sq,
                        double tan_half, double sin_phi, bint adjoint) noexcept nogil:
    # sampling map R(-phi) = Sx(tan(phi/2)) Sy(-sin(phi)) Sx(tan(phi/2))
    if not adjoint:
        _quarter(src, P, nx, ny, nz, n, ox, oy, cq, sq, 0)
        _shear(P, Q, n, nz, tan_half, 0, 0)
        _shear(Q, P, n, nz, -sin_phi, 1, 0)
        _shear(P, Q, n, nz, tan_half, 0, 0)
        _crop(Q, dst, nx, ny, nz, n, ox, oy, 0)
    else:
        _crop(src, Q, nx, ny, nz, n, ox, oy, 1)
        _shear(Q, P, n, nz, tan_half, 0, 1)
        _shear(P, Q, n, nz, -sin_phi, 1, 1)
        _shear(Q, P, n, nz, tan_half, 0, 1)
        _quarter(P, dst, nx, ny, nz, n, ox, oy, cq, sq, 1)


cdef void atten_inplace(double* m, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                        double dy, double* tail) noexcept nogil:
    """Replace rotated attenuation by the accumulated survival factor.

    The detector sits beyond j = ny-1; each voxel sees half of itself plus
    every voxel between it and the detector.
    """
    cdef Py_ssize_t i, j, k
    cdef double mu
    cdef double* row
    for i in range(nx):
        memset(tail, 0, nz * sizeof(double))
        for j in range(ny - 1, -1, -1):
            row = m + (i * ny + j) * nz
            for k in range(nz):
                mu = row[k]
                row[k] = exp(-dy * (0.5 * mu + tail[k]))
                tail[k] = tail[k] + mu


# ---------------------------------------------------------------------------
# plans and workspaces
# ---------------------------------------------------------------------------

def _fft_tables(Py_ssize_t n):
    bits = max(int(n).bit_length() - 1, 0)
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    k = np.arange(max(n // 2, 1))
    return (np.ascontiguousarray(np.cos(2 * np.pi * k / n)),
            np.ascontiguousarray(np.sin(2 * np.pi * k / n)),
            np.ascontiguousarray(rev))


cdef class Workspace:
    """Scratch buffers for ``nthreads`` concurrent views."""

    cdef readonly int nthreads
    cdef public object arrays
    cdef double[:, :, :, ::1] xr, mr, contrib, P, Q
    cdef double[:, :, ::1] bre, bim, are, aim, kre, kim
    cdef double[:, ::1] tail, vd
    cdef double[:, :, ::1] xin
    cdef double[::1] acc

    def __init__(self, Plan plan, int nthreads):
        nx, ny, nz, n = plan.nx, plan.ny, plan.nz, plan.npad
        npl = n if plan.method == THREE_PASS else 0
        lx, lz = plan.tx.n, plan.tz.n
        T = nthreads
        self.nthreads = T
        a = {
            "xr": np.zeros((T, nx, ny, nz)),
            "mr": np.zeros((T, nx, ny, nz)),
            "contrib": np.zeros((T, nx, ny, nz)),
            "P": np.zeros((T, npl, npl, nz)),
            "Q": np.zeros((T, npl, npl, nz)),
            "bre": np.zeros((T, lx, lz)), "bim": np.zeros((T, lx, lz)),
            "are": np.zeros((T, lx, lz)), "aim": np.zeros((T, lx, lz)),
            "kre": np.zeros((T, lx, lz)), "kim": np.zeros((T, lx, lz)),
            "tail": np.zeros((T, nz)),
            "vd": np.zeros((T, nx * nz)),
            "xin": np.zeros((nx, ny, nz)),
            "acc": np.zeros(nx * ny * nz),
        }
        self.arrays = a
        self.xr, self.mr, self.contrib = a["xr"], a["mr"], a["contrib"]
        self.P, self.Q = a["P"], a["Q"]
        self.bre, self.bim, self.are, self.aim = a["bre"], a["bim"], a["are"], a["aim"]
        self.kre, self.kim = a["kre"], a["kim"]
        self.tail, self.vd = a["tail"], a["vd"]
        self.xin, self.acc = a["xin"], a["acc"]

    @property
    def nbytes(self):
        return sum(v.nbytes for v in self.arrays.values())


cdef class Plan:
    """Precomputed geometry for one system model."""

    cdef readonly Py_ssize_t nx, ny, nz, npad, ox, oy, nview, px, pz
    cdef readonly int method
    cdef readonly bint has_mu, cached
    cdef readonly double dy, cx, cy
    cdef double[:, :, ::1] mu
    cdef double[:, :, :, ::1] psf
    cdef double[:, :, ::1] spec_re, spec_im
    cdef double[::1] cos_t, sin_t, tan_half, sin_phi
    cdef int[::1] cq, sq
    cdef FftTab tx, tz
    cdef object _keep

    def __init__(self, shape, Py_ssize_t npad, mu, double dy, psf, bint view_invariant,
                 rot_params, int method):
        self.nx, self.ny, self.nz = shape
        self.npad = npad
        self.ox = (npad - self.nx) // 2
        self.oy = (npad - self.ny) // 2
        self.cx = 0.5 * (npad - 1) - self.ox
        self.cy = 0.5 * (npad - 1) - self.oy
        self.method = method
        self.dy = dy
        self.has_mu = mu is not None
        self.mu = np.array(mu if mu is not None else np.zeros((1, 1, 1)), dtype=np.float64, order='C', copy=True)
        self.psf = np.array(psf, dtype=np.float64, order='C', copy=True)
        self.px, self.pz = psf.shape[0], psf.shape[1]
        self.nview = psf.shape[3]
        cos_t, sin_t, q, tan_half, sin_phi = rot_params
        self.cos_t = np.ascontiguousarray(cos_t, dtype=np.float64)
        self.sin_t = np.ascontiguousarray(sin_t, dtype=np.float64)
        self.tan_half = np.ascontiguousarray(tan_half, dtype=np.float64)
        self.sin_phi = np.ascontiguousarray(sin_phi, dtype=np.float64)
        qq = np.asarray(q) % 4
        self.cq = np.ascontiguousarray(np.array([1, 0, -1, 0])[qq], dtype=np.intc)
        self.sq = np.ascontiguousarray(np.array([0, 1, 0, -1])[qq], dtype=np.intc)
        lx = 1 << max(int(self.nx + self.px - 2).bit_length(), 0)
        lz = 1 << max(int(self.nz + self.pz - 2).bit_length(), 0)
        tabx, tabz = _fft_tables(lx), _fft_tables(lz)
        self._keep = (tabx, tabz)
        cdef double[::1] wcx = tabx[0], wsx = tabx[1], wcz = tabz[0], wsz = tabz[1]
        cdef Py_ssize_t[::1] rx = tabx[2], rz = tabz[2]
        self.tx.n, self.tx.wc, self.tx.ws, self.tx.rev = lx, &wcx[0], &wsx[0], &rx[0]
        self.tz.n, self.tz.wc, self.tz.ws, self.tz.rev = lz, &wcz[0], &wsz[0], &rz[0]
        self.cached = view_invariant
        if view_invariant:
            kp = np.zeros((self.ny, lx, lz))
            kp[:, :self.px, :self.pz] = np.moveaxis(np.asarray(psf)[:, :, :, 0], 2, 0)
            spec = np.fft.fft2(kp)
            self.spec_re = np.ascontiguousarray(spec.real)
            self.spec_im = np.ascontiguousarray(spec.imag)
        else:
            self.spec_re = np.zeros((1, 1, 1))
            self.spec_im = np.zeros((1, 1, 1))

    @property
    def fft_shape(self):
        return (self.tx.n, self.tz.n)

    def new_workspace(self, int nthreads=1):
        return Workspace(self, nthreads)

    # -- per-view building blocks (nogil) ---------------------------------

    cdef void _rotate(self, Py_ssize_t l, const double* src, double* dst, Workspace ws,
                      Py_ssize_t t, bint adjoint) noexcept nogil:
        if self.method == BILINEAR:
            rot_bilinear(src, dst, self.nx, self.ny, self.nz, self.cx, self.cy,
                         self.cos_t[l], self.sin_t[l], adjoint)
        else:
            rot_threepass(src, dst, &ws.P[t, 0, 0, 0], &ws.Q[t, 0, 0, 0],
                          self.nx, self.ny, self.nz, self.npad, self.ox, self.oy,
                          self.cq[l], self.sq[l], self.tan_half[l], self.sin_phi[l], adjoint)

    cdef void _attenuation(self, Py_ssize_t l, Workspace ws, Py_ssize_t t) noexcept nogil:
        self._rotate(l, &self.mu[0, 0, 0], &ws.mr[t, 0, 0, 0], ws, t, 0)
        atten_inplace(&ws.mr[t, 0, 0, 0], self.nx, self.ny, self.nz, self.dy, &ws.tail[t, 0])

    cdef void _kernel_spectrum(self, Py_ssize_t j, Py_ssize_t l, Workspace ws, Py_ssize_t t,
                               const double** kr, const double** ki) noexcept nogil:
        cdef Py_ssize_t lx = self.tx.n, lz = self.tz.n, a, b
        cdef double* re
        cdef double* im
        if self.cached:
            kr[0] = &self.spec_re[j, 0, 0]
            ki[0] = &self.spec_im[j, 0, 0]
            return
        re = &ws.kre[t, 0, 0]
        im = &ws.kim[t, 0, 0]
        memset(re, 0, lx * lz * sizeof(double))
        memset(im, 0, lx * lz * sizeof(double))
        for a in range(self.px):
            for b in range(self.pz):
                re[a * lz + b] = self.psf[a, b, j, l]
        fft2_forward(re, im, &self.tx, &self.tz, self.px)
        kr[0] = re
        ki[0] = im

    cdef void _forward_view(self, Py_ssize_t l, Workspace ws, Py_ssize_t t) noexcept nogil:
        cdef Py_ssize_t nx = self.nx, ny = self.ny, nz = self.nz
        cdef Py_ssize_t lx = self.tx.n, lz = self.tz.n
        cdef Py_ssize_t hx = (self.px - 1) // 2, hz = (self.pz - 1) // 2
        cdef Py_ssize_t mx = nx + self.px - 1, mz = nz + self.pz - 1
        cdef Py_ssize_t i, j, k, m, q, si, sk, idx
        cdef double* xr = &ws.xr[t, 0, 0, 0]
        cdef double* mr = &ws.mr[t, 0, 0, 0]
        cdef double* bre = &ws.bre[t, 0, 0]
        cdef double* bim = &ws.bim[t, 0, 0]
        cdef double* are = &ws.are[t, 0, 0]
        cdef double* aim = &ws.aim[t, 0, 0]
        cdef double* vd = &ws.vd[t, 0]
        cdef const double* kr
        cdef const double* ki
        cdef double xre, xim
        cdef double scale = 1.0 / (lx * lz)

        self._rotate(l, &ws.xin[0, 0, 0], xr, ws, t, 0)
        if self.has_mu:
            self._attenuation(l, ws, t)
            for idx in range(nx * ny * nz):
                xr[idx] = xr[idx] * mr[idx]

        memset(are, 0, lx * lz * sizeof(double))
        memset(aim, 0, lx * lz * sizeof(double))
        for j in range(ny):
            memset(bre, 0, lx * lz * sizeof(double))
            memset(bim, 0, lx * lz * sizeof(double))
            for m in range(mx):
                si = m - hx
                if si < 0:
                    si = 0
                elif si >= nx:
                    si = nx - 1
                for q in range(mz):
                    sk = q - hz
                    if sk < 0:
                        sk = 0
                    elif sk >= nz:
                        sk = nz - 1
                    bre[m * lz + q] = xr[(si * ny + j) * nz + sk]
            fft2_forward(bre, bim, &self.tx, &self.tz, mx)
            self._kernel_spectrum(j, l, ws, t, &kr, &ki)
            for idx in range(lx * lz):
                xre = bre[idx]
                xim = bim[idx]
                are[idx] = are[idx] + xre * kr[idx] - xim * ki[idx]
                aim[idx] = aim[idx] + xre * ki[idx] + xim * kr[idx]
        fft2_inverse(are, aim, &self.tx, &self.tz, self.px - 1, self.px - 1 + nx)
        for i in range(nx):
            for k in range(nz):
                vd[i * nz + k] = are[(i + self.px - 1) * lz + k + self.pz - 1] * scale

    cdef void _back_view(self, Py_ssize_t l, Workspace ws, Py_ssize_t t) noexcept nogil:
        cdef Py_ssize_t nx = self.nx, ny = self.ny, nz = self.nz
        cdef Py_ssize_t lx = self.tx.n, lz = self.tz.n
        cdef Py_ssize_t hx = (self.px - 1) // 2, hz = (self.pz - 1) // 2
        cdef Py_ssize_t mx = nx + self.px - 1, mz = nz + self.pz - 1
        cdef Py_ssize_t i, j, k, m, q, si, sk, idx
        cdef double* xr = &ws.xr[t, 0, 0, 0]
        cdef double* mr = &ws.mr[t, 0, 0, 0]
        cdef double* bre = &ws.bre[t, 0, 0]
        cdef double* bim = &ws.bim[t, 0, 0]
        cdef double* are = &ws.are[t, 0, 0]
        cdef double* aim = &ws.aim[t, 0, 0]
        cdef const double* kr
        cdef const double* ki
        cdef double vre, vim
        cdef double scale = 1.0 / (lx * lz)

        # spectrum of the zero-embedded view
        memset(are, 0, lx * lz * sizeof(double))
        memset(aim, 0, lx * lz * sizeof(double))
        for i in range(nx):
            for k in range(nz):
                are[i * lz + k] = ws.vd[t, i * nz + k]
        fft2_forward(are, aim, &self.tx, &self.tz, nx)

        memset(xr, 0, nx * ny * nz * sizeof(double))
        for j in range(ny):
            self._kernel_spectrum(j, l, ws, t, &kr, &ki)
            for idx in range(lx * lz):
                vre = are[idx]
                vim = aim[idx]
                bre[idx] = vre * kr[idx] - vim * ki[idx]
                bim[idx] = vre * ki[idx] + vim * kr[idx]
            fft2_inverse(bre, bim, &self.tx, &self.tz, 0, mx)
            # adjoint of replicate padding: fold the border back onto edge cells
            for m in range(mx):
                si = m - hx
                if si < 0:
                    si = 0
                elif si >= nx:
                    si = nx - 1
                for q in range(mz):
                    sk = q - hz
                    if sk < 0:
                        sk = 0
                    elif sk >= nz:
                        sk = nz - 1
                    xr[(si * ny + j) * nz + sk] += bre[m * lz + q] * scale

        if self.has_mu:
            self._attenuation(l, ws, t)
            for idx in range(nx * ny * nz):
                xr[idx] = xr[idx] * mr[idx]
        self._rotate(l, xr, &ws.contrib[t, 0, 0, 0], ws, t, 1)

    # -- public entry points ------------------------------------------------

    def forward(self, const real[:, :, ::1] x, real[:, :, ::1] out, Workspace ws, int nthreads):
        cdef Py_ssize_t t, l, i, k, T = nthreads, nview = self.nview, nz = self.nz
        cdef Py_ssize_t nx = self.nx, ny = self.ny, idx
        cdef double* xin = &ws.xin[0, 0, 0]
        if ws.nthreads < T:
            raise ValueError("workspace has fewer thread slots than requested")
        with nogil:
            for idx in range(nx * ny * nz):
                xin[idx] = (&x[0, 0, 0])[idx]
            for t in prange(T, num_threads=T, schedule='static', chunksize=1):
                l = t
                while l < nview:
                    self._forward_view(l, ws, t)
                    for i in range(nx):
                        for k in range(nz):
                            out[i, k, l] = <real>ws.vd[t, i * nz + k]
                    l = l + T

    def back(self, const real[:, :, ::1] v, real[:, :, ::1] out, Workspace ws, int nthreads):
        cdef Py_ssize_t T = nthreads, nview = self.nview
        cdef Py_ssize_t nx = self.nx, ny = self.ny, nz = self.nz
        cdef Py_ssize_t N = nx * ny * nz, c, nt, t, u, idx, i, k, l
        cdef double s
        cdef double* acc = &ws.acc[0]
        if ws.nthreads < T:
            raise ValueError("workspace has fewer thread slots than requested")
        with nogil:
            memset(acc, 0, N * sizeof(double))
            c = 0
            while c < nview:
                nt = nview - c
                if nt > T:
                    nt = T
                for t in prange(nt, num_threads=T, schedule='static', chunksize=1):
                    for i in range(nx):
                        for k in range(nz):
                            ws.vd[t, i * nz + k] = v[i, k, c + t]
                    self._back_view(c + t, ws, t)
                # fixed view order keeps the sum independent of the thread count
                for idx in prange(N, num_threads=T, schedule='static'):
                    s = acc[idx]
                    for u in range(nt):
                        s = s + (&ws.contrib[u, 0, 0, 0])[idx]
                    acc[idx] = s
                c = c + nt
            for idx in range(N):
                (&out[0, 0, 0])[idx] = <real>acc[idx]


# ---------------------------------------------------------------------------
# standalone stages (tests, public single-stage API)
# ---------------------------------------------------------------------------

def rotate(const double[:, :, ::1] src, double[:, :, ::1] out, Py_ssize_t npad, int method,
           double cos_t, double sin_t, int q, double tan_half, double sin_phi, bint adjoint):
    cdef Py_ssize_t nx = src.shape[0], ny = src.shape[1], nz = src.shape[2]
    cdef Py_ssize_t ox = (npad - nx) // 2, oy = (npad - ny) // 2
    cdef double cx = 0.5 * (npad - 1) - ox, cy = 0.5 * (npad - 1) - oy
    cdef int cq = (1, 0, -1, 0)[q % 4], sq = (0, 1, 0, -1)[q % 4]
    cdef double[:, :, ::1] P, Q
    if method == BILINEAR:
        with nogil:
            rot_bilinear(&src[0, 0, 0], &out[0, 0, 0], nx, ny, nz, cx, cy, cos_t, sin_t, adjoint)
    else:
        P = np.zeros((npad, npad, nz))
        Q = np.zeros((npad, npad, nz))
        with nogil:
            rot_threepass(&src[0, 0, 0], &out[0, 0, 0], &P[0, 0, 0], &Q[0, 0, 0],
                          nx, ny, nz, npad, ox, oy, cq, sq, tan_half, sin_phi, adjoint)


def attenuation(const double[:, :, ::1] mu, double dy, double[:, :, ::1] out):
    cdef Py_ssize_t nx = mu.shape[0], ny = mu.shape[1], nz = mu.shape[2]
    cdef double[::1] tail = np.zeros(nz)
    out[...] = mu
    with nogil:
        atten_inplace(&out[0, 0, 0], nx, ny, nz, dy, &tail[0])


def fft2(double[:, ::1] re, double[:, ::1] im, bint inverse):
    """In-place unnormalized 2D FFT; both sides must be powers of two."""
    cdef FftTab tx, tz
    tabx, tabz = _fft_tables(re.shape[0]), _fft_tables(re.shape[1])
    cdef double[::1] wcx = tabx[0], wsx = tabx[1], wcz = tabz[0], wsz = tabz[1]
    cdef Py_ssize_t[::1] rx = tabx[2], rz = tabz[2]
    tx.n, tx.wc, tx.ws, tx.rev = re.shape[0], &wcx[0], &wsx[0], &rx[0]
    tz.n, tz.wc, tz.ws, tz.rev = re.shape[1], &wcz[0], &wsz[0], &rz[0]
    with nogil:
        if inverse:
            fft2_inverse(&re[0, 0], &im[0, 0], &tx, &tz, 0, tx.n)
        else:
            fft2_forward(&re[0, 0], &im[0, 0], &tx, &tz, tx.n)


def conv2d(const double[:, ::1] plane, const double[:, ::1] kernel, double[:, ::1] out, bint adjoint):
    """Replicate-padded 2D convolution of one plane, or its adjoint."""
    cdef Py_ssize_t n1 = plane.shape[0], n2 = plane.shape[1]
    psf = np.asarray(kernel)[:, :, None, None]
    plan = Plan((n1, 1, n2), n1, None, 1.0, psf, True,
                ([1.0], [0.0], [0], [0.0], [0.0]), BILINEAR)
    ws = plan.new_workspace(1)
    x = np.ascontiguousarray(np.asarray(plane)[:, None, :])
    if adjoint:
        res = np.zeros((n1, 1, n2))
        plan.back(np.ascontiguousarray(x.reshape(n1, n2, 1)), res, ws, 1)
        np.asarray(out)[...] = res[:, 0, :]
    else:
        res = np.zeros((n1, n2, 1))
        plan.forward(x, res, ws, 1)
        np.asarray(out)[...] = res[:, :, 0]
