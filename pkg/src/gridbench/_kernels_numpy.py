"""Pure-numpy fallbacks for the batched hot kernels.

Functionally identical to the numba versions; used when the accelerated
path is disabled (see :mod:`gridbench.kernels`) or numba is unavailable.
"""

import numpy as np
import scipy.sparse as sp


def _csr(indptr, indices, data, m=None):
    n = len(indptr) - 1
    return sp.csr_matrix((data, indices, indptr), shape=(n, m if m is not None else n))


def spmv_batch(indptr, indices, data, x, out, active):
    for b in np.flatnonzero(active):
        out[b] = _csr(indptr, indices, data[b]) @ x[b]


def jacobian_batch(indptr, indices, ydata, v, ibus, vm,
                   pos11, pos12, pos21, pos22, jdata, active):
    n = v.shape[1]
    rows = np.repeat(np.arange(n), np.diff(indptr))
    cols = indices
    off = rows != cols
    for b in np.flatnonzero(active):
        y = ydata[b]
        dva = np.empty(len(y), dtype=np.complex128)
        dvm = np.empty(len(y), dtype=np.complex128)
        t = v[b, rows] * np.conj(y * v[b, cols])
        dva[off] = -1j * t[off]
        dvm[off] = t[off] / vm[b, cols[off]]
        diag = ~off
        i_d = rows[diag]
        yv = y[diag] * v[b, i_d]
        dva[diag] = 1j * (v[b, i_d] * np.conj(ibus[b, i_d]) - v[b, i_d] * np.conj(yv))
        dvm[diag] = (v[b, i_d] * np.conj(yv) + np.conj(ibus[b, i_d]) * v[b, i_d]) / vm[b, i_d]
        sel11 = pos11 >= 0
        sel12 = pos12 >= 0
        sel21 = pos21 >= 0
        sel22 = pos22 >= 0
        jdata[b, pos11[sel11]] = dva.real[sel11]
        jdata[b, pos21[sel21]] = dva.imag[sel21]
        jdata[b, pos12[sel12]] = dvm.real[sel12]
        jdata[b, pos22[sel22]] = dvm.imag[sel22]


def cgnr_batch(indptr, indices, data, rhs, x, tol_rel, max_iter,
               active, iters, relres):
    nrow = len(indptr) - 1
    row_of = np.repeat(np.arange(nrow), np.diff(indptr))
    for b in np.flatnonzero(active):
        rn = np.sqrt(np.bincount(row_of, weights=data[b] ** 2, minlength=nrow))
        scale = np.where(rn > 0, 1.0 / np.where(rn > 0, rn, 1.0), 1.0)
        a = _csr(indptr, indices, data[b] * scale[row_of])
        bb = rhs[b] * scale
        bnorm = np.linalg.norm(bb)
        if bnorm == 0.0:
            x[b] = 0.0
            iters[b] = 0
            relres[b] = 0.0
            continue
        d = np.asarray(a.multiply(a).sum(axis=0)).ravel()
        d[d <= 0] = 1.0
        at = a.T.tocsr()
        r = bb.copy()
        xb = np.zeros_like(bb)
        s = at @ r
        z = s / d
        p = z.copy()
        rho = float(s @ z)
        it = 0
        rnorm = bnorm
        target = tol_rel[b] * bnorm
        while rnorm > target and it < max_iter:
            w = a @ p
            delta = float(w @ w)
            if delta <= 0.0 or rho <= 0.0:
                break
            alpha = rho / delta
            xb += alpha * p
            r -= alpha * w
            s = at @ r
            z = s / d
            rho_new = float(s @ z)
            beta = rho_new / rho
            rho = rho_new
            p = z + beta * p
            rnorm = float(np.linalg.norm(r))
            it += 1
        x[b] = xb
        iters[b] = it
        relres[b] = rnorm / bnorm
