"""Numba implementations of the batched hot kernels.

All kernels operate in lockstep over B scenario blocks that share one CSR
sparsity pattern; each block only ever writes its own output slots, so
``prange`` over blocks is deterministic regardless of scheduling.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def spmv_batch(indptr, indices, data, x, out, active):
    """out[b] = A_b @ x[b] for active blocks; complex CSR with shared pattern."""
    nb, n = x.shape
    for b in prange(nb):
        if not active[b]:
            continue
        for i in range(n):
            acc = 0.0 + 0.0j
            for k in range(indptr[i], indptr[i + 1]):
                acc += data[b, k] * x[b, indices[k]]
            out[b, i] = acc


@njit(cache=True, parallel=True)
def jacobian_batch(indptr, indices, ydata, v, ibus, vm,
                   pos11, pos12, pos21, pos22, jdata, active):
    """Scatter polar Newton Jacobian entries into the shared block pattern.

    For admittance entry y_ij the complex derivatives are
      dS_i/dtheta_j = -1j * V_i * conj(y_ij V_j)            (i != j)
      dS_i/dtheta_i =  1j * (V_i conj(I_i) - V_i conj(y_ii V_i))
      dS_i/d|V|_j   =  V_i * conj(y_ij V_j) / |V_j|          (i != j)
      dS_i/d|V|_i   =  V_i conj(y_ii V_i)/|V_i| + conj(I_i) V_i / |V_i|
    whose real/imag parts land in the four Jacobian quadrants.
    """
    nb, n = v.shape
    for b in prange(nb):
        if not active[b]:
            continue
        for i in range(n):
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                y = ydata[b, k]
                vi = v[b, i]
                if i == j:
                    yv = y * vi
                    dva = 1j * (vi * np.conj(ibus[b, i]) - vi * np.conj(yv))
                    dvm = vi * np.conj(yv) / vm[b, i] + np.conj(ibus[b, i]) * vi / vm[b, i]
                else:
                    t = vi * np.conj(y * v[b, j])
                    dva = -1j * t
                    dvm = t / vm[b, j]
                if pos11[k] >= 0:
                    jdata[b, pos11[k]] = dva.real
                if pos21[k] >= 0:
                    jdata[b, pos21[k]] = dva.imag
                if pos12[k] >= 0:
                    jdata[b, pos12[k]] = dvm.real
                if pos22[k] >= 0:
                    jdata[b, pos22[k]] = dvm.imag


@njit(cache=True, parallel=True)
def cgnr_batch(indptr, indices, data, rhs, x, tol_rel, max_iter,
               active, iters, relres):
    """Jacobi-preconditioned conjugate gradient on the normal equations.

    Rows are equilibrated to unit 2-norm first (a diagonal change of the
    residual metric that leaves the solution of a square system unchanged),
    then CG runs on the normal equations with the Jacobi (diagonal)
    preconditioner.  The equilibrated residual norm is minimized over the
    growing Krylov space, hence non-increasing across iterations; ``relres``
    reports its final relative value per block.  Callers decide whether
    stragglers get a direct fallback solve.
    """
    nb, m = rhs.shape
    for b in prange(nb):
        if not active[b]:
            continue
        # row equilibration
        sdata = np.empty(data.shape[1])
        r = np.empty(m)
        for i in range(m):
            rn = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                rn += data[b, k] * data[b, k]
            rn = np.sqrt(rn)
            scale = 1.0 / rn if rn > 0.0 else 1.0
            for k in range(indptr[i], indptr[i + 1]):
                sdata[k] = data[b, k] * scale
            r[i] = rhs[b, i] * scale
        bnorm = 0.0
        for i in range(m):
            bnorm += r[i] * r[i]
        bnorm = np.sqrt(bnorm)
        if bnorm == 0.0:
            for i in range(m):
                x[b, i] = 0.0
            iters[b] = 0
            relres[b] = 0.0
            continue
        # Jacobi diagonal of A^T A: column sums of squared entries
        d = np.zeros(m)
        for i in range(m):
            for k in range(indptr[i], indptr[i + 1]):
                d[indices[k]] += sdata[k] * sdata[k]
        for i in range(m):
            if d[i] <= 0.0:
                d[i] = 1.0
        xb = np.zeros(m)
        s = np.zeros(m)       # A^T r
        for i in range(m):
            ri = r[i]
            for k in range(indptr[i], indptr[i + 1]):
                s[indices[k]] += sdata[k] * ri
        z = s / d
        p = z.copy()
        rho = 0.0
        for i in range(m):
            rho += s[i] * z[i]
        w = np.zeros(m)
        it = 0
        rnorm = bnorm
        target = tol_rel[b] * bnorm
        while rnorm > target and it < max_iter:
            for i in range(m):
                acc = 0.0
                for k in range(indptr[i], indptr[i + 1]):
                    acc += sdata[k] * p[indices[k]]
                w[i] = acc
            delta = 0.0
            for i in range(m):
                delta += w[i] * w[i]
            if delta <= 0.0 or rho <= 0.0:
                break
            alpha = rho / delta
            for i in range(m):
                xb[i] += alpha * p[i]
                r[i] -= alpha * w[i]
            for i in range(m):
                s[i] = 0.0
            for i in range(m):
                ri = r[i]
                for k in range(indptr[i], indptr[i + 1]):
                    s[indices[k]] += sdata[k] * ri
            rho_new = 0.0
            for i in range(m):
                z[i] = s[i] / d[i]
                rho_new += s[i] * z[i]
            beta = rho_new / rho
            rho = rho_new
            for i in range(m):
                p[i] = z[i] + beta * p[i]
            rnorm = 0.0
            for i in range(m):
                rnorm += r[i] * r[i]
            rnorm = np.sqrt(rnorm)
            it += 1
        for i in range(m):
            x[b, i] = xb[i]
        iters[b] = it
        relres[b] = rnorm / bnorm
