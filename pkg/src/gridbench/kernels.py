"""Hot-kernel selection: numba-accelerated by default, numpy on request.

Set ``GRIDBENCH_NUMBA=0`` (or ``false``/``off``/``no``) in the environment
before import to force the pure-numpy path; it is also used automatically
when numba is not importable.  ``benchmarks/kernel_bench.py`` compares the
two paths.
"""

import os

_flag = os.environ.get("GRIDBENCH_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

if _want_numba:
    try:
        from . import _kernels_numba as _impl
        USING_NUMBA = True
    except ImportError:
        from . import _kernels_numpy as _impl
        USING_NUMBA = False
else:
    from . import _kernels_numpy as _impl
    USING_NUMBA = False

spmv_batch = _impl.spmv_batch
jacobian_batch = _impl.jacobian_batch
cgnr_batch = _impl.cgnr_batch


def set_threads(n):
    """Cap the kernel worker pool (no-op on the numpy path)."""
    if USING_NUMBA and n is not None:
        import numba
        numba.set_num_threads(max(1, int(n)))
