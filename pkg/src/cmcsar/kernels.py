"""Backend selection for the hot kernels.

``CMC_BACKEND`` picks the implementation at import time: ``numba`` (default,
used when numba imports cleanly) or ``numpy``. ``CMC_THREADS`` caps numba's
thread pool. Both implementations stay importable as ``NUMPY`` / ``NUMBA``
so tests and the benchmark can compare them side by side.
"""

import os
from types import SimpleNamespace

from . import _kernels_np

_NAMES = ("im2col", "col2im", "sample_bilinear", "sample_nearest")

NUMPY = SimpleNamespace(**{n: getattr(_kernels_np, n) for n in _NAMES})

try:
    from . import _kernels_nb
except ImportError:  # numba missing or broken
    NUMBA = None
else:
    NUMBA = SimpleNamespace(**{n: getattr(_kernels_nb, n) for n in _NAMES})


def _select():
    want = os.environ.get("CMC_BACKEND", "numba").strip().lower()
    if want not in ("numba", "numpy"):
        raise ValueError(f"CMC_BACKEND must be 'numba' or 'numpy', got {want!r}")
    if want == "numba" and NUMBA is not None:
        threads = os.environ.get("CMC_THREADS")
        if threads:
            import numba

            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
        return "numba", NUMBA
    return "numpy", NUMPY


BACKEND, _impl = _select()

im2col = _impl.im2col
col2im = _impl.col2im
sample_bilinear = _impl.sample_bilinear
sample_nearest = _impl.sample_nearest
