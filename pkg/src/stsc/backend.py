"""Kernel backend selection.

The convolution inner loops exist twice: a numba-jitted shift-accumulate
implementation and a pure-numpy im2col (BLAS matmul) implementation. The
active backend is chosen once at import time from the STSC_BACKEND
environment variable ("numba" or "numpy").

Default is "numpy": at the channel widths this network uses, the im2col
route hands the work to BLAS and is an order of magnitude faster than
the jitted loops (see benchmarks/bench_backends.py). The numba path is
kept as an opt-in alternative and is tested for agreement.

Within one backend all results are bit-identical across runs; the two
backends agree to normal float tolerance but not bit-exactly (different
summation order).
"""

import os

_requested = os.environ.get("STSC_BACKEND", "").strip().lower()

if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"STSC_BACKEND={_requested!r} not understood (use 'numba' or 'numpy')"
    )

_use_numba = _requested == "numba"

if _use_numba:
    from . import kernels_numba as kernels
    BACKEND = "numba"
else:
    from . import kernels_numpy as kernels
    BACKEND = "numpy"

conv2d_forward = kernels.conv2d_forward
conv2d_backward_input = kernels.conv2d_backward_input
conv2d_backward_weight = kernels.conv2d_backward_weight
