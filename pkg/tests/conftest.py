"""Shared test configuration.

BLAS thread pools are pinned to one thread: the matrices here are small
enough that multi-threaded BLAS only adds spin-wait jitter, which breaks
the timing-based scaling checks on throttled CI machines.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

try:
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=1)
except ImportError:  # env vars above still cover the common case
    pass
