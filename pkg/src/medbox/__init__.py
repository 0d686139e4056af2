"""Medicinal-box recognition: densenet engine, training harness, inference service."""
import os

__version__ = "0.1.0"

# The conv kernels issue many small/skinny GEMMs; BLAS-internal threading
# adds sync overhead that swamps them. Parallelism comes from process-level
# workers (one per repetition) instead, so each process keeps BLAS
# single-threaded. Override with MEDBOX_BLAS_THREADS.
_blas_limiter = None
try:
    from threadpoolctl import threadpool_limits

    _blas_limiter = threadpool_limits(
        limits=int(os.environ.get("MEDBOX_BLAS_THREADS", "1")), user_api="blas"
    )
except Exception:  # pragma: no cover - threadpoolctl is optional at runtime
    pass
