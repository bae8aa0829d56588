"""Cluster-conditioned generative modeling on fixed feature embeddings.

Set ``CLUSTERCOND_THREADS`` before the first import to cap BLAS/OpenMP threads.
"""

import os as _os

_threads = _os.environ.get("CLUSTERCOND_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .errors import ClusterCondError, DataError, NumericalError, ParameterError  # noqa: E402

__version__ = "0.1.0"

__all__ = ["ClusterCondError", "DataError", "NumericalError", "ParameterError", "__version__"]
