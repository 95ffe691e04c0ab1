"""Progressive multi-view coding: alignment, self-adjusted pools, unified loss."""

import os as _os

_threads = _os.environ.get("IPMC_THREADS")
if _threads:
    # must land before numpy loads its BLAS backend
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
