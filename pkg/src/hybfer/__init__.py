"""Facial-expression recognition: a from-scratch CNN fused with SIFT features.

HYBFER_THREADS caps BLAS/worker parallelism for every numeric library the
package touches; it must be applied before numpy first loads, which is why
the stanza below precedes every other import. Unset or "0" means auto.
"""

import os as _os

_threads = _os.environ.get("HYBFER_THREADS", "").strip()
if _threads and _threads != "0":
    if not _threads.isdigit():
        raise ValueError(f"HYBFER_THREADS must be a non-negative integer, got {_threads!r}")
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ[_var] = _threads

from . import data_pipeline, errors, model_zoo, nn_core, sift_features  # noqa: E402

__version__ = "0.1.0"
__all__ = ["data_pipeline", "errors", "model_zoo", "nn_core", "sift_features"]
