"""Utterance-aware multi-scale acoustic tokens for emotion recognition, at desk scale."""

import os as _os

# BLAS reads these once at load time, so they must be set before numpy is imported.
_threads = _os.environ.get("ACOUSTEMO_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
