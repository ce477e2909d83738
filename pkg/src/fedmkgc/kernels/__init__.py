"""Hot kernels: compiled Cython core with a numpy fallback.

The compiled module is used when it imports cleanly; set
``FEDMKGC_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names the
active implementation.
"""

import os

import numpy as np

from . import _fallback

if os.environ.get("FEDMKGC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _fast as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def rotate_distance(ent, phase, heads, rels, cands, impl=None):
    """Distances ``|h * exp(i*phase_r) - t|`` for every (query, candidate).

    ``ent`` stores real parts in the first half of each row and imaginary
    parts in the second half; ``cands`` is (B, K).
    """
    impl = impl or _impl
    return impl.rotate_distance(
        _c(ent, np.float64), _c(phase, np.float64), _c(heads, np.int64), _c(rels, np.int64), _c(cands, np.int64)
    )


def rotate_distance_backward(ent, phase, heads, rels, cands, dist, gdist, impl=None):
    impl = impl or _impl
    return impl.rotate_distance_backward(
        _c(ent, np.float64),
        _c(phase, np.float64),
        _c(heads, np.int64),
        _c(rels, np.int64),
        _c(cands, np.int64),
        _c(dist, np.float64),
        _c(gdist, np.float64),
    )


def rank_counts(scores, targets, filter_mask, impl=None):
    """Mid-rank of each target among unfiltered entities (1-based)."""
    impl = impl or _impl
    return impl.rank_counts(_c(scores, np.float64), _c(targets, np.int64), _c(filter_mask, np.uint8))


def implementations() -> dict:
    out = {"python": _fallback}
    try:
        from . import _fast

        out["cython"] = _fast
    except ImportError:
        pass
    return out
