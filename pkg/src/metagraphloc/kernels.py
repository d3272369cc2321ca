"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is loaded. Set ``METAGRAPHLOC_PURE_PYTHON=1`` to force the fallback.
Both backends return bit-identical results.
"""
import os

from . import _kernels_py

if os.environ.get("METAGRAPHLOC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
knn_indices = _impl.knn_indices
edge_aggregate_forward = _impl.edge_aggregate_forward
edge_aggregate_backward = _impl.edge_aggregate_backward


def backends():
    """All importable backends, fallback first."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
