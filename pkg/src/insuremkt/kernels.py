"""Select the compiled hull kernel when built, else the pure-Python fallback.

Set INSUREMKT_PURE=1 to force the fallback.
"""
import os

from . import _hull_py

BACKEND = "python"
upper_hull = _hull_py.upper_hull
upper_hulls = _hull_py.upper_hulls

if not os.environ.get("INSUREMKT_PURE"):
    try:
        from . import _hull  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build
        pass
    else:
        BACKEND = "cython"
        upper_hull = _hull.upper_hull
        upper_hulls = _hull.upper_hulls
