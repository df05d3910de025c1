"""Scan kernel backend selection.

The compiled extension is preferred when importable; the numpy twin is the
fallback. ``PHRASEFORGE_KERNEL`` forces a backend: ``auto`` (default),
``cython``, or ``python``. Both backends implement the same contract, so
callers only ever import ``dot_scores`` / ``topk_scan`` from here.
"""

import os

from ..errors import ConfigurationError

_requested = os.environ.get("PHRASEFORGE_KERNEL", "auto").strip().lower()
if _requested not in ("auto", "cython", "python"):
    raise ConfigurationError(
        f"PHRASEFORGE_KERNEL must be auto, cython, or python, got {_requested!r}")

if _requested in ("auto", "cython"):
    try:
        from ._scan import BACKEND_NAME, dot_scores, topk_scan  # noqa: F401
    except ImportError:
        if _requested == "cython":
            raise ConfigurationError(
                "PHRASEFORGE_KERNEL=cython but the compiled kernel is not built; "
                "reinstall with `pip install -e . --no-build-isolation`") from None
        from ._scan_py import BACKEND_NAME, dot_scores, topk_scan  # noqa: F401
else:
    from ._scan_py import BACKEND_NAME, dot_scores, topk_scan  # noqa: F401

__all__ = ["BACKEND_NAME", "dot_scores", "topk_scan"]
