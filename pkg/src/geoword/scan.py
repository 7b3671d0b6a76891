"""Scan-kernel dispatch.

Prefers the compiled extension (geoword._scan) and falls back to the numpy
implementation when it is missing or when GEOWORD_PURE is set in the
environment.  `BACKEND` records which one is active.
"""

from __future__ import annotations

import os

if os.environ.get("GEOWORD_PURE"):
    from . import _scan_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _scan as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _scan_py as _impl

        BACKEND = "python"

match_mask = _impl.match_mask
query_ids = _impl.query_ids
count_matching = _impl.count_matching
filter_rect = _impl.filter_rect

__all__ = ["BACKEND", "match_mask", "query_ids", "count_matching", "filter_rect"]
