"""Hot kinematic kernels with a numba fast path and a numpy fallback.

Selection is controlled by the ``KINEDIFF_NUMBA`` environment variable,
read at import time:

* unset or ``auto``: use numba when it imports cleanly, else numpy
* ``1`` / ``true``:  require numba (ImportError propagates)
* ``0`` / ``false``: force the pure-numpy path

``python -m kinediff.bench`` times both paths side by side.
"""

from __future__ import annotations

import os

KIND_REVOLUTE = 0
KIND_PRISMATIC = 1

_flag = os.environ.get("KINEDIFF_NUMBA", "auto").strip().lower()

if _flag in ("0", "false", "no", "off"):
    from . import numpy_impl as _impl
    USING_NUMBA = False
elif _flag in ("1", "true", "yes", "on"):
    from . import numba_impl as _impl
    _impl.warmup()
    USING_NUMBA = True
else:
    try:
        from . import numba_impl as _impl
        _impl.warmup()
        USING_NUMBA = True
    except ImportError:
        from . import numpy_impl as _impl
        USING_NUMBA = False

chain_fk = _impl.chain_fk
segment_distance = _impl.segment_distance
min_segment_pair_distance = _impl.min_segment_pair_distance
axis_angle_matrix = _impl.axis_angle_matrix

__all__ = [
    "KIND_REVOLUTE",
    "KIND_PRISMATIC",
    "USING_NUMBA",
    "chain_fk",
    "segment_distance",
    "min_segment_pair_distance",
    "axis_angle_matrix",
]
