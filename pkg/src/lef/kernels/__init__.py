"""Hot-kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set LEF_PURE_KERNELS=1 to force the fallback (the two are bit-identical;
this only affects speed). `backend()` reports which one is active.
"""

from __future__ import annotations

import os

from lef.kernels import pure as _pure

_impl = _pure
_BACKEND = "pure"

if os.environ.get("LEF_PURE_KERNELS", "") != "1":
    try:
        from lef.kernels import _fast as _ext

        _impl = _ext
        _BACKEND = "compiled"
    except ImportError:
        pass


def backend() -> str:
    return _BACKEND


def _c64(a):
    import numpy as np

    return np.ascontiguousarray(a, dtype=np.float64)


def _ci64(a):
    import numpy as np

    return np.ascontiguousarray(a, dtype=np.int64)


def segment_max(data, starts, ends):
    return _impl.segment_max(_c64(data), _ci64(starts), _ci64(ends))


def inverse_source_map(transform, h, w, cell, half):
    return _impl.inverse_source_map(_c64(transform), int(h), int(w), float(cell), float(half))


def zbuffer_keep(bins, ranges, n_bins):
    return _impl.zbuffer_keep(_ci64(bins), _c64(ranges), int(n_bins))
