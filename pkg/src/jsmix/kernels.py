"""Hot-loop kernels: compiled extension when available, numpy otherwise.

Set ``JSMIX_PURE_PYTHON=1`` to force the numpy path. ``BACKEND`` names the
implementation in use.
"""
import os

import numpy as np

from . import _pykernels

if os.environ.get("JSMIX_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def forward_filter(Y, rho, phic, p, impl=None):
    impl = impl or _impl
    return impl.forward_filter(_c(Y, np.uint8), _c(rho, float), _c(phic, float), _c(p, float))


def backward_sample(filt, uidx, c, rho, phic, u, impl=None):
    impl = impl or _impl
    return impl.backward_sample(
        _c(filt, float), _c(uidx, np.intp), _c(c, np.intp), _c(rho, float), _c(phic, float), _c(u, float)
    )


def tally(states, c, y, expo, G, impl=None):
    impl = impl or _impl
    return impl.tally(_c(states, np.int8), _c(c, np.intp), _c(y, np.uint8), _c(expo, np.uint8), int(G))
