"""Scan kernel backend selection.

The compiled extension is used when importable; set EMGSE_FORCE_NUMPY_SCAN=1
to force the pure-numpy fallback (both satisfy the same contract and are
cross-checked in the tests).
"""

import os

from . import scan_numpy
from .scan_numpy import CHUNK

BACKEND = "numpy"
_impl = scan_numpy

if os.environ.get("EMGSE_FORCE_NUMPY_SCAN", "") not in ("1", "true", "yes"):
    try:
        from . import _scan_cy as _compiled

        _impl = _compiled
        BACKEND = "cython"
    except ImportError:
        pass


def scan_forward(u, dt, A, B_in, C_out, D, chunk=CHUNK):
    return _impl.scan_forward(u, dt, A, B_in, C_out, D, chunk)


def scan_backward(u, dt, A, B_in, C_out, D, chk, gy, chunk=CHUNK):
    return _impl.scan_backward(u, dt, A, B_in, C_out, D, chk, gy, chunk)
