"""Round-to-nearest-even conversion of float64 values to bfloat16 precision.

bfloat16 keeps float32's 8-bit exponent and 7 explicit mantissa bits. The
result is returned as float64 holding the exactly representable bf16 value.
Rounding is done once, directly from float64, so there is no double rounding
through float32.
"""

from __future__ import annotations

import numpy as np

_DROP = 52 - 7  # float64 mantissa bits discarded
_HALF = np.int64((1 << (_DROP - 1)) - 1)
_MASK = np.int64(~((1 << _DROP) - 1))
_MIN_NORMAL = 2.0 ** -126
_SUBNORMAL_ULP = 2.0 ** -133
BF16_MAX = (2.0 - 2.0 ** -7) * 2.0 ** 127


def bf16_round(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    bits = x.view(np.int64)
    lsb = (bits >> _DROP) & 1
    out = ((bits + _HALF + lsb) & _MASK).view(np.float64)
    tiny = np.abs(x) < _MIN_NORMAL
    if np.any(tiny):
        # np.round is half-to-even; the scaling is by a power of two, so exact
        out = np.where(tiny, np.round(x / _SUBNORMAL_ULP) * _SUBNORMAL_ULP, out)
    out = np.where(np.abs(out) > BF16_MAX, np.copysign(np.inf, x), out)
    return np.where(np.isfinite(x), out, x)
