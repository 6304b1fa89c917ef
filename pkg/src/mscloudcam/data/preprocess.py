"""Reflectance normalization and label-taxonomy remapping."""
from __future__ import annotations

import numpy as np

from ..errors import DataError

REFLECTANCE_DIVISOR = 3000.0

# Landsat-8 raw mask values -> 4-class taxonomy (+ ignore)
L8BIOME_RAW = {
    0: 255,    # fill -> ignored
    64: 3,     # shadow
    128: 0,    # clear
    192: 2,    # thin cloud
    255: 1,    # cloud -> thick
}
IGNORE_INDEX = 255


def normalize_reflectance(raw: np.ndarray, divisor: float = REFLECTANCE_DIVISOR) -> np.ndarray:
    """Scale top-of-atmosphere reflectance counts by 1/3000. Linear, no
    clipping: values above the divisor stay above 1."""
    arr = np.asarray(raw)
    if not np.isfinite(arr).all():
        raise DataError("normalize_reflectance: input contains non-finite values")
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float32
    return (arr / divisor).astype(dtype, copy=False)


def remap_l8biome(labels: np.ndarray) -> np.ndarray:
    """Map raw mask values {0, 64, 128, 192, 255} onto
    {0 clear, 1 thick, 2 thin, 3 shadow, 255 ignore}.

    Any other raw value (including already-remapped 1/2/3) is rejected.
    """
    arr = np.asarray(labels)
    if arr.dtype.kind not in "iu":
        raise DataError("remap_l8biome: labels must be integer-typed")
    values, counts = np.unique(arr, return_counts=True)
    bad = [(int(v), int(n)) for v, n in zip(values, counts) if int(v) not in L8BIOME_RAW]
    if bad:
        desc = ", ".join(f"{v} ({n} px)" for v, n in bad)
        raise DataError(f"remap_l8biome: unexpected raw values: {desc}; "
                        f"expected {sorted(L8BIOME_RAW)}")
    lut = np.full(256, 255, dtype=np.uint8)
    for raw_v, mapped in L8BIOME_RAW.items():
        lut[raw_v] = mapped
    return lut[arr.astype(np.uint8)]
