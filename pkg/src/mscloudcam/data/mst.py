"""The .mst raster container (little-endian):

    magic   "MST1"                      4 bytes
    dtype   u8   0 = float32 payload, 1 = uint8 payload (label maps)
    sensor  u8   0 sentinel2_l1c, 1 sentinel2_l2a, 2 landsat8, 255 custom
    reserved u16 (zero)
    C, H, W u32 each
    payload C*H*W values, row-major within each channel, channel-major
    labels  u8 presence byte; if 1, H*W uint8 labels follow

External geospatial tooling is expected to produce .mst directly: read the
bands (e.g. rasterio), scale reflectance, stack to (C, H, W) float32, and
write with :func:`save_mst`. GeoTIFF/SAFE parsing itself is out of scope.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataError

MAGIC = b"MST1"
SENSOR_CODES = {"sentinel2_l1c": 0, "sentinel2_l2a": 1, "landsat8": 2, "custom": 255}
SENSOR_NAMES = {v: k for k, v in SENSOR_CODES.items()}
SENSOR_BANDS = {"sentinel2_l1c": 13, "sentinel2_l2a": 13, "landsat8": 11}
VALID_LABELS = frozenset({0, 1, 2, 3, 255})
_MAX_ELEMENTS = 1 << 33  # dim overflow guard

_HEADER = struct.Struct("<4sBBHIII")


@dataclass
class RasterSample:
    """One scene: reflectance stack (C, H, W) float32 plus an optional
    (H, W) uint8 label map in {0 clear, 1 thick, 2 thin, 3 shadow, 255 ignore}."""

    image: Optional[np.ndarray]
    labels: Optional[np.ndarray]
    sensor: str
    id: str

    def validate(self) -> "RasterSample":
        if self.sensor not in SENSOR_CODES:
            raise DataError(f"sample {self.id}: unknown sensor {self.sensor!r}")
        if self.image is not None:
            if self.image.ndim != 3:
                raise DataError(f"sample {self.id}: image must be (C, H, W)")
            want = SENSOR_BANDS.get(self.sensor)
            if want is not None and self.image.shape[0] != want:
                raise DataError(f"sample {self.id}: sensor {self.sensor} expects "
                                f"{want} bands, image has {self.image.shape[0]}")
        if self.labels is not None:
            bad = np.setdiff1d(np.unique(self.labels), sorted(VALID_LABELS))
            if bad.size:
                raise DataError(f"sample {self.id}: label values {bad.tolist()} "
                                f"outside {sorted(VALID_LABELS)}")
            if self.image is not None and self.labels.shape != self.image.shape[1:]:
                raise DataError(f"sample {self.id}: labels {self.labels.shape} do not "
                                f"match image spatial {self.image.shape[1:]}")
        return self

    @property
    def hw(self):
        if self.image is not None:
            return self.image.shape[1:]
        return self.labels.shape


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{what} short: expected {n} bytes, got {len(buf)}")
    return buf


def save_mst(sample: RasterSample, path) -> None:
    sample.validate()
    if sample.image is None:
        raise DataError(f"sample {sample.id}: no image payload to save; "
                        "use save_labels_mst for label-only files")
    img = np.ascontiguousarray(sample.image, dtype="<f4")
    c, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, 0, SENSOR_CODES[sample.sensor], 0, c, h, w))
        fh.write(img.tobytes())
        if sample.labels is None:
            fh.write(b"\x00")
        else:
            fh.write(b"\x01")
            fh.write(np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes())


def save_labels_mst(labels: np.ndarray, path, sensor: str = "custom") -> None:
    """Write a label-only container (dtype code 1, single channel)."""
    lab = np.ascontiguousarray(labels, dtype=np.uint8)
    if lab.ndim != 2:
        raise DataError("save_labels_mst: labels must be (H, W)")
    h, w = lab.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, 1, SENSOR_CODES.get(sensor, 255), 0, 1, h, w))
        fh.write(lab.tobytes())
        fh.write(b"\x00")


def load_mst(path) -> RasterSample:
    p = Path(path)
    if not p.exists():
        raise DataError(f"mst file not found: {p}")
    with open(p, "rb") as fh:
        head = _read_exact(fh, _HEADER.size, "header")
        magic, dtype_code, sensor_code, _reserved, c, h, w = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataError(f"{p}: bad magic {magic!r}, expected {MAGIC!r}")
        if dtype_code not in (0, 1):
            raise DataError(f"{p}: unknown dtype code {dtype_code}")
        sensor = SENSOR_NAMES.get(sensor_code)
        if sensor is None:
            raise DataError(f"{p}: unknown sensor code {sensor_code}")
        if c < 1 or h < 1 or w < 1 or c * h * w > _MAX_ELEMENTS:
            raise DataError(f"{p}: dim overflow: C={c} H={h} W={w}")
        n = c * h * w
        if dtype_code == 0:
            payload = _read_exact(fh, 4 * n, "payload")
            image = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()
            labels = None
        else:
            payload = _read_exact(fh, n, "payload")
            image = None
            labels = np.frombuffer(payload, dtype=np.uint8).reshape(c, h, w)[0].copy()
        presence = _read_exact(fh, 1, "label flag")[0]
        if presence == 1:
            lab = _read_exact(fh, h * w, "label block")
            labels = np.frombuffer(lab, dtype=np.uint8).reshape(h, w).copy()
        elif presence != 0:
            raise DataError(f"{p}: label presence byte must be 0 or 1, got {presence}")
    return RasterSample(image=image, labels=labels, sensor=sensor, id=p.stem).validate()
