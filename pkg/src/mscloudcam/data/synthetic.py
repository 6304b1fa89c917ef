"""Procedural scenes for desk-scale runs.

Each sample is a smooth low-reflectance background (clear) with bright
grid-aligned cloud banks (thick), translucent lifts (thin), and darkened
offset copies of the banks (shadow). Labels follow the generators exactly,
every scene contains all four classes, and the spectral signatures are
strongly separated so small models can fit the data quickly.
"""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from ..errors import ConfigError
from .mst import RasterSample

DEFAULT_GRID = 16


def _sensor_for(c_in: int, sensor: Optional[str]) -> str:
    if sensor is not None:
        return sensor
    return {13: "sentinel2_l1c", 11: "landsat8"}.get(c_in, "custom")


def _rect_mask(hw: int, grid: int, r0: int, c0: int, th: int, tw: int) -> np.ndarray:
    m = np.zeros((hw, hw), dtype=bool)
    m[r0 * grid:(r0 + th) * grid, c0 * grid:(c0 + tw) * grid] = True
    return m


def _free_rect(rng, occupied: np.ndarray, tiles: int, grid: int, hw: int) -> np.ndarray:
    """First grid rectangle (up to 2x2 tiles) fully outside ``occupied``."""
    order = rng.permutation(tiles * tiles)
    for sz in (2, 1):
        for flat in order:
            r0, c0 = divmod(int(flat), tiles)
            th = tw = min(sz, tiles - max(r0, c0))
            if th < 1:
                continue
            cand = _rect_mask(hw, grid, r0, c0, th, tw)
            if not (cand & occupied).any():
                return cand
    raise ConfigError("synthetic: no free tile left for the thin-cloud region")


def synth_dataset(n: int, hw: int, c_in: int, seed: int,
                  sensor: Optional[str] = None, grid: int = DEFAULT_GRID
                  ) -> List[RasterSample]:
    """Generate ``n`` deterministic (seeded) scenes of size hw x hw."""
    if n < 1:
        raise ConfigError("synthetic: n must be >= 1")
    if hw < 2 * grid:
        raise ConfigError(f"synthetic: hw must be at least {2 * grid} (two tiles)")
    sensor = _sensor_for(c_in, sensor)
    tiles = hw // grid
    streams = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)

        # smooth clear background, per-channel level
        base = 0.12 + 0.16 * rng.random(c_in)
        yy = np.linspace(0.0, 1.0, hw)[:, None]
        xx = np.linspace(0.0, 1.0, hw)[None, :]
        fy, fx = rng.integers(1, 4, size=2)
        phase = rng.random(2) * 2 * np.pi
        smooth = 0.08 * np.sin(2 * np.pi * fy * yy + phase[0]) \
            * np.cos(2 * np.pi * fx * xx + phase[1])
        img = base[:, None, None] * (1.0 + smooth[None])

        # thick bank placed so its one-tile diagonal shadow stays in frame
        th = int(rng.integers(1, 2 if tiles <= 2 else 3))
        tw = int(rng.integers(1, 2 if tiles <= 2 else 3))
        r0 = int(rng.integers(0, tiles - th))
        c0 = int(rng.integers(0, tiles - tw))
        thick = _rect_mask(hw, grid, r0, c0, th, tw)
        shadow = np.roll(thick, (grid, grid), axis=(0, 1)) & ~thick

        thin = _free_rect(rng, thick | shadow, tiles, grid, hw)

        thick_level = 1.7 + 0.5 * rng.random(c_in)
        img[:, thick] = thick_level[:, None]
        img[:, shadow] *= 0.30
        img[:, thin] += (0.55 + 0.15 * rng.random(c_in))[:, None]
        img += 0.01 * rng.standard_normal((c_in, hw, hw))
        np.maximum(img, 0.0, out=img)

        labels = np.zeros((hw, hw), dtype=np.uint8)
        labels[thick] = 1
        labels[shadow] = 3
        labels[thin] = 2

        samples.append(RasterSample(image=img.astype(np.float32), labels=labels,
                                    sensor=sensor, id=f"synth-{seed}-{i:04d}").validate())
    return samples
