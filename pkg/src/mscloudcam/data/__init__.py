from .manifest import SplitManifest
from .mst import RasterSample, load_mst, save_labels_mst, save_mst
from .preprocess import normalize_reflectance, remap_l8biome
from .synthetic import synth_dataset

__all__ = [
    "RasterSample",
    "SplitManifest",
    "load_mst",
    "normalize_reflectance",
    "remap_l8biome",
    "save_labels_mst",
    "save_mst",
    "synth_dataset",
]
