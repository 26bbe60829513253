from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm
from .rle import RLEError, rle_decode, rle_encode
from .synthetic import (
    CLASSES,
    Instance,
    SceneSet,
    SyntheticScene,
    generate_dataset,
    load_split,
    render_scene,
    scene_seeds,
    validate_scene,
)

__all__ = [
    "CLASSES",
    "Instance",
    "RLEError",
    "SceneSet",
    "SyntheticScene",
    "generate_dataset",
    "load_split",
    "read_pgm",
    "read_ppm",
    "render_scene",
    "rle_decode",
    "rle_encode",
    "scene_seeds",
    "validate_scene",
    "write_pgm",
    "write_ppm",
]
