"""RGB to hyperspectral reconstruction with spatio-spectral shuffle-window attention."""
from .config import CesstConfig, ConfigError
from .data import HsiCube, ResponseMatrix, SamplePair, hsi_to_rgb, load_cube, save_cube, synth_scene
from .model import CESST, MultiScalePrediction, cesst_forward, cesst_infer, make_variant
from .tensor import Tensor, backward, no_grad

__all__ = [
    "CESST", "CesstConfig", "ConfigError", "HsiCube", "MultiScalePrediction", "ResponseMatrix",
    "SamplePair", "Tensor", "backward", "cesst_forward", "cesst_infer", "hsi_to_rgb", "load_cube",
    "make_variant", "no_grad", "save_cube", "synth_scene",
]
