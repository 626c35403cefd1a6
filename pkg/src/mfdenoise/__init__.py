"""Multi-frame extensions of BM3D and Non-Local Bayes denoising."""
from .bm3d import Bm3dParams, bm3d_denoise
from .flow import FlowField, FlowParams, register_stack, solve_flow, warp
from .harness import ExperimentSpec, compare_to_reference, make_registered_dataset, run_grid
from .image import FrameStack, NoiseSpec, add_awgn, load_image, psnr, save_image
from .multiframe import (MethodId, UnsupportedMethodError, run_af, run_fa, run_method, run_mf,
                         run_pipeline, run_sf, temporal_average)
from .nlb import NlbParams, nlb_denoise

__all__ = [
    "Bm3dParams", "bm3d_denoise", "NlbParams", "nlb_denoise",
    "FlowField", "FlowParams", "register_stack", "solve_flow", "warp",
    "FrameStack", "NoiseSpec", "add_awgn", "load_image", "psnr", "save_image",
    "MethodId", "UnsupportedMethodError", "run_af", "run_fa", "run_sf", "run_mf",
    "run_method", "run_pipeline", "temporal_average",
    "ExperimentSpec", "compare_to_reference", "make_registered_dataset", "run_grid",
]
__version__ = "0.1.0"
