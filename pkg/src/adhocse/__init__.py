"""Distributed mask-based speech enhancement for ad-hoc microphone arrays."""
from .dsp import ComplexSpectrogram, StftConfig, istft, stft
from .masks import TFMask, ideal_ratio_mask
from .scene import SceneSpec, make_scene, sample_scene
from .danse import LinkFailurePlan, run_pipeline, iterate_danse
from .metrics import delta_sir, si_sdr, aggregate

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram", "StftConfig", "istft", "stft", "TFMask", "ideal_ratio_mask", "SceneSpec",
    "make_scene", "sample_scene", "LinkFailurePlan", "run_pipeline", "iterate_danse", "delta_sir", "si_sdr",
    "aggregate",
]
