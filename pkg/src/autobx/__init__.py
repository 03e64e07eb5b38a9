"""Hardware-free simulator of an autonomous ultrasound-guided needle placement workflow.

Stages: atlas-to-subject registration, scan planning and contact simulation,
virtual B-mode imaging, lesion detection and clustering, needle guidance and
accuracy evaluation. Hot kernels are compiled with Cython when available.
"""

from .kernels import BACKEND
from .geometry import FrameGraph, ImagingGeometry, RigidTransform
from .config import ExperimentConfig, default_config, load_config
from .evaluation import ExperimentReport, run_experiment

__all__ = [
    "BACKEND", "FrameGraph", "ImagingGeometry", "RigidTransform",
    "ExperimentConfig", "default_config", "load_config", "ExperimentReport", "run_experiment",
]
__version__ = "0.1.0"
