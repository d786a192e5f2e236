"""Binary motion classification of annotated vehicles from dense optical flow."""

__version__ = "0.1.0"

from .bboxprep import Box2D, preprocess_roi
from .flowcore import FlowField, read_npy, write_npy
from .labeling import MotionLabel

__all__ = ["Box2D", "FlowField", "MotionLabel", "preprocess_roi", "read_npy", "write_npy", "__version__"]
