"""Tracking-conditioned video segmentation on a procedural ultrasound-like phantom."""
from .config import Config, load_config
from .data import ClipRecord, TrajectorySet, VideoClip, read_clip, write_clip
from .phantom import PhantomSpec, generate_clip

__all__ = ["Config", "load_config", "ClipRecord", "TrajectorySet", "VideoClip", "read_clip", "write_clip",
           "PhantomSpec", "generate_clip"]
__version__ = "0.1.0"
