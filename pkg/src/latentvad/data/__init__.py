from .distort import RAIN_LEVELS, DistortionSpec, distort, distort_video
from .frames import (BackgroundModel, FrameDecodeError, FrameTensor, SequenceSample, Video,
                     compute_background, count_samples, make_samples, preprocess, resize_bilinear,
                     stack_samples, subtract_background)
from .io import load_split, load_video, read_labels, write_labels, write_split
from .synthetic import SyntheticSpec, bounce_positions, generate_dataset, generate_moving_objects

__all__ = [
    "RAIN_LEVELS", "DistortionSpec", "distort", "distort_video",
    "BackgroundModel", "FrameDecodeError", "FrameTensor", "SequenceSample", "Video",
    "compute_background", "count_samples", "make_samples", "preprocess", "resize_bilinear",
    "stack_samples", "subtract_background",
    "load_split", "load_video", "read_labels", "write_labels", "write_split",
    "SyntheticSpec", "bounce_positions", "generate_dataset", "generate_moving_objects",
]
