from . import alloc
from .adam import AdamState, adam_direction, adam_step
from .resample import resample_array, resample_scale, resample_warp, scaled_dims
from .smoothing import (box_kernel1d, convolve_separable, gaussian_kernel1d, gaussian_smooth,
                        normalized_convolve)
from .types import AffineMap, DomainBounds, LabelVolume, Volume3, WarpField, index_to_normalized

__all__ = [
    "alloc", "AdamState", "adam_direction", "adam_step", "resample_array", "resample_scale",
    "resample_warp", "scaled_dims", "box_kernel1d", "convolve_separable", "gaussian_kernel1d",
    "gaussian_smooth", "normalized_convolve", "AffineMap", "DomainBounds", "LabelVolume", "Volume3", "WarpField",
    "index_to_normalized",
]
