"""Volumetric segmentation numerics on plain numpy.

Multi-scale 3D Haar wavelet inputs, sub-pixel (shuffle) upsampling, a
tape-based gradient engine, an encoder-decoder segmentation network with
deep supervision, overlap/surface metrics, and a preprocessing pipeline,
all behind dense (H, W, D, C) float32 volumes with voxel spacing in mm.
"""

from .autograd import (
    NumericError,
    Parameter,
    Tape,
    backward,
    kaiming_conv_weights,
    poly_lr,
    sgd_step,
)
from .losses import (
    deep_supervision_weights,
    dice_loss,
    dice_metric,
    hd95,
    one_hot,
    softmax_channels,
    total_loss,
)
from .network import NetConfig, SegNetwork, load_checkpoint, save_checkpoint
from .ops import (
    ConvKernel,
    SubpixelParams,
    checkerboard_metric,
    conv3d,
    decompose_transposed,
    pixel_shuffle,
    pixel_unshuffle,
    subpixel_block,
    transposed_conv3d,
)
from .preprocess import (
    DatasetFingerprint,
    SegSample,
    fingerprint,
    make_phantoms,
    mirror_augment,
    preprocess_case,
    sample_patch,
    target_spacing,
)
from .volume import (
    LabelVolume,
    Volume4,
    load_label,
    load_volume,
    save_label,
    save_volume,
)
from .wavelet import SubbandSet, WaveletPyramid, build_pyramid, concat_channels, dwt3d, idwt3d

__all__ = [
    "ConvKernel",
    "DatasetFingerprint",
    "LabelVolume",
    "NetConfig",
    "NumericError",
    "Parameter",
    "SegNetwork",
    "SegSample",
    "SubbandSet",
    "SubpixelParams",
    "Tape",
    "Volume4",
    "WaveletPyramid",
    "backward",
    "build_pyramid",
    "checkerboard_metric",
    "concat_channels",
    "conv3d",
    "decompose_transposed",
    "deep_supervision_weights",
    "dice_loss",
    "dice_metric",
    "dwt3d",
    "fingerprint",
    "hd95",
    "idwt3d",
    "kaiming_conv_weights",
    "load_checkpoint",
    "load_label",
    "load_volume",
    "make_phantoms",
    "mirror_augment",
    "one_hot",
    "pixel_shuffle",
    "pixel_unshuffle",
    "poly_lr",
    "preprocess_case",
    "sample_patch",
    "save_checkpoint",
    "save_label",
    "save_volume",
    "sgd_step",
    "softmax_channels",
    "subpixel_block",
    "target_spacing",
    "total_loss",
    "transposed_conv3d",
]
