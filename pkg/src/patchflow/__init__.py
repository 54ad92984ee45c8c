"""Coupled patch-vector / motion-matrix representation of image pairs."""

from .core import (
    DisplacementField,
    DisplacementGrid,
    Encoder,
    GridSpec,
    MixedMotion,
    NonParametricMotion,
    ParametricMotion,
    VectorField,
    apply_motion,
    apply_motion_mixed,
    complex_cell_response,
    decode,
    encode,
    extract_patch,
    motion_matrix,
    reconstruction_loss,
    rotation_loss,
    support_offsets,
)

__version__ = "0.1.0"
