"""Diverse super-resolution sampling from a hierarchical VAE prior.

An HR hierarchical VAE is trained once. A small encoder then maps an LR image
to the top latent groups, the remaining groups are sampled from the prior, and
an optional affine projection makes every sample exactly consistent with the
LR input.
"""
from .degradation import DegradationOperator, downsample, project_consistent, rmse
from .hvae import HVAE, HierarchySpec, desk_spec
from .lr_encoder import LrEncoder, select_k, sr_sample

__all__ = [
    "DegradationOperator", "downsample", "project_consistent", "rmse",
    "HVAE", "HierarchySpec", "desk_spec",
    "LrEncoder", "select_k", "sr_sample",
]
