"""Mesh-based cloth manipulation planning.

A toy mass-spring simulator generates manipulation data; a probabilistic
encode-manipulate-decode forward model and a voxel-to-mesh estimator are
trained on it; plans are found by backpropagating a normalised likelihood
plus epistemic-uncertainty loss through the forward model onto the
manipulation inputs.
"""

from .mesh import (PMR, CentredShape, WorkspaceConfig, apply_occlusion,
                   cartesian_equivalents, cartesian_to_geodesic, center_shape,
                   desk_config, flat_cloth, geodesic_to_cartesian,
                   paper_config, voxelize, whiten)
from .manip import Manipulation, build_trajectory, fold_restriction_ok, \
    is_null, map_manip_to_equivalent, release_points
from .sim import ClothSim, SimEnv, SimParams, SequenceRecord, \
    execute_manipulation, gen_dataset, gen_sequence, settle

__all__ = [
    "PMR", "CentredShape", "WorkspaceConfig", "apply_occlusion",
    "cartesian_equivalents", "cartesian_to_geodesic", "center_shape",
    "desk_config", "flat_cloth", "geodesic_to_cartesian", "paper_config",
    "voxelize", "whiten", "Manipulation", "build_trajectory",
    "fold_restriction_ok", "is_null", "map_manip_to_equivalent",
    "release_points", "ClothSim", "SimEnv", "SimParams", "SequenceRecord",
    "execute_manipulation", "gen_dataset", "gen_sequence", "settle",
]
