"""meshtune: test-time tuning of volumetric template meshes.

Diffeomorphic control-grid deformation driven by chamfer/pull losses and
volumetric strain-energy regularization, attachment-surface filtering, and a
hexahedral mesh-quality metric suite.

Submodules are imported lazily so the CLI can cap thread counts before numpy
loads.
"""

import importlib

__version__ = "0.1.0"

_API = {
    "VolumetricMesh": "mesh", "SurfaceMesh": "mesh", "LabeledPointCloud": "mesh",
    "extract_boundary_surface": "mesh", "base_surface_points": "mesh",
    "base_surface_triangulation": "mesh", "vertex_normals": "mesh",
    "connected_components": "mesh", "thickness_directions": "mesh",
    "build_surface": "mesh",
    "ControlGrid": "field", "DenseField": "field", "Lattice": "field",
    "DeformationModel": "field", "densify_bspline": "field",
    "scaling_and_squaring": "field", "sample_displacements": "field",
    "deform_mesh": "field",
    "EnergyWeights": "energy", "CellKinematics": "energy",
    "cell_kinematics": "energy",
    "deformation_gradient": "energy", "polar_rotation": "energy",
    "strain_energy": "energy", "bending_energy": "energy",
    "normal_consistency_loss": "energy", "laplacian_loss": "energy",
    "edge_correspondence_loss": "energy", "surface_edges": "energy",
    "NearestNeighborIndex": "loss", "sided_chamfer": "loss",
    "classwise_chamfer": "loss", "attachment_pull_loss": "loss",
    "VoxelMask": "attach", "AttachmentPair": "attach",
    "AttachmentPairing": "attach", "isosurface": "attach",
    "assign_pairs": "attach", "nearest_point_direction": "attach",
    "filter_by_direction": "attach", "filter_by_distance": "attach",
    "group_and_filter": "attach",
    "TuneConfig": "pipeline", "OptimState": "pipeline", "RunReport": "pipeline",
    "adam_step": "pipeline", "init_optim": "pipeline",
    "prealign_affine": "pipeline", "coarse_init": "pipeline",
    "flexfit_pseudolabels": "pipeline", "volumetric_fit": "pipeline",
    "tune": "pipeline",
    "MeshReport": "metrics", "chamfer_metric": "metrics",
    "hausdorff_metric": "metrics", "thickness_error": "metrics",
    "scaled_jacobian": "metrics", "skew": "metrics", "mesh_report": "metrics",
    "Scene": "synthetic", "make_scene": "synthetic",
    "tube_template": "synthetic", "slab_template": "synthetic",
    "three_plate_template": "synthetic", "tube_bulge_scene": "synthetic",
    "calcified_tube_scene": "synthetic", "bulge_displacement": "synthetic",
    "rasterize_spheres": "synthetic", "slab_scene": "synthetic",
    "MeshtuneError": "errors", "InputError": "errors",
    "OptimizationError": "errors",
}

__all__ = sorted(_API) + ["io"]


def __getattr__(name: str):
    if name == "io":
        return importlib.import_module(".io", __name__)
    try:
        module = _API[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(importlib.import_module(f".{module}", __name__), name)


def __dir__():
    return __all__
