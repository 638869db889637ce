"""Optimization orchestration.

Adam, affine pre-alignment, coarse-grid initialization, the flex-fit
pseudo-label generator (surface regularizers in place of volumetric strain),
and the full tune loop that refines a snap-stage mesh against pseudo-labels
and filtered attachment surfaces.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attach import (DEFAULT_TAU_COS, DEFAULT_TAU_DIST_MM, AttachmentPairing,
                     VoxelMask, group_and_filter, isosurface)
from .energy import (EnergyWeights, StrainModel, bending_energy,
                     edge_correspondence_loss, face_pair_cosines,
                     laplacian_coordinates, laplacian_loss,
                     normal_consistency_loss, surface_edges)
from .errors import InputError, OptimizationError
from .field import (DEFAULT_DENSE_SPACING_MM, DEFAULT_SQUARING_STEPS,
                    ControlGrid, DeformationModel, Lattice)
from .loss import attachment_pull_loss, classwise_chamfer
from .mesh import (LabeledPointCloud, SurfaceMesh, VolumetricMesh,
                   base_surface_points, base_surface_triangulation,
                   extract_boundary_surface, thickness_directions)
from .metrics import mesh_report, scaled_jacobian

REGULARIZER_MODES = ("volumetric", "field-bending")

# control spacing in dense-lattice units: fine for tune, coarse for init
TUNE_SPACING_UNITS = 16
COARSE_SPACING_UNITS = 32


@dataclass(frozen=True)
class TuneConfig:
    """All weights, iteration counts, thresholds and schedules for the
    test-time optimization pipeline."""

    lambda_user: float = 1.0
    w1_d1: float = 1.0
    lambda2_d2: float = 1.0
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    regularizer: str = "volumetric"
    learning_rate: float = 1e-3
    iterations: int = 1000
    dense_spacing: float = DEFAULT_DENSE_SPACING_MM
    control_spacing: float | None = None
    coarse_spacing: float | None = None
    squaring_steps: int = DEFAULT_SQUARING_STEPS
    tau_cos: float = DEFAULT_TAU_COS
    tau_dist: float = DEFAULT_TAU_DIST_MM
    attach_refresh: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lambda_user < 0:
            raise InputError("lambda_user must be >= 0")
        if self.iterations < 1:
            raise InputError("iterations must be >= 1")
        if self.regularizer not in REGULARIZER_MODES:
            raise InputError(f"regularizer must be one of {REGULARIZER_MODES}")

    def resolved_control_spacing(self) -> float:
        return (self.control_spacing if self.control_spacing is not None
                else TUNE_SPACING_UNITS * self.dense_spacing)

    def resolved_coarse_spacing(self) -> float:
        return (self.coarse_spacing if self.coarse_spacing is not None
                else COARSE_SPACING_UNITS * self.dense_spacing)

    def to_dict(self) -> dict:
        d = {
            "lambda_user": self.lambda_user,
            "w1_d1": self.w1_d1,
            "lambda2_d2": self.lambda2_d2,
            "lambda0": self.weights.lambda0,
            "lambda1_aniso": self.weights.lambda1_aniso,
            "lambda3_normal": self.weights.lambda3_normal,
            "lambda4_laplacian": self.weights.lambda4_laplacian,
            "lambda5_edge": self.weights.lambda5_edge,
            "regularizer": self.regularizer,
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "dense_spacing": self.dense_spacing,
            "control_spacing": self.control_spacing,
            "coarse_spacing": self.coarse_spacing,
            "squaring_steps": self.squaring_steps,
            "tau_cos": self.tau_cos,
            "tau_dist": self.tau_dist,
            "attach_refresh": self.attach_refresh,
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TuneConfig":
        d = dict(d)
        wnames = ("lambda0", "lambda1_aniso", "lambda3_normal",
                  "lambda4_laplacian", "lambda5_edge")
        wkw = {k: d.pop(k) for k in wnames if k in d}
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(weights=EnergyWeights(**wkw), **d)


@dataclass(frozen=True)
class OptimState:
    """Adam state: parameters plus first/second moment accumulators."""

    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    def __post_init__(self):
        if self.m.shape != self.params.shape or self.v.shape != self.params.shape:
            raise InputError("moment shapes must match parameter shape")


def init_optim(params: np.ndarray) -> OptimState:
    params = np.asarray(params, dtype=float)
    return OptimState(params, np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(state: OptimState, gradient: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> OptimState:
    """One bias-corrected Adam update.

    Raises
    ------
    OptimizationError
        On non-finite gradient entries.
    """
    g = np.asarray(gradient, dtype=float)
    if g.shape != state.params.shape:
        raise InputError("gradient shape must match parameter shape")
    if not np.isfinite(g).all():
        bad = int((~np.isfinite(g)).sum())
        raise OptimizationError(f"non-finite gradient ({bad} entries) at "
                                f"step {state.step + 1}")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptimState(params, m, v, t)


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise OptimizationError(f"non-finite {what}")


@dataclass
class RunReport:
    """Deterministic run summary; wall-clock timings are kept separately so
    reports are byte-identical across identical-seed runs."""

    config: dict
    loss_trace: list
    final_losses: dict
    metrics: dict
    displacement_mean_mm: float
    displacement_max_mm: float
    flags: list = field(default_factory=list)
    timings_sec: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {
            "config": self.config,
            "final_losses": self.final_losses,
            "metrics": self.metrics,
            "displacement_mean_mm": self.displacement_mean_mm,
            "displacement_max_mm": self.displacement_max_mm,
            "flags": list(self.flags),
            "loss_trace": self.loss_trace,
        }
        if include_timings:
            d["timings_sec"] = dict(self.timings_sec)
        return d


def _scatter_class_grads(bar_vertices: np.ndarray, cloud: LabeledPointCloud,
                         grads: list, weight: float) -> None:
    for ids, g in zip(cloud.source_vertices, grads):
        np.add.at(bar_vertices, ids, weight * g)


def prealign_affine(template: VolumetricMesh, targets: LabeledPointCloud,
                    iterations: int = 2000, learning_rate: float = 3e-3) -> tuple:
    """Affine pre-alignment of the template base surface onto target points.

    Minimizes the class-wise symmetric chamfer over the 12 affine parameters
    with Adam, initialized at the centroid-matching translation with identity
    linear part.

    Returns
    -------
    ((3, 4) affine [A | t], transformed VolumetricMesh)

    Raises
    ------
    OptimizationError
        If the loss increases for 100 consecutive steps.
    """
    base = base_surface_points(template)
    cx = np.concatenate(base.classes).mean(axis=0)
    cy = targets.all_points().mean(axis=0)
    params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    state = init_optim(params)
    best_params, best_value = state.params, np.inf
    prev = np.inf
    bad_streak = 0
    for _ in range(iterations):
        M = state.params[:9].reshape(3, 3)
        b = state.params[9:]
        moved = LabeledPointCloud(
            tuple((c - cx) @ M.T + cy + b for c in base.classes))
        value, grads = classwise_chamfer(moved, targets)
        _check_finite(value, "pre-alignment loss")
        if value < best_value:
            best_params, best_value = state.params, value
        gM = np.zeros((3, 3))
        gb = np.zeros(3)
        for c, g in zip(base.classes, grads):
            gM += g.T @ (c - cx)
            gb += g.sum(axis=0)
        state = adam_step(state, np.concatenate([gM.ravel(), gb]),
                          learning_rate)
        if value > prev:
            bad_streak += 1
            if bad_streak >= 100:
                raise OptimizationError("pre-alignment diverged: loss "
                                        "increased 100 consecutive steps")
        else:
            bad_streak = 0
        prev = value
    # Adam wanders at learning-rate scale around flat optima; keep the best
    # iterate seen
    M = best_params[:9].reshape(3, 3)
    b = best_params[9:]
    t = cy + b - M @ cx
    affine = np.concatenate([M, t[:, None]], axis=1)
    new_vertices = np.asarray(template.vertices) @ M.T + t
    return affine, template.with_vertices(new_vertices)


class _FitProblem:
    """Shared machinery for grid-parameterized fits: deformation model,
    base-point chamfer, and one of three regularizers."""

    def __init__(self, template: VolumetricMesh, targets: LabeledPointCloud,
                 config: TuneConfig, regularizer: str,
                 control_spacing: float, rest_mesh: VolumetricMesh | None = None,
                 reg_scale: float = 1.0):
        lo, hi = template.bounding_box()
        self.lattice = Lattice.for_box(lo, hi, config.dense_spacing)
        grid = ControlGrid.covering(self.lattice.origin,
                                    self.lattice.origin + self.lattice.spacing
                                    * (np.asarray(self.lattice.dims) - 1),
                                    control_spacing)
        self.grid = grid
        self.model = DeformationModel(template, grid, self.lattice,
                                      steps=config.squaring_steps, clamp=True)
        self.template = template
        self.targets = targets
        self.config = config
        self.regularizer = regularizer
        self.reg_scale = reg_scale
        self.base = base_surface_points(template)
        rest = rest_mesh if rest_mesh is not None else template
        if regularizer == "volumetric":
            dirs = thickness_directions(rest) if rest.is_hex else None
            self.strain = StrainModel(rest, dirs, config.weights)
        elif regularizer == "surface":
            self.base_tri = base_surface_triangulation(template)
            self.base_edges, self.base_rest_vecs = surface_edges(self.base_tri)
            # template-relative references: zero regularizer gradient at the
            # identity, so direct optimization keeps the pseudo-labeler's
            # fixed-point property
            self.ref_cos = face_pair_cosines(self.base_tri)
            self.ref_lap = laplacian_coordinates(self.base_tri)

    def evaluate(self, velocities: np.ndarray) -> tuple:
        """Returns (total, grad wrt velocities, component dict)."""
        cfg = self.config
        u, cache = self.model.forward(velocities)
        verts = np.asarray(self.template.vertices) + u
        bar = np.zeros_like(verts)

        moved = LabeledPointCloud(
            tuple(verts[ids] for ids in self.base.source_vertices),
            source_vertices=self.base.source_vertices)
        d1, grads = classwise_chamfer(moved, self.targets)
        _check_finite(d1, "chamfer loss")
        _scatter_class_grads(bar, moved, grads, 1.0)
        components = {"chamfer": d1}
        total = d1
        grad_velocity_direct = None

        w = cfg.lambda_user * self.reg_scale
        if self.regularizer == "volumetric":
            reg, g = self.strain(verts)
            bar += w * g
            total += w * reg
            components["strain"] = reg
        elif self.regularizer == "field-bending":
            reg, g = bending_energy(self.grid.with_velocities(velocities))
            grad_velocity_direct = w * g
            total += w * reg
            components["bending"] = reg
        elif self.regularizer == "surface":
            wts = cfg.weights
            surf = self.base_tri.with_vertices(verts[self.base_tri.source_vertices])
            nval, ng = normal_consistency_loss(surf, reference_cos=self.ref_cos)
            lval, lg = laplacian_loss(surf, reference=self.ref_lap)
            eval_, eg = edge_correspondence_loss(
                self.base_edges, self.base_rest_vecs,
                u[self.base_tri.source_vertices])
            reg = (wts.lambda3_normal * nval + wts.lambda4_laplacian * lval
                   + wts.lambda5_edge * eval_)
            sg = (wts.lambda3_normal * ng + wts.lambda4_laplacian * lg
                  + wts.lambda5_edge * eg)
            np.add.at(bar, self.base_tri.source_vertices, self.reg_scale * sg)
            total += self.reg_scale * reg
            components["surface_reg"] = reg
        _check_finite(total, "objective")
        grad = self.model.vjp(cache, bar)
        if grad_velocity_direct is not None:
            grad += grad_velocity_direct
        components["total"] = total
        return total, grad, components

    def run(self, iterations: int | None = None) -> tuple:
        cfg = self.config
        n_iter = cfg.iterations if iterations is None else iterations
        state = init_optim(np.zeros(self.grid.dims + (3,)))
        trace = []
        for i in range(n_iter):
            total, grad, comps = self.evaluate(state.params)
            trace.append({"iteration": i, **comps})
            state = adam_step(state, grad, cfg.learning_rate)
        return state.params, trace

    def deformed(self, velocities: np.ndarray) -> VolumetricMesh:
        u = self.model.displace(velocities)
        return self.template.with_vertices(np.asarray(self.template.vertices) + u)


def coarse_init(template: VolumetricMesh, targets: LabeledPointCloud,
                config: TuneConfig,
                rest_mesh: VolumetricMesh | None = None) -> ControlGrid:
    """Optimize a coarse-spacing control grid under the tune objective.

    Guarantees all scaled Jacobians of the deformed mesh are positive on
    exit: on failure the regularization weight is raised 10x and the fit is
    retried once.

    Returns
    -------
    ControlGrid with the optimized coarse velocities.
    """
    spacing = config.resolved_coarse_spacing()
    for attempt, scale in enumerate((1.0, 10.0)):
        problem = _FitProblem(template, targets, config, config.regularizer,
                              spacing, rest_mesh=rest_mesh, reg_scale=scale)
        velocities, _ = problem.run()
        deformed = problem.deformed(velocities)
        if scaled_jacobian(deformed).min() > 0:
            return problem.grid.with_velocities(velocities)
        if attempt == 0:
            warnings.warn("coarse init produced a degenerate element; "
                          "retrying with regularization x10")
    raise OptimizationError("coarse init failed: degenerate elements after "
                            "regularization retry")


def flexfit_pseudolabels(template: VolumetricMesh, targets: LabeledPointCloud,
                         config: TuneConfig) -> LabeledPointCloud:
    """Flexible surface fit standing in for a learned pseudo-labeler.

    Optimizes the usual chamfer objective, but regularized with the surface
    suite (normal consistency + Laplacian + edge correspondence) instead of
    volumetric strain, so the fit hugs high-curvature targets more closely.
    Returns the base-surface points of the fitted mesh.
    """
    problem = _FitProblem(template, targets, config, "surface",
                          config.resolved_control_spacing())
    velocities, _ = problem.run()
    return base_surface_points(problem.deformed(velocities))


def volumetric_fit(template: VolumetricMesh, targets: LabeledPointCloud,
                   config: TuneConfig) -> LabeledPointCloud:
    """Volumetric-strain-regularized counterpart of `flexfit_pseudolabels`
    (same objective as tune without attachments); used for comparisons."""
    problem = _FitProblem(template, targets, config, "volumetric",
                          config.resolved_control_spacing())
    velocities, _ = problem.run()
    return base_surface_points(problem.deformed(velocities))


def tune(snap_mesh: VolumetricMesh, original_template: VolumetricMesh,
         pseudo_labels: LabeledPointCloud,
         attachment: SurfaceMesh | VoxelMask | None = None,
         config: TuneConfig | None = None) -> tuple:
    """Test-time optimization of control-grid displacements on a snap mesh.

    Minimizes  w1 * D1 + lambda2 * D2 + lambda_user * Psi  where D1 is the
    class-wise symmetric chamfer of the deforming base surface against the
    pseudo-labels, D2 the one-sided pull from filtered attachment points onto
    each component surface, and Psi the volumetric strain anchored to the
    original template's rest state (or the field bending energy in
    "field-bending" mode).  Attachment pairing is refreshed every
    `config.attach_refresh` iterations since the mesh surface moves.

    Returns
    -------
    (final VolumetricMesh, RunReport)
    """
    config = config or TuneConfig()
    if not snap_mesh.same_connectivity(original_template):
        raise InputError("snap mesh and template must share connectivity")
    if snap_mesh.n_classes != pseudo_labels.n_classes:
        raise InputError("pseudo-label class count must match base classes")

    lo, hi = snap_mesh.bounding_box()
    lattice = Lattice.for_box(lo, hi, config.dense_spacing)
    grid = ControlGrid.covering(
        lattice.origin,
        lattice.origin + lattice.spacing * (np.asarray(lattice.dims) - 1),
        config.resolved_control_spacing())
    model = DeformationModel(snap_mesh, grid, lattice,
                             steps=config.squaring_steps, clamp=True)

    base = base_surface_points(snap_mesh)
    volumetric = config.regularizer == "volumetric"
    strain = None
    if volumetric:
        dirs = thickness_directions(original_template) \
            if original_template.is_hex else None
        strain = StrainModel(original_template, dirs, config.weights)

    S = None
    if attachment is not None:
        S = isosurface(attachment) if isinstance(attachment, VoxelMask) \
            else attachment
    comp_surfaces = None
    if S is not None:
        comp_surfaces = [extract_boundary_surface(snap_mesh, c)
                         for c in range(snap_mesh.n_components)]

    snap_vertices = np.asarray(snap_mesh.vertices)
    state = init_optim(np.zeros(grid.dims + (3,)))
    trace = []
    pairing: AttachmentPairing | None = None

    for i in range(config.iterations):
        u, cache = model.forward(state.params)
        verts = snap_vertices + u
        bar = np.zeros_like(verts)

        moved = LabeledPointCloud(
            tuple(verts[ids] for ids in base.source_vertices),
            source_vertices=base.source_vertices)
        d1, grads = classwise_chamfer(moved, pseudo_labels)
        _scatter_class_grads(bar, moved, grads, config.w1_d1)
        total = config.w1_d1 * d1
        entry = {"iteration": i, "d1": d1}

        d2 = 0.0
        if S is not None:
            if i % config.attach_refresh == 0:
                pairing = group_and_filter(snap_mesh.with_vertices(verts), S,
                                           config.tau_cos, config.tau_dist)
            live = [p for p in pairing.pairs if not p.empty]
            if live:
                pull_pairs = [(verts[comp_surfaces[p.component].source_vertices],
                               p.surface.vertices) for p in live]
                d2, pull_grads = attachment_pull_loss(pull_pairs)
                # attachment_pull_loss divides by the pairs given; rescale to
                # the full Alg-1 pair count
                d2 *= len(live) / len(pairing.pairs)
                for p, g in zip(live, pull_grads):
                    np.add.at(bar, comp_surfaces[p.component].source_vertices,
                              config.lambda2_d2 * g * (len(live) / len(pairing.pairs)))
            total += config.lambda2_d2 * d2
            entry["d2"] = d2

        grad_velocity_direct = None
        if volumetric:
            reg, g = strain(verts)
            bar += config.lambda_user * g
        else:
            reg, g = bending_energy(grid.with_velocities(state.params))
            grad_velocity_direct = config.lambda_user * g
        total += config.lambda_user * reg
        entry["reg"] = reg
        entry["total"] = total
        _check_finite(total, "tune objective")
        trace.append(entry)

        grad = model.vjp(cache, bar)
        if grad_velocity_direct is not None:
            grad += grad_velocity_direct
        state = adam_step(state, grad, config.learning_rate)

    u = model.displace(state.params)
    final = snap_mesh.with_vertices(snap_vertices + u)
    disp_norm = np.linalg.norm(u, axis=1)
    flags = []
    jac = scaled_jacobian(final)
    if jac.min() <= 0:
        flags.append("negative_scaled_jacobian")  # should be impossible: bug
    report = RunReport(
        config=config.to_dict(),
        loss_trace=trace,
        final_losses={k: v for k, v in trace[-1].items() if k != "iteration"},
        metrics=mesh_report(final, reference_points=pseudo_labels,
                            reference_mesh=original_template).to_dict(),
        displacement_mean_mm=float(disp_norm.mean()),
        displacement_max_mm=float(disp_norm.max()),
        flags=flags,
    )
    return final, report
