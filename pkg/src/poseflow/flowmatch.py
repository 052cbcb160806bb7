"""Conditional flow-matching targets, losses, and staged noise schedules.

A training sample pairs a noise pose x0 with a data pose x1 (the transform
restoring the working conformer to its native coordinates), interpolates at
t ~ U[0, 1] (linear translation, SLERP rotation and torsions) and supervises
the constant path velocity.  Squared norms are used throughout; the constant
factors of the canonical metric (sqrt(2) per angular component) are absorbed
into the loss weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ligand import LigandConformer, PoseTransform, apply_pose, relative_pose
from .manifold import (
    Rotation3,
    geodesic_velocity_so3,
    sample_rotation_gaussian,
    sample_rotation_uniform,
    sample_torsion_gaussian,
    sample_torsion_uniform,
    slerp_so3,
    slerp_torsion,
    torsion_delta,
)


@dataclass(frozen=True)
class StageConfig:
    """Noise schedule for one pipeline stage.

    Translation noise: stage 1 draws the ligand center from a wide Gaussian
    around the protein centroid; stage 2 from a medium Gaussian around the
    native center; stage 3 from a narrow one.  Angular noise is uniform for
    stages 1-2 and a tangent-space Gaussian around the truth for stage 3.
    """

    stage: int
    sigma_large: float = 15.0
    sigma_medium: float = 5.0
    sigma_small: float = 1.0
    sigma_rot: float = 0.3
    sigma_tor: float = 0.3

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not (self.sigma_large > self.sigma_medium > self.sigma_small > 0.0):
            raise ValueError("require sigma_large > sigma_medium > sigma_small > 0")
        if self.sigma_rot <= 0.0 or self.sigma_tor <= 0.0:
            raise ValueError("angular sigmas must be positive")


@dataclass(frozen=True)
class LossWeights:
    w_tr: float = 1.0
    w_rot: float = 1.0
    w_tor: float = 3.0

    def __post_init__(self):
        if min(self.w_tr, self.w_rot, self.w_tor) < 0.0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = True
    coord_noise: float = 0.25
    mask_fraction: float = 0.15

    def __post_init__(self):
        if self.coord_noise < 0.0 or not (0.0 <= self.mask_fraction < 1.0):
            raise ValueError("bad augmentation parameters")


@dataclass(frozen=True)
class Velocity:
    """Tangent-space velocity triple: R^3 x so(3) x so(2)^m."""

    tr: np.ndarray
    rot: np.ndarray
    tor: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tr", np.asarray(self.tr, dtype=float).reshape(3))
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float).reshape(3))
        object.__setattr__(self, "tor", np.asarray(self.tor, dtype=float).reshape(-1))


@dataclass(frozen=True)
class FlowSample:
    """One training tuple: endpoints, time, interpolant, and target velocity."""

    x0: PoseTransform
    x1: PoseTransform
    t: float
    xt: PoseTransform
    target: Velocity
    torsion_mask: np.ndarray = field(default_factory=lambda: np.ones(0, dtype=bool))


def interpolate_pose(x0: PoseTransform, x1: PoseTransform, t: float) -> PoseTransform:
    """Componentwise interpolation: linear tr, SLERP rotation and torsions."""
    return PoseTransform(
        tr=(1.0 - t) * x0.tr + t * x1.tr,
        rot=slerp_so3(x0.rot, x1.rot, t),
        torsions=tuple(slerp_torsion(a, b, t) for a, b in zip(x0.torsions, x1.torsions)),
    )


def pose_velocity(x0: PoseTransform, x1: PoseTransform) -> Velocity:
    """Constant velocity of the interpolation path from x0 to x1."""
    return Velocity(
        tr=x1.tr - x0.tr,
        rot=geodesic_velocity_so3(x0.rot, x1.rot).k,
        tor=np.array([torsion_delta(a, b) for a, b in zip(x0.torsions, x1.torsions)]),
    )


def sample_noise_pose(
    conformer: LigandConformer,
    x1: PoseTransform,
    native_center,
    config: StageConfig,
    rng: np.random.Generator,
    protein_center=None,
) -> PoseTransform:
    """Draw the stage-dependent noise pose x0 for a working conformer.

    The translation is parameterized as a centroid displacement; the draw
    places the ligand center at a Gaussian around the protein centroid
    (stage 1) or the native center (stages 2-3).
    """
    periods = conformer.torsion_periods()
    if config.stage == 3:
        rot = sample_rotation_gaussian(x1.rot, config.sigma_rot, rng)
        tors = tuple(
            sample_torsion_gaussian(t1, config.sigma_tor, rng) for t1 in x1.torsions
        )
    else:
        rot = sample_rotation_uniform(rng)
        tors = tuple(sample_torsion_uniform(p, rng) for p in periods)

    native_center = np.asarray(native_center, dtype=float)
    if config.stage == 1:
        center = native_center if protein_center is None else np.asarray(protein_center, dtype=float)
        target_center = center + config.sigma_large * rng.standard_normal(3)
    elif config.stage == 2:
        target_center = native_center + config.sigma_medium * rng.standard_normal(3)
    else:
        target_center = native_center + config.sigma_small * rng.standard_normal(3)

    probe = PoseTransform(np.zeros(3), rot, tors)
    c_probe = apply_pose(conformer, probe).mean(axis=0)
    return PoseTransform(target_center - c_probe, rot, tors)


def make_training_sample(
    conformer: LigandConformer,
    native_coords,
    config: StageConfig,
    rng: np.random.Generator,
    protein_center=None,
    torsion_mask=None,
) -> FlowSample:
    """Stage-wise sample construction: noise pose, time, interpolant, targets.

    ``conformer`` is the working (randomized) conformer; ``native_coords``
    the pose it should be restored to.  The data pose x1 is recovered
    exactly, the noise pose x0 drawn per the stage schedule, and the target
    velocity is the constant time derivative of the interpolation.
    """
    native_coords = np.asarray(native_coords, dtype=float)
    x1 = relative_pose(conformer, native_coords)
    x0 = sample_noise_pose(conformer, x1, native_coords.mean(axis=0), config, rng, protein_center)
    t = float(rng.uniform(0.0, 1.0))
    xt = interpolate_pose(x0, x1, t)
    target = pose_velocity(x0, x1)
    if torsion_mask is None:
        torsion_mask = np.ones(conformer.n_rotatable, dtype=bool)
    return FlowSample(x0=x0, x1=x1, t=t, xt=xt, target=target,
                      torsion_mask=np.asarray(torsion_mask, dtype=bool))


def cfm_loss(pred: Velocity, target: Velocity, weights: LossWeights, torsion_mask=None):
    """Weighted squared-error flow-matching loss and per-component terms.

    loss = w_tr ||v_tr - p_tr||^2 + w_rot ||k - p_rot||^2
         + w_tor sum_j (dtheta_j - p_tor_j)^2  over unmasked bonds.
    """
    if pred.tor.shape != target.tor.shape:
        raise ValueError(
            f"torsion dimension mismatch: pred {pred.tor.shape} vs target {target.tor.shape}"
        )
    term_tr = float(np.sum((pred.tr - target.tr) ** 2))
    term_rot = float(np.sum((pred.rot - target.rot) ** 2))
    d = pred.tor - target.tor
    if torsion_mask is not None:
        d = d[np.asarray(torsion_mask, dtype=bool)]
    term_tor = float(np.sum(d**2))
    total = weights.w_tr * term_tr + weights.w_rot * term_rot + weights.w_tor * term_tor
    return total, {"tr": term_tr, "rot": term_rot, "tor": term_tor}


@dataclass(frozen=True)
class AugmentResult:
    protein_coords: np.ndarray
    ligand_coords: np.ndarray
    protein_keep: np.ndarray
    ligand_keep: np.ndarray
    rotation: Rotation3


def augment(protein_coords, ligand_coords, config: AugmentConfig, rng: np.random.Generator) -> AugmentResult:
    """Random complex rotation, coordinate noise, and token masking.

    The same random rotation (about the complex centroid) is applied to
    protein and ligand; i.i.d. Gaussian noise is added to every coordinate;
    15% (configurable) of protein residues and ligand atoms are marked
    masked.  Masked tokens are dropped from model input downstream, not
    zeroed; coordinates are returned for all tokens.
    """
    protein_coords = np.asarray(protein_coords, dtype=float)
    ligand_coords = np.asarray(ligand_coords, dtype=float)
    if config.rotate:
        g = sample_rotation_uniform(rng)
        center = np.vstack([protein_coords, ligand_coords]).mean(axis=0)
        m = g.matrix()
        protein_coords = (protein_coords - center) @ m.T + center
        ligand_coords = (ligand_coords - center) @ m.T + center
    else:
        g = Rotation3.identity()
    if config.coord_noise > 0.0:
        protein_coords = protein_coords + config.coord_noise * rng.standard_normal(protein_coords.shape)
        ligand_coords = ligand_coords + config.coord_noise * rng.standard_normal(ligand_coords.shape)
    prot_keep = rng.random(len(protein_coords)) >= config.mask_fraction
    lig_keep = rng.random(len(ligand_coords)) >= config.mask_fraction
    return AugmentResult(protein_coords, ligand_coords, prot_keep, lig_keep, g)


def torsion_supervision_mask(conformer: LigandConformer, ligand_keep) -> np.ndarray:
    """Supervision mask: a torsion is dropped when its axis or its entire
    moving set is masked out."""
    keep = np.asarray(ligand_keep, dtype=bool)
    mask = np.ones(conformer.n_rotatable, dtype=bool)
    for j, rb in enumerate(conformer.rotatable_bonds):
        a, b = rb.axis
        axis_gone = not (keep[a] or keep[b])
        moving_gone = not keep[list(rb.moving)].any()
        if axis_gone or moving_gone:
            mask[j] = False
    return mask
