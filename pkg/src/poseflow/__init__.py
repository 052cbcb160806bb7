"""Flow-matching pose generation for protein-ligand docking at desk scale.

The library covers the geometric and algorithmic core of a staged docking
pipeline: rotation-group geodesics and sampling, torsional ligand
kinematics, conditional flow-matching targets and losses, a small trainable
velocity field with hand-rolled reverse-mode gradients, fixed-step Euler
inference in three coarse-to-fine stages, unsupervised physical-validity
filters, pairwise-ranking pose scoring, and symmetry-corrected / pocket-
aligned RMSD evaluation.  Everything is plain numpy over immutable value
types; per-pose and per-complex operations are pure and safe to fan out
across workers.
"""

from .evalkit import (
    AlignmentError,
    Chain,
    ProteinStructure,
    Residue,
    RmsdResult,
    pocket_align_base,
    pocket_align_pocketbased,
    success_rates,
    symmetry_rmsd,
)
from .filters import FilterThresholds, ValidityReport, check_pose, retain_best
from .flowmatch import (
    AugmentConfig,
    FlowSample,
    LossWeights,
    StageConfig,
    Velocity,
    augment,
    cfm_loss,
    interpolate_pose,
    make_training_sample,
    pose_velocity,
)
from .ligand import (
    Bond,
    LigandConformer,
    PoseTransform,
    RotatableBond,
    UnknownElementError,
    apply_pose,
    detect_rotatable_bonds,
    relative_pose,
)
from .manifold import (
    Rotation3,
    TangentSO3,
    Torsion,
    canonical_norm,
    geodesic_velocity_so3,
    sample_rotation_uniform,
    slerp_so3,
    slerp_torsion,
    torsion_delta,
    wrap_angle,
)
from .sampler import PoseResult, RolloutConfig, RolloutError, euler_rollout, staged_inference
from .scorer import PoseScorer, compute_pose_features, pairwise_rank_loss, select_pose, train_scorer
from .toysuite import generate_complex, generate_corpus
from .velocity_net import (
    AttentionBiasFeaturizer,
    ComplexFeaturizer,
    ToyVelocityNet,
    TrainConfig,
    train_stage,
)

__version__ = "0.1.0"
