"""Pose scoring with an RMSD-based pairwise ranking objective.

Scores are comparable only within one complex; higher means a lower expected
RMSD.  Features are rigid-motion invariant descriptors of the candidate pose
against the receptor; the ranking loss is a logistic loss on the score
difference of (better, worse) pairs, with pairs closer than 0.1 A in RMSD
treated as ties that contribute no gradient.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .filters import FilterThresholds, check_pose
from .ligand import LigandConformer
from .nn import MLP, make_optimizer, zero_grads

FEATURE_DIM = 15
RMSD_TIE = 0.1
CHECKPOINT_FORMAT = "poseflow-net-1"

_SHELLS = (2.5, 3.5, 5.0, 8.0)


def compute_pose_features(
    ligand_coords,
    conformer: LigandConformer,
    protein_coords,
    protein_elements,
    marker_coords=None,
    thresholds: FilterThresholds = FilterThresholds(),
) -> np.ndarray:
    """Invariant descriptor vector of one candidate pose.

    Contact counts in distance shells, nearest-distance statistics, the four
    filters' raw values, radius of gyration, and (when pocket marker sites
    are provided) marker-to-ligand proximity statistics.
    """
    lig = np.asarray(ligand_coords, dtype=float)
    prot = np.asarray(protein_coords, dtype=float)
    rep = check_pose(lig, conformer.elements, prot, protein_elements, conformer, thresholds)

    d = np.linalg.norm(lig[:, None, :] - prot[None, :, :], axis=-1)
    nearest = d.min(axis=1)
    counts = []
    prev = 0.0
    for edge in _SHELLS:
        counts.append(float(np.mean((d > prev) & (d <= edge))) * 10.0)
        prev = edge
    c = lig.mean(axis=0)
    r_gyr = float(np.sqrt(np.mean(np.sum((lig - c) ** 2, axis=1))))

    if marker_coords is not None and len(marker_coords):
        md = np.linalg.norm(np.asarray(marker_coords, dtype=float)[:, None, :] - lig[None, :, :], axis=-1)
        site_nearest = md.min(axis=1)
        marker_mean = float(site_nearest.mean())
        marker_max = float(site_nearest.max())
    else:
        marker_mean = marker_max = 0.0

    clip = lambda x, hi: min(float(x), hi)
    return np.array(
        [
            clip(nearest.min(), 12.0) / 10.0,
            clip(nearest.mean(), 12.0) / 10.0,
            clip(nearest.max(), 12.0) / 10.0,
            *counts,
            clip(rep.min_separation_ratio, 3.0),
            clip(rep.overlap_fraction, 1.0),
            clip(rep.worst_clash_ratio, 3.0),
            float(rep.pass_count) / 4.0,
            r_gyr / 10.0,
            conformer.n_atoms / 20.0,
            clip(marker_mean, 12.0) / 10.0,
            clip(marker_max, 12.0) / 10.0,
        ]
    )


@dataclass(frozen=True)
class ScoredPose:
    index: int
    score: float


class PoseScorer:
    """Small MLP mapping pose features to a scalar score."""

    def __init__(self, rng: np.random.Generator, hidden: int = 32, feature_dim: int = FEATURE_DIM):
        self.mlp = MLP([feature_dim, hidden, hidden, 1], rng, name="scorer")
        self._config = {"hidden": hidden, "feature_dim": feature_dim}

    def parameters(self):
        return self.mlp.parameters()

    def forward(self, features: np.ndarray) -> np.ndarray:
        return self.mlp.forward(np.asarray(features, dtype=float)).reshape(-1)

    def backward(self, gout: np.ndarray) -> None:
        self.mlp.backward(np.asarray(gout, dtype=float).reshape(-1, 1))

    def score(self, features: np.ndarray) -> np.ndarray:
        return self.forward(np.atleast_2d(features))

    def to_state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": "scorer",
            "config": dict(self._config),
            "params": {p.name: p.value.tolist() for p in self.parameters()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "PoseScorer":
        if state.get("format") != CHECKPOINT_FORMAT or state.get("kind") != "scorer":
            raise ValueError("not a scorer checkpoint")
        cfg = state["config"]
        scorer = cls(np.random.default_rng(0), hidden=cfg["hidden"], feature_dim=cfg["feature_dim"])
        params = {p.name: p for p in scorer.parameters()}
        for name, value in state["params"].items():
            params[name].value[...] = np.asarray(value, dtype=float)
        return scorer


def pairwise_rank_loss(score_i: float, score_j: float, rmsd_i: float, rmsd_j: float) -> float:
    """Logistic loss on the (better, worse) score margin; ties contribute 0.

    better = the pose with lower RMSD; loss = log(1 + exp(-(s_b - s_w))).
    Pairs with |rmsd_i - rmsd_j| < 0.1 A are ties with zero loss and zero
    gradient.
    """
    if not (math.isfinite(rmsd_i) and math.isfinite(rmsd_j)):
        raise ValueError("rmsd values must be finite")
    if abs(rmsd_i - rmsd_j) < RMSD_TIE:
        return 0.0
    margin = (score_i - score_j) if rmsd_i < rmsd_j else (score_j - score_i)
    return float(np.logaddexp(0.0, -margin))


def pairwise_rank_grad(score_i: float, score_j: float, rmsd_i: float, rmsd_j: float):
    """d loss / d (score_i, score_j) for the pairwise logistic loss."""
    if abs(rmsd_i - rmsd_j) < RMSD_TIE:
        return 0.0, 0.0
    sign = 1.0 if rmsd_i < rmsd_j else -1.0
    margin = sign * (score_i - score_j)
    g = -1.0 / (1.0 + math.exp(margin))  # d loss / d margin
    return g * sign, -g * sign


def ranking_accuracy(scorer: PoseScorer, batches) -> float:
    """Fraction of non-tied intra-complex pairs ordered correctly."""
    good = total = 0
    for features, rmsds in batches:
        scores = scorer.forward(features)
        k = len(rmsds)
        for i in range(k):
            for j in range(i + 1, k):
                if abs(rmsds[i] - rmsds[j]) < RMSD_TIE:
                    continue
                total += 1
                better, worse = (i, j) if rmsds[i] < rmsds[j] else (j, i)
                if scores[better] > scores[worse]:
                    good += 1
    return good / total if total else 0.0


@dataclass(frozen=True)
class ScorerTrainConfig:
    epochs: int = 40
    lr: float = 3e-3
    optimizer: str = "adamw"
    seed: int = 0


def train_scorer(train_batches, val_batches=None, hidden: int = 32,
                 config: ScorerTrainConfig = ScorerTrainConfig()):
    """Fit a scorer on per-complex batches of (features, rmsds).

    Each batch holds multiple noisy poses of one complex; the mean pairwise
    ranking loss over all intra-complex pairs is minimized.  Batches whose
    poses are all within the tie threshold are skipped with a warning.
    Returns (scorer, info) where info carries the loss curve and the
    held-out pairwise ranking accuracy.
    """
    usable = []
    for features, rmsds in train_batches:
        rmsds = np.asarray(rmsds, dtype=float)
        if not np.isfinite(rmsds).all():
            raise ValueError("rmsd values must be finite")
        diffs = np.abs(rmsds[:, None] - rmsds[None, :])
        if (diffs[np.triu_indices(len(rmsds), 1)] < RMSD_TIE).all():
            warnings.warn("skipping all-tied scorer batch", stacklevel=2)
            continue
        usable.append((np.asarray(features, dtype=float), rmsds))
    if not usable:
        raise ValueError("no usable scorer batches")

    rng = np.random.default_rng(config.seed)
    scorer = PoseScorer(rng, hidden=hidden, feature_dim=usable[0][0].shape[1])
    params = scorer.parameters()
    opt = make_optimizer(config.optimizer, params, config.lr)
    curve = []
    order = np.arange(len(usable))
    for _ in range(config.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        n_pairs = 0
        for bi in order:
            features, rmsds = usable[bi]
            scores = scorer.forward(features)
            gscores = np.zeros_like(scores)
            batch_loss = 0.0
            batch_pairs = 0
            k = len(rmsds)
            for i in range(k):
                for j in range(i + 1, k):
                    if abs(rmsds[i] - rmsds[j]) < RMSD_TIE:
                        continue
                    batch_loss += pairwise_rank_loss(scores[i], scores[j], rmsds[i], rmsds[j])
                    gi, gj = pairwise_rank_grad(scores[i], scores[j], rmsds[i], rmsds[j])
                    gscores[i] += gi
                    gscores[j] += gj
                    batch_pairs += 1
            if batch_pairs == 0:
                continue
            zero_grads(params)
            scorer.backward(gscores / batch_pairs)
            opt.step()
            epoch_loss += batch_loss
            n_pairs += batch_pairs
        curve.append(epoch_loss / max(n_pairs, 1))
    info = {"loss_curve": curve}
    if val_batches is not None:
        info["val_accuracy"] = ranking_accuracy(scorer, val_batches)
    info["train_accuracy"] = ranking_accuracy(scorer, usable)
    return scorer, info


def select_pose(scores) -> int:
    """Index of the maximum score; ties break to the lowest index."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("select_pose requires at least one score")
    return int(np.argmax(scores))
