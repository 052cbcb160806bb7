import math
import warnings

import numpy as np
import pytest

from poseflow.evalkit import symmetry_rmsd
from poseflow.manifold import sample_rotation_uniform
from poseflow.scorer import (
    FEATURE_DIM,
    PoseScorer,
    ScorerTrainConfig,
    compute_pose_features,
    pairwise_rank_grad,
    pairwise_rank_loss,
    ranking_accuracy,
    select_pose,
    train_scorer,
)
from poseflow.toysuite import generate_corpus, sample_scorer_poses
from poseflow.velocity_net import flatten_protein


# ----------------------------------------------------------------- rank loss


def test_rank_loss_saturation():
    assert pairwise_rank_loss(50.0, 0.0, 0.5, 3.0) < 1e-20
    assert pairwise_rank_loss(-50.0, 0.0, 0.5, 3.0) > 40.0


def test_rank_loss_equal_scores_log2():
    assert math.isclose(pairwise_rank_loss(1.3, 1.3, 0.5, 3.0), math.log(2.0))


def test_rank_loss_tie_handling():
    assert pairwise_rank_loss(2.0, -1.0, 1.00, 1.05) == 0.0
    assert pairwise_rank_grad(2.0, -1.0, 1.00, 1.05) == (0.0, 0.0)


def test_rank_loss_antisymmetric_in_ordering():
    # Swapping which pose is better maps loss(d) -> loss(-d).
    la = pairwise_rank_loss(1.0, 0.2, 0.5, 3.0)  # i better, margin +0.8
    lb = pairwise_rank_loss(1.0, 0.2, 3.0, 0.5)  # j better, margin -0.8
    assert math.isclose(la, float(np.logaddexp(0, -0.8)))
    assert math.isclose(lb, float(np.logaddexp(0, 0.8)))


def test_rank_grad_matches_finite_differences():
    eps = 1e-6
    for si, sj, ri, rj in [(0.3, -0.4, 1.0, 2.0), (-1.2, 0.8, 4.0, 0.2)]:
        gi, gj = pairwise_rank_grad(si, sj, ri, rj)
        ni = (pairwise_rank_loss(si + eps, sj, ri, rj) - pairwise_rank_loss(si - eps, sj, ri, rj)) / (2 * eps)
        nj = (pairwise_rank_loss(si, sj + eps, ri, rj) - pairwise_rank_loss(si, sj - eps, ri, rj)) / (2 * eps)
        assert abs(gi - ni) < 1e-4 * max(1.0, abs(ni))
        assert abs(gj - nj) < 1e-4 * max(1.0, abs(nj))


def test_rank_loss_rejects_nonfinite():
    with pytest.raises(ValueError):
        pairwise_rank_loss(0.0, 0.0, math.inf, 1.0)


# ------------------------------------------------------------------- scorer


def test_scorer_gradients_match_fd():
    from test_nn import numeric_gradients, relative_error
    from poseflow.nn import zero_grads

    rng = np.random.default_rng(0)
    scorer = PoseScorer(rng, hidden=8, feature_dim=5)
    feats = rng.normal(size=(6, 5))
    rmsds = rng.uniform(0, 4, size=6)

    def loss_fn():
        scores = scorer.forward(feats)
        total = 0.0
        for i in range(6):
            for j in range(i + 1, 6):
                total += pairwise_rank_loss(scores[i], scores[j], rmsds[i], rmsds[j])
        return total

    scores = scorer.forward(feats)
    g = np.zeros(6)
    for i in range(6):
        for j in range(i + 1, 6):
            gi, gj = pairwise_rank_grad(scores[i], scores[j], rmsds[i], rmsds[j])
            g[i] += gi
            g[j] += gj
    params = scorer.parameters()
    zero_grads(params)
    scorer.backward(g)
    numeric = numeric_gradients(loss_fn, params, eps=1e-5)
    for p, num in zip(params, numeric):
        assert relative_error(p.grad, num) < 1e-4, p.name


def test_perfectly_separable_feature_reaches_full_accuracy():
    # Feature = -RMSD: linearly separable ranking, accuracy -> 1.0.
    rng = np.random.default_rng(1)
    batches = []
    for _ in range(20):
        rmsds = rng.uniform(0, 6, size=8)
        feats = np.zeros((8, 2))
        feats[:, 0] = -rmsds
        feats[:, 1] = 1.0
        batches.append((feats, rmsds))
    scorer, info = train_scorer(batches[:16], batches[16:],
                                config=ScorerTrainConfig(epochs=60, lr=5e-3, seed=0))
    assert info["val_accuracy"] == 1.0


def test_shuffled_labels_give_chance_accuracy():
    rng = np.random.default_rng(2)
    batches = []
    for _ in range(30):
        rmsds = rng.uniform(0, 6, size=8)
        feats = np.zeros((8, 2))
        feats[:, 0] = -rng.permutation(rmsds)  # feature decoupled from label
        feats[:, 1] = 1.0
        batches.append((feats, rmsds))
    scorer, _ = train_scorer(batches[:20], config=ScorerTrainConfig(epochs=20, lr=5e-3, seed=1))
    acc = ranking_accuracy(scorer, batches[20:])
    assert abs(acc - 0.5) < 0.1


def test_all_tied_batch_skipped_with_warning():
    feats = np.zeros((3, 2))
    rmsds = np.array([1.0, 1.01, 1.02])
    good = (np.array([[1.0, 0], [0, 1.0], [0.5, 0.5]]), np.array([0.5, 2.0, 4.0]))
    with pytest.warns(UserWarning, match="all-tied"):
        train_scorer([(feats, rmsds), good], config=ScorerTrainConfig(epochs=1, seed=0))
    with pytest.raises(ValueError, match="no usable"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train_scorer([(feats, rmsds)], config=ScorerTrainConfig(epochs=1, seed=0))


def test_checkpoint_round_trip():
    rng = np.random.default_rng(3)
    scorer = PoseScorer(rng, hidden=8, feature_dim=4)
    state = scorer.to_state()
    clone = PoseScorer.from_state(state)
    x = rng.normal(size=(5, 4))
    assert np.array_equal(scorer.forward(x), clone.forward(x))


# -------------------------------------------------------------- pose features


def test_pose_features_rigid_motion_invariant():
    corpus = generate_corpus(23, 2)
    rec = corpus[0]
    prot_coords, prot_elements = rec.protein.heavy_atoms()
    site_coords, layout = flatten_protein(rec.protein)
    markers = site_coords[np.concatenate([layout.core_idx, layout.tip_idx])]
    f0 = compute_pose_features(rec.native_coords, rec.ligand, prot_coords, prot_elements, markers)
    assert f0.shape == (FEATURE_DIM,)
    rng = np.random.default_rng(4)
    g = sample_rotation_uniform(rng).matrix()
    shift = rng.normal(0, 15, 3)
    f1 = compute_pose_features(
        rec.native_coords @ g.T + shift, rec.ligand, prot_coords @ g.T + shift,
        prot_elements, markers @ g.T + shift,
    )
    assert np.allclose(f0, f1, atol=1e-9)


def test_scorer_separates_toy_poses():
    # End-to-end sanity: features + ranking training order noisy poses of
    # held-out complexes better than chance by a wide margin.
    corpus = generate_corpus(29, 14)
    rng = np.random.default_rng(5)
    batches = []
    for rec in corpus:
        prot_coords, prot_elements = rec.protein.heavy_atoms()
        site_coords, layout = flatten_protein(rec.protein)
        markers = site_coords[np.concatenate([layout.core_idx, layout.tip_idx])]
        poses = sample_scorer_poses(rec, rng, n_poses=10)
        feats = np.array([
            compute_pose_features(c, rec.ligand, prot_coords, prot_elements, markers)
            for c in poses
        ])
        rmsds = np.array([
            symmetry_rmsd(c, rec.native_coords, rec.ligand).value for c in poses
        ])
        batches.append((feats, rmsds))
    scorer, info = train_scorer(batches[:10], batches[10:],
                                config=ScorerTrainConfig(epochs=40, lr=3e-3, seed=2))
    assert info["val_accuracy"] >= 0.8


# ------------------------------------------------------------------ selection


def test_select_single_pose():
    assert select_pose([0.4]) == 0


def test_select_tie_breaks_low_index():
    assert select_pose([0.2, 0.9, 0.9]) == 1


def test_select_matches_bruteforce():
    rng = np.random.default_rng(6)
    for _ in range(20):
        scores = rng.normal(size=rng.integers(1, 30))
        want = min(i for i, s in enumerate(scores) if s == scores.max())
        assert select_pose(scores) == want


def test_select_invariant_to_monotone_transform():
    rng = np.random.default_rng(7)
    scores = rng.normal(size=12)
    assert select_pose(scores) == select_pose(np.tanh(scores) * 3 + 1)


def test_select_empty_rejected():
    with pytest.raises(ValueError):
        select_pose([])
