"""End-to-end: train the three stage models and dock held-out complexes.

Small budgets keep this demo around two minutes on a laptop CPU; the
acceptance suite runs the same pipeline at full scale (200 training
complexes, 50 held out, 40 samples each).
"""

import time

import numpy as np

from poseflow import (
    AugmentConfig,
    LossWeights,
    RolloutConfig,
    StageConfig,
    ToyVelocityNet,
    TrainConfig,
    check_pose,
    generate_corpus,
    retain_best,
    select_pose,
    staged_inference,
    symmetry_rmsd,
    train_stage,
)
from poseflow.scorer import ScorerTrainConfig, compute_pose_features, train_scorer
from poseflow.toysuite import sample_scorer_poses
from poseflow.velocity_net import flatten_protein

t0 = time.time()
train_corpus = generate_corpus(11, 60)
held_corpus = generate_corpus(1211, 8)
print(f"training on {len(train_corpus)} complexes, evaluating on {len(held_corpus)}")

weights = LossWeights()
aug = AugmentConfig()
nets = []
for stage in (1, 2, 3):
    net = ToyVelocityNet(np.random.default_rng(stage))
    curve = train_stage(net, train_corpus, StageConfig(stage=stage), aug, weights,
                        TrainConfig(steps=1200, batch_size=16, seed=stage))
    print(f"stage {stage}: loss {curve[0]:8.2f} -> {np.mean(curve[-50:]):7.3f}"
          f"   ({time.time() - t0:.0f}s)")
    nets.append(net)

print("training the scorer ...")
rng = np.random.default_rng(99)
batches = []
for rec in train_corpus[:40]:
    prot_coords, prot_elements = rec.protein.heavy_atoms()
    site_coords, layout = flatten_protein(rec.protein)
    markers = site_coords[np.concatenate([layout.core_idx, layout.tip_idx])]
    poses = sample_scorer_poses(rec, rng, 12)
    feats = np.array([compute_pose_features(c, rec.ligand, prot_coords, prot_elements, markers)
                      for c in poses])
    rmsds = np.array([symmetry_rmsd(c, rec.native_coords, rec.ligand).value for c in poses])
    batches.append((feats, rmsds))
scorer, info = train_scorer(batches[:32], batches[32:], config=ScorerTrainConfig(epochs=25, seed=5))
print(f"scorer held-out pairwise ranking accuracy: {info['val_accuracy']:.3f}")

print("\nblind docking, 16 samples x 10 Euler steps per complex:")
wins = 0
for rec in held_corpus:
    results = staged_inference(rec.ligand, rec.protein, nets,
                               RolloutConfig(n_steps=10, n_samples=16, seed=777))
    prot_coords, prot_elements = rec.protein.heavy_atoms()
    site_coords, layout = flatten_protein(rec.protein)
    markers = site_coords[np.concatenate([layout.core_idx, layout.tip_idx])]
    scored = []
    for r in results:
        rep = check_pose(r.coords, rec.ligand.elements, prot_coords, prot_elements, rec.ligand)
        feats = compute_pose_features(r.coords, rec.ligand, prot_coords, prot_elements, markers)
        scored.append((r, rep, float(scorer.score(feats)[0])))
    kept = retain_best([((r, s), rep) for r, rep, s in scored])
    best = kept[select_pose([s for (_, s), _ in kept])][0][0]
    rmsd = symmetry_rmsd(best.coords, rec.native_coords, rec.ligand).value
    wins += rmsd <= 2.0
    print(f"  {rec.complex_id}: retained {len(kept)}/16, selected pose RMSD {rmsd:5.2f} A"
          f"  {'ok' if rmsd <= 2.0 else 'MISS'}")
print(f"\nsuccess@2A: {wins}/{len(held_corpus)}   total {time.time() - t0:.0f}s")
