"""Validity filters and pairwise-ranking pose scoring.

Evaluates the four unsupervised filters on native, shifted, and clashing
poses; demonstrates max-pass-count retention; and trains a tiny scorer on
ranked pose pairs.
"""

import numpy as np

from poseflow import check_pose, retain_best, symmetry_rmsd
from poseflow.filters import sphere_overlap_volume
from poseflow.scorer import ScorerTrainConfig, compute_pose_features, train_scorer
from poseflow.toysuite import generate_complex, sample_scorer_poses
from poseflow.velocity_net import flatten_protein

rec = generate_complex(5, 3)
conf = rec.ligand
prot_coords, prot_elements = rec.protein.heavy_atoms()
print(f"complex {rec.complex_id}: {conf.n_atoms} ligand atoms, {len(prot_coords)} protein sites")

print("\n== the four filters on hand-made poses ==")
cases = {
    "native": rec.native_coords,
    "shifted 3 A": rec.native_coords + [3.0, 0, 0],
    "shifted 8 A": rec.native_coords + [8.0, 0, 0],
    "far away (60 A)": rec.native_coords + [60.0, 0, 0],
}
for name, coords in cases.items():
    rep = check_pose(coords, conf.elements, prot_coords, prot_elements, conf)
    flags = "".join("+" if f else "-" for f in (rep.min_dist_ok, rep.max_dist_ok,
                                                rep.volume_overlap_ok, rep.internal_clash_ok))
    print(f"  {name:16s} flags[min,max,vol,clash]={flags}  pass={rep.pass_count}  "
          f"sep_ratio={min(rep.min_separation_ratio, 99):5.2f}  "
          f"contact={min(rep.nearest_contact, 99):5.2f} A  "
          f"overlap={rep.overlap_fraction:.4f}")

print("\n== retention keeps the max pass count ==")
reports = [check_pose(c, conf.elements, prot_coords, prot_elements, conf)
           for c in cases.values()]
kept = retain_best(list(zip(cases.keys(), reports)))
print(f"  retained: {[name for name, _ in kept]}")

print("\n== two-sphere overlap volume ==")
for d in (3.0, 2.0, 1.0, 0.0):
    v = sphere_overlap_volume(1.36, 1.36, d)
    print(f"  scaled carbon spheres at {d:3.1f} A: lens volume {v:6.3f} A^3")

print("\n== pairwise-ranking scorer ==")
rng = np.random.default_rng(3)
site_coords, layout = flatten_protein(rec.protein)
markers = site_coords[np.concatenate([layout.core_idx, layout.tip_idx])]
batches = []
for seed in range(12):
    sub = generate_complex(5, 10 + seed)
    pc, pe = sub.protein.heavy_atoms()
    sc, lay = flatten_protein(sub.protein)
    mk = sc[np.concatenate([lay.core_idx, lay.tip_idx])]
    poses = sample_scorer_poses(sub, rng, 10)
    feats = np.array([compute_pose_features(c, sub.ligand, pc, pe, mk) for c in poses])
    rmsds = np.array([symmetry_rmsd(c, sub.native_coords, sub.ligand).value for c in poses])
    batches.append((feats, rmsds))
scorer, info = train_scorer(batches[:9], batches[9:], config=ScorerTrainConfig(epochs=30, seed=4))
print(f"  held-out pairwise ranking accuracy: {info['val_accuracy']:.3f}")
print(f"  (a score is comparable only within one complex; higher = lower expected RMSD)")
