"""Unsupervised physical-validity filters and max-pass-count retention.

Four checks per pose: (i) minimum ligand-protein separation relative to
van-der-Waals contact distances, (ii) at least one ligand atom close enough
to the protein to interact, (iii) bounded ligand-protein volume overlap, and
(iv) no intramolecular steric clash between atoms more than two bonds apart.
All raw measured values are carried in the report so thresholds can be
re-applied offline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ligand import LigandConformer, vdw_radius


@dataclass(frozen=True)
class FilterThresholds:
    c_min: float = 0.75      # pass (i) iff every pair dist >= c_min * (r_i + r_j)
    d_max: float = 5.0       # pass (ii) iff nearest contact <= d_max Angstrom
    s_vol: float = 0.8       # radius scale for the overlap computation
    f_max: float = 0.075     # pass (iii) iff overlap fraction <= f_max
    c_clash: float = 0.80    # pass (iv) iff far intra pairs >= c_clash * (r_i + r_j)


@dataclass(frozen=True)
class ValidityReport:
    min_dist_ok: bool
    max_dist_ok: bool
    volume_overlap_ok: bool
    internal_clash_ok: bool
    pass_count: int
    min_distance: float          # smallest ligand-protein distance, Angstrom
    min_separation_ratio: float  # min over pairs of dist / (r_i + r_j)
    nearest_contact: float       # min over ligand atoms of nearest protein atom
    overlap_fraction: float      # pairwise sphere overlap / ligand sphere volume
    worst_clash_ratio: float     # min over far intra pairs of dist / (r_i + r_j)

    def __post_init__(self):
        flags = (self.min_dist_ok, self.max_dist_ok, self.volume_overlap_ok, self.internal_clash_ok)
        if self.pass_count != sum(flags):
            raise ValueError("pass_count must equal the number of true flags")

    def to_dict(self) -> dict:
        return {
            "min_dist_ok": self.min_dist_ok,
            "max_dist_ok": self.max_dist_ok,
            "volume_overlap_ok": self.volume_overlap_ok,
            "internal_clash_ok": self.internal_clash_ok,
            "pass_count": self.pass_count,
            "min_distance": self.min_distance,
            "min_separation_ratio": self.min_separation_ratio,
            "nearest_contact": self.nearest_contact,
            "overlap_fraction": self.overlap_fraction,
            "worst_clash_ratio": self.worst_clash_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValidityReport":
        return cls(**d)


def sphere_overlap_volume(r1: float, r2: float, d: float) -> float:
    """Volume of the lens where two spheres of radii r1, r2 at distance d overlap."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        r = min(r1, r2)
        return 4.0 / 3.0 * math.pi * r**3
    return (
        math.pi
        * (r1 + r2 - d) ** 2
        * (d * d + 2 * d * (r1 + r2) - 3 * (r1 - r2) ** 2)
        / (12.0 * d)
    )


def grid_pairs(query: np.ndarray, points: np.ndarray, cutoff: float):
    """Index pairs (i, j) with ||query_i - points_j|| <= cutoff.

    Uniform spatial hash grid with cell size equal to the cutoff; exact
    within floating point (all 27 neighbor cells are visited).
    """
    if len(query) == 0 or len(points) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    cell = float(cutoff)
    keys = np.floor(points / cell).astype(np.int64)
    buckets: dict[tuple, list[int]] = {}
    for j, k in enumerate(map(tuple, keys)):
        buckets.setdefault(k, []).append(j)
    out_i, out_j = [], []
    qkeys = np.floor(query / cell).astype(np.int64)
    for i, qk in enumerate(map(tuple, qkeys)):
        cand = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    cand.extend(buckets.get((qk[0] + dx, qk[1] + dy, qk[2] + dz), ()))
        if not cand:
            continue
        cand = np.array(cand)
        d = np.linalg.norm(points[cand] - query[i], axis=1)
        close = cand[d <= cutoff]
        out_i.extend([i] * len(close))
        out_j.extend(close.tolist())
    return np.array(out_i, dtype=int), np.array(out_j, dtype=int)


def check_pose(
    ligand_coords,
    ligand_elements,
    protein_coords,
    protein_elements,
    conformer: LigandConformer | None = None,
    thresholds: FilterThresholds = FilterThresholds(),
) -> ValidityReport:
    """Evaluate the four validity filters for one pose.

    ``conformer`` supplies the ligand bond graph for the internal-clash
    check (pairs separated by more than two bonds); if omitted, ligand
    elements/coords must still match in length and check (iv) passes
    trivially only when no such pairs exist.
    """
    lig = np.asarray(ligand_coords, dtype=float)
    prot = np.asarray(protein_coords, dtype=float)
    lig_r = np.array([vdw_radius(e) for e in ligand_elements])
    prot_r = np.array([vdw_radius(e) for e in protein_elements])
    if len(lig) != len(lig_r) or len(prot) != len(prot_r):
        raise ValueError("coordinate and element counts disagree")

    max_pair_radius = float(lig_r.max() + prot_r.max()) if len(prot) else 0.0
    cutoff = max(thresholds.d_max, max_pair_radius)
    ii, jj = grid_pairs(lig, prot, cutoff)

    nearest = np.full(len(lig), np.inf)
    min_ratio = math.inf
    min_dist = math.inf
    overlap_volume = 0.0
    if len(ii):
        d = np.linalg.norm(lig[ii] - prot[jj], axis=1)
        np.minimum.at(nearest, ii, d)
        rsum = lig_r[ii] + prot_r[jj]
        min_ratio = float(np.min(d / rsum))
        min_dist = float(np.min(d))
        s = thresholds.s_vol
        for a, b, dist in zip(ii, jj, d):
            overlap_volume += sphere_overlap_volume(s * lig_r[a], s * prot_r[b], float(dist))

    ligand_volume = float(np.sum(4.0 / 3.0 * math.pi * (thresholds.s_vol * lig_r) ** 3))
    overlap_fraction = overlap_volume / ligand_volume if ligand_volume > 0 else 0.0
    nearest_contact = float(np.min(nearest)) if len(lig) else math.inf

    worst_clash = math.inf
    if conformer is not None:
        gd = conformer.graph_distances()
        iu, ju = np.triu_indices(len(lig), 1)
        far = gd[iu, ju] > 2
        if far.any():
            fi, fj = iu[far], ju[far]
            dd = np.linalg.norm(lig[fi] - lig[fj], axis=1)
            worst_clash = float(np.min(dd / (lig_r[fi] + lig_r[fj])))

    min_dist_ok = min_ratio >= thresholds.c_min
    max_dist_ok = nearest_contact <= thresholds.d_max
    volume_ok = overlap_fraction <= thresholds.f_max
    clash_ok = worst_clash >= thresholds.c_clash
    return ValidityReport(
        min_dist_ok=bool(min_dist_ok),
        max_dist_ok=bool(max_dist_ok),
        volume_overlap_ok=bool(volume_ok),
        internal_clash_ok=bool(clash_ok),
        pass_count=int(min_dist_ok) + int(max_dist_ok) + int(volume_ok) + int(clash_ok),
        min_distance=min_dist,
        min_separation_ratio=min_ratio,
        nearest_contact=nearest_contact,
        overlap_fraction=overlap_fraction,
        worst_clash_ratio=worst_clash,
    )


def retain_best(items_with_reports):
    """Poses whose pass count equals the maximum in the list, order preserved."""
    items = list(items_with_reports)
    if not items:
        raise ValueError("retain_best requires a nonempty pose list")
    best = max(rep.pass_count for _, rep in items)
    return [(item, rep) for item, rep in items if rep.pass_count == best]
