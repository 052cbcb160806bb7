"""Symmetry-corrected RMSD, pocket alignment protocols, and success metrics.

RMSD is minimized over ligand-graph automorphisms (element labels and bond
orders preserved), with no superposition: coordinates are compared in a
shared frame.  Two pocket-alignment protocols are provided: the "base"
variant aligns the reference pocket to the whole predicted protein with
refinement cycles; the "pocket-based" variant aligns each predicted pocket
chain to the reference pocket with no refinement and keeps the best chain,
which is known to inflate success rates on multi-pocket proteins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ligand import LigandConformer
from .manifold import fit_rotation

POCKET_CUTOFF = 10.0  # Angstrom, Calpha-to-ligand distance defining a pocket
REFINE_CYCLES = 5
REFINE_FACTOR = 2.0  # drop pairs with residual > factor * current RMS
AUTOMORPHISM_CAP = 10**6


class AlignmentError(RuntimeError):
    """Raised when fewer than three Calpha pairs can be matched."""


@dataclass(frozen=True)
class Residue:
    number: int
    name: str
    ca: np.ndarray
    atom_names: tuple[str, ...] = ()
    atom_elements: tuple[str, ...] = ()
    atom_coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        object.__setattr__(self, "ca", np.asarray(self.ca, dtype=float).reshape(3))
        object.__setattr__(self, "atom_coords", np.asarray(self.atom_coords, dtype=float).reshape(-1, 3))
        if len(self.atom_elements) != len(self.atom_coords):
            raise ValueError("atom elements and coords disagree")

    def backbone_flags(self) -> tuple[bool, ...]:
        return tuple(n in ("N", "CA", "C", "O") for n in self.atom_names)


@dataclass(frozen=True)
class Chain:
    chain_id: str
    residues: tuple[Residue, ...]


@dataclass(frozen=True)
class ProteinStructure:
    chains: tuple[Chain, ...]

    def __post_init__(self):
        object.__setattr__(self, "chains", tuple(self.chains))

    def heavy_atoms(self):
        """All non-hydrogen atom coordinates and elements across chains."""
        coords, elements = [], []
        for ch in self.chains:
            for res in ch.residues:
                for el, xyz in zip(res.atom_elements, res.atom_coords):
                    if el != "H":
                        coords.append(xyz)
                        elements.append(el)
        if not coords:
            return np.zeros((0, 3)), ()
        return np.array(coords), tuple(elements)

    def ca_coords(self) -> np.ndarray:
        out = [res.ca for ch in self.chains for res in ch.residues]
        return np.array(out) if out else np.zeros((0, 3))

    def n_residues(self) -> int:
        return sum(len(ch.residues) for ch in self.chains)


@dataclass(frozen=True)
class RmsdResult:
    value: float
    automorphism: tuple[int, ...] | None = None
    aligned: bool = False
    fallback_identity: bool = False


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, coords) -> np.ndarray:
        return np.asarray(coords, dtype=float) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class AlignResult:
    transform: RigidTransform
    rmsd: float
    n_pairs: int
    chain_id: str
    direction: str  # "ref_to_pred" (base) or "pred_to_ref" (pocket-based)


# ------------------------------------------------------------- automorphisms


def _atom_signatures(conformer: LigandConformer):
    """Static per-atom invariants used to prune the automorphism search."""
    n = conformer.n_atoms
    incident = [[] for _ in range(n)]
    for b in conformer.bonds:
        incident[b.i].append(b.order)
        incident[b.j].append(b.order)
    sig = []
    for i in range(n):
        nbr = tuple(sorted((conformer.elements[v], len(conformer.neighbors(v))) for v in conformer.neighbors(i)))
        sig.append((conformer.elements[i], len(conformer.neighbors(i)), tuple(sorted(incident[i])), nbr))
    return sig


def ligand_automorphisms(conformer: LigandConformer, cap: int = AUTOMORPHISM_CAP):
    """All graph automorphisms preserving elements and bond orders.

    Backtracking with element/degree/bond-order pruning.  Returns
    (permutations, capped): if the search would enumerate more than ``cap``
    automorphisms it stops and reports capped=True.
    """
    n = conformer.n_atoms
    sig = _atom_signatures(conformer)
    order_of = {}
    for b in conformer.bonds:
        order_of[(b.i, b.j)] = b.order
        order_of[(b.j, b.i)] = b.order
    candidates = [[j for j in range(n) if sig[j] == sig[i]] for i in range(n)]
    # Assign most-constrained vertices first, then by adjacency for pruning.
    by_constraint = sorted(range(n), key=lambda i: (len(candidates[i]), i))
    order = []
    seen = set()
    for start in by_constraint:
        if start in seen:
            continue
        stack = [start]
        seen.add(start)
        while stack:
            u = stack.pop()
            order.append(u)
            for v in sorted(conformer.neighbors(u)):
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
    mapping = [-1] * n
    used = [False] * n
    results: list[tuple[int, ...]] = []
    capped = False

    def backtrack(pos: int) -> bool:
        nonlocal capped
        if pos == n:
            results.append(tuple(mapping))
            if len(results) > cap:
                capped = True
                return False
            return True
        u = order[pos]
        for v in candidates[u]:
            if used[v]:
                continue
            ok = True
            for w in conformer.neighbors(u):
                mw = mapping[w]
                if mw >= 0 and order_of.get((v, mw)) != order_of[(u, w)]:
                    ok = False
                    break
            if not ok:
                continue
            mapping[u] = v
            used[v] = True
            if not backtrack(pos + 1):
                mapping[u] = -1
                used[v] = False
                return False
            mapping[u] = -1
            used[v] = False
        return True

    backtrack(0)
    if capped:
        return [tuple(range(n))], True
    return results, False


def symmetry_rmsd(pred_coords, ref_coords, conformer: LigandConformer,
                  cap: int = AUTOMORPHISM_CAP) -> RmsdResult:
    """Minimum heavy-atom RMSD over ligand-graph automorphisms.

    No superposition is performed; predicted and reference coordinates must
    already live in a shared frame.  If the automorphism count exceeds
    ``cap`` the identity permutation is used and the result is flagged.
    """
    pred = np.asarray(pred_coords, dtype=float)
    ref = np.asarray(ref_coords, dtype=float)
    if pred.shape != ref.shape or pred.shape != (conformer.n_atoms, 3):
        raise ValueError("coordinate shapes must match the conformer atom count")
    perms, capped = ligand_automorphisms(conformer, cap)
    best = math.inf
    best_perm = tuple(range(conformer.n_atoms))
    for perm in perms:
        p = list(perm)
        val = float(np.sqrt(np.mean(np.sum((pred[p] - ref) ** 2, axis=1))))
        if val < best:
            best = val
            best_perm = perm
    return RmsdResult(value=best, automorphism=best_perm, aligned=False, fallback_identity=capped)


# ------------------------------------------------------------------ alignment


def kabsch_transform(mobile, target) -> tuple[RigidTransform, float]:
    """Rigid transform minimizing ||R @ mobile_i + t - target_i|| and its RMSD."""
    mobile = np.asarray(mobile, dtype=float)
    target = np.asarray(target, dtype=float)
    cm, ct = mobile.mean(axis=0), target.mean(axis=0)
    r = fit_rotation(mobile - cm, target - ct)
    t = ct - r @ cm
    moved = mobile @ r.T + t
    rmsd = float(np.sqrt(np.mean(np.sum((moved - target) ** 2, axis=1))))
    return RigidTransform(r, t), rmsd


def _primary_chain(protein: ProteinStructure, ligand_coords: np.ndarray) -> Chain:
    """Chain with the most heavy atoms within POCKET_CUTOFF of the ligand."""
    best, best_count = None, -1
    for ch in protein.chains:
        coords = [xyz for res in ch.residues for el, xyz in zip(res.atom_elements, res.atom_coords) if el != "H"]
        if not coords:
            continue
        coords = np.array(coords)
        d = np.linalg.norm(coords[:, None, :] - ligand_coords[None, :, :], axis=-1)
        count = int((d.min(axis=1) <= POCKET_CUTOFF).sum())
        if count > best_count:
            best, best_count = ch, count
    if best is None:
        raise AlignmentError("protein has no heavy atoms")
    return best


def _pocket_residues(chain: Chain, ligand_coords: np.ndarray) -> list[Residue]:
    out = []
    for res in chain.residues:
        if np.min(np.linalg.norm(ligand_coords - res.ca, axis=1)) <= POCKET_CUTOFF:
            out.append(res)
    return out


def _refine(ref_pts: np.ndarray, pred_pts: np.ndarray, cycles: int):
    transform, rmsd = kabsch_transform(ref_pts, pred_pts)
    keep = np.arange(len(ref_pts))
    for _ in range(cycles):
        moved = transform.apply(ref_pts[keep])
        resid = np.linalg.norm(moved - pred_pts[keep], axis=1)
        rms = float(np.sqrt(np.mean(resid**2)))
        if rms == 0.0:
            break
        new_keep = keep[resid <= REFINE_FACTOR * rms]
        if len(new_keep) < 3 or len(new_keep) == len(keep):
            break
        keep = new_keep
        transform, rmsd = kabsch_transform(ref_pts[keep], pred_pts[keep])
    return transform, rmsd, keep


def pocket_align_base(ref_protein: ProteinStructure, ref_ligand_coords,
                      pred_protein: ProteinStructure, cycles: int = REFINE_CYCLES) -> AlignResult:
    """Align the reference pocket onto the whole predicted protein.

    The reference pocket (Calpha within 10 A of the reference ligand, primary
    chain only) is matched to predicted Calpha by (chain, residue number) and
    superposed by Kabsch, followed by outlier-rejection refinement cycles
    (pairs with residual > 2x the current RMS are dropped and the fit is
    repeated).  Returns the transform mapping reference coordinates into the
    predicted frame.
    """
    ref_ligand_coords = np.asarray(ref_ligand_coords, dtype=float)
    chain = _primary_chain(ref_protein, ref_ligand_coords)
    pocket = _pocket_residues(chain, ref_ligand_coords)
    pred_ca = {
        (ch.chain_id, res.number): res.ca for ch in pred_protein.chains for res in ch.residues
    }
    ref_pts, pred_pts = [], []
    for res in pocket:
        key = (chain.chain_id, res.number)
        if key in pred_ca:
            ref_pts.append(res.ca)
            pred_pts.append(pred_ca[key])
    if len(ref_pts) < 3:
        raise AlignmentError(
            f"only {len(ref_pts)} matched Calpha pairs for chain {chain.chain_id}"
        )
    transform, rmsd, keep = _refine(np.array(ref_pts), np.array(pred_pts), cycles)
    return AlignResult(transform, rmsd, int(len(keep)), chain.chain_id, "ref_to_pred")


def pocket_align_pocketbased(ref_protein: ProteinStructure, ref_ligand_coords,
                             pred_protein: ProteinStructure, pred_ligand_coords) -> AlignResult:
    """Align the predicted pocket onto the reference pocket, best chain wins.

    The predicted pocket is every Calpha within 10 A of the predicted ligand;
    each predicted chain is matched to the reference pocket by residue number
    and aligned with zero refinement cycles; the chain with minimum alignment
    RMSD is selected.  Returns the transform mapping predicted coordinates
    into the reference frame.
    """
    ref_ligand_coords = np.asarray(ref_ligand_coords, dtype=float)
    pred_ligand_coords = np.asarray(pred_ligand_coords, dtype=float)
    ref_chain = _primary_chain(ref_protein, ref_ligand_coords)
    ref_pocket = {res.number: res.ca for res in _pocket_residues(ref_chain, ref_ligand_coords)}
    if not ref_pocket:
        raise AlignmentError("reference pocket is empty")
    best: AlignResult | None = None
    for ch in pred_protein.chains:
        pocket = _pocket_residues(ch, pred_ligand_coords)
        pred_pts, ref_pts = [], []
        for res in pocket:
            if res.number in ref_pocket:
                pred_pts.append(res.ca)
                ref_pts.append(ref_pocket[res.number])
        if len(pred_pts) < 3:
            continue
        transform, rmsd = kabsch_transform(np.array(pred_pts), np.array(ref_pts))
        if best is None or rmsd < best.rmsd:
            best = AlignResult(transform, rmsd, len(pred_pts), ch.chain_id, "pred_to_ref")
    if best is None:
        raise AlignmentError("no predicted chain shares 3 pocket residues with the reference")
    return best


# ------------------------------------------------------------------- metrics


def success_rates(rows) -> dict:
    """Success fractions at the 2 A threshold.

    ``rows`` is an iterable of (rmsd, pass_count) pairs; pass_count may be
    None when validity was not evaluated.  RMSD of +inf counts as failure.
    """
    rows = list(rows)
    n = len(rows)
    if n == 0:
        return {"n": 0, "success_2a": 0.0, "success_2a_valid": 0.0}
    ok = sum(1 for r, _ in rows if r <= 2.0)
    ok_valid = sum(1 for r, pc in rows if r <= 2.0 and pc == 4)
    return {"n": n, "success_2a": ok / n, "success_2a_valid": ok_valid / n}
