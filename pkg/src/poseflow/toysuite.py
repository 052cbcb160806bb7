"""Procedural docking problems with exact ground truth.

Each synthetic complex is a small ligand (ring core plus 0-4 rotatable
branches) docked at the center of a spherical-shell pseudo-protein with an
aperture.  Pocket marker residues on chain "Z" sit near the native positions
of canonically chosen ligand atoms: the rigid-core markers ("ANC") carry
zero-sum outward offsets so their mean matches the atom mean exactly, and
per-torsion markers ("TIP") are offset radially off the bond axis so their
azimuth matches the native tip.  Every native pose passes all four validity
filters by construction (verified; complexes are regenerated otherwise).
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .evalkit import Chain, ProteinStructure, Residue
from .filters import FilterThresholds, check_pose
from .io_formats import SCHEMA_VERSION, TOOL_VERSION, ComplexRecord
from .ligand import (
    Bond,
    LigandConformer,
    PoseTransform,
    ROTATABLE_RULE_VERSION,
    apply_pose,
    canonical_anchor_atoms,
    tip_atom,
)
from .manifold import Rotation3, Torsion, sample_rotation_uniform, sample_torsion_uniform

SHELL_GAP = 3.0          # Angstrom between the outermost ligand atom and the shell
ANCHOR_CLEARANCE = 2.85  # minimum marker-to-ligand-atom distance (> vdW limits)
N_CORE_ANCHORS = 4

_TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / math.sqrt(3)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])


def _perp_frame(d):
    """Two unit vectors orthogonal to d and to each other."""
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = _unit(np.cross(d, ref))
    return e1, np.cross(d, e1)


def _build_ligand(rng: np.random.Generator):
    """Random ligand graph and native-geometry coordinates (local frame)."""
    ring_size = int(rng.integers(4, 7))
    radius = 1.5 / (2.0 * math.sin(math.pi / ring_size))
    coords = []
    elements = []
    bonds = []
    for k in range(ring_size):
        ang = 2.0 * math.pi * k / ring_size
        coords.append(np.array([radius * math.cos(ang), radius * math.sin(ang), 0.0]))
        elements.append("C" if rng.random() < 0.8 else "N")
        bonds.append(Bond(k, (k + 1) % ring_size, order=1, in_ring=True))

    # Atom budget first; branches honor it (6-20 heavy atoms overall).
    target_atoms = int(rng.integers(max(6, ring_size), 21))
    n_branches = int(rng.integers(0, 5))
    branch_sites = rng.choice(ring_size, size=min(n_branches, ring_size), replace=False)
    branch_size = {"chain": 2, "sym3": 4, "sym2": 3}
    for site in sorted(int(s) for s in branch_sites):
        kind = str(rng.choice(["chain", "sym3", "sym2"], p=[0.5, 0.3, 0.2]))
        if len(coords) + branch_size[kind] > target_atoms:
            continue
        radial = _unit(coords[site])
        tilt = math.radians(float(rng.uniform(15.0, 35.0))) * (1 if rng.random() < 0.5 else -1)
        direction = _unit(radial * math.cos(tilt) + np.array([0.0, 0.0, math.sin(tilt)]))
        b1 = coords[site] + 1.5 * direction
        b1_idx = len(coords)
        coords.append(b1)
        elements.append("C")
        bonds.append(Bond(site, b1_idx))
        e1, e2 = _perp_frame(direction)
        if kind == "chain":
            beta = math.radians(70.0)
            phase = float(rng.uniform(0.0, 2.0 * math.pi))
            d2 = _unit(
                direction * math.cos(beta)
                + math.sin(beta) * (math.cos(phase) * e1 + math.sin(phase) * e2)
            )
            coords.append(b1 + 1.5 * d2)
            elements.append(str(rng.choice(["C", "N", "O"])))
            bonds.append(Bond(b1_idx, len(coords) - 1))
        else:
            n_leaves = 3 if kind == "sym3" else 2
            leaf_el = str(rng.choice(["F", "O"])) if kind == "sym3" else "O"
            beta = math.radians(70.53 if kind == "sym3" else 60.0)
            phase = float(rng.uniform(0.0, 2.0 * math.pi))
            for leaf in range(n_leaves):
                phi = phase + 2.0 * math.pi * leaf / n_leaves
                d = _unit(
                    direction * math.cos(beta)
                    + math.sin(beta) * (math.cos(phi) * e1 + math.sin(phi) * e2)
                )
                coords.append(b1 + 1.4 * d)
                elements.append(leaf_el)
                bonds.append(Bond(b1_idx, len(coords) - 1))

    # Terminal decorations on free ring atoms until the atom budget is met.
    degree = {}
    for b in bonds:
        degree[b.i] = degree.get(b.i, 0) + 1
        degree[b.j] = degree.get(b.j, 0) + 1
    free_sites = [k for k in range(ring_size) if degree.get(k, 0) < 3]
    rng.shuffle(free_sites)
    for site in free_sites:
        if len(coords) >= target_atoms:
            break
        radial = _unit(coords[site])
        tilt = math.radians(float(rng.uniform(20.0, 40.0)))
        direction = _unit(radial * math.cos(tilt) - np.array([0.0, 0.0, math.sin(tilt)]))
        coords.append(coords[site] + 1.4 * direction)
        elements.append(str(rng.choice(["O", "F", "N"])))
        bonds.append(Bond(site, len(coords) - 1))

    if len(coords) < 6:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        conf = LigandConformer(elements, np.array(coords), bonds)
    return conf


def _internal_geometry_ok(conf: LigandConformer, margin: float = 0.85) -> bool:
    from .ligand import vdw_radius

    gd = conf.graph_distances()
    n = conf.n_atoms
    radii = np.array([vdw_radius(e) for e in conf.elements])
    iu, ju = np.triu_indices(n, 1)
    far = gd[iu, ju] > 2
    if not far.any():
        return True
    fi, fj = iu[far], ju[far]
    d = np.linalg.norm(conf.coords[fi] - conf.coords[fj], axis=1)
    return bool(np.all(d >= margin * (radii[fi] + radii[fj])))


def _fibonacci_shell(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * k / n)
    theta = math.pi * (1.0 + math.sqrt(5.0)) * k
    return np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1
    )


def _core_anchor_offsets(native_core: np.ndarray, cavity_center: np.ndarray,
                         rot: Rotation3) -> np.ndarray:
    """Zero-sum outward offsets: the anchor mean equals the atom mean."""
    u = np.array([_unit(x - cavity_center) for x in native_core])
    r = u - u.mean(axis=0)
    norms = np.linalg.norm(r, axis=1)
    if norms.min() < 0.35:
        spread = _TETRA[: len(r)] @ rot.matrix().T
        r = 0.6 * r + 0.4 * spread
        r = r - r.mean(axis=0)
        norms = np.linalg.norm(r, axis=1)
        if norms.min() < 0.2:
            return None
    return r


def _place_anchors(conf, native, cavity_center, core_atoms, tip_atoms, rot):
    """Marker coordinates for core and tip anchors, or None if infeasible."""
    native_core = native[list(core_atoms)]
    r = _core_anchor_offsets(native_core, cavity_center, rot)
    if r is None:
        return None
    scale = 3.0 / float(np.mean(np.linalg.norm(r, axis=1)))
    for _ in range(8):
        core_anchor = native_core + scale * r
        dmin = np.min(
            np.linalg.norm(core_anchor[:, None, :] - native[None, :, :], axis=-1)
        )
        if dmin >= ANCHOR_CLEARANCE:
            break
        scale *= 1.3
    else:
        return None

    tip_anchor = []
    for j, rb in enumerate(conf.rotatable_bonds):
        a_i, b_i = rb.axis
        axis = _unit(native[b_i] - native[a_i])
        tip = native[tip_atoms[j]]
        radial = tip - native[b_i]
        radial = radial - (radial @ axis) * axis
        if np.linalg.norm(radial) < 0.3:
            return None  # tip too close to the axis to define an azimuth
        d = _unit(radial)
        delta = 3.0
        for _ in range(8):
            cand = tip + delta * d
            if np.min(np.linalg.norm(native - cand, axis=1)) >= ANCHOR_CLEARANCE:
                tip_anchor.append(cand)
                break
            delta *= 1.3
        else:
            return None
    return core_anchor, np.array(tip_anchor).reshape(-1, 3)


def _build_protein(rng, native, cavity_center, core_anchor, tip_anchor):
    lig_radius = float(np.max(np.linalg.norm(native - cavity_center, axis=1)))
    shell_radius = lig_radius + SHELL_GAP
    area = 4.0 * math.pi * shell_radius**2
    n_sites = int(np.clip(area / 3.0, 30, 200))
    pts = _fibonacci_shell(n_sites)
    aperture = _unit(rng.standard_normal(3))
    keep = pts @ aperture < math.cos(math.radians(35.0))
    pts = pts[keep]
    radii = shell_radius + rng.uniform(0.0, 0.4, size=len(pts))
    sites = cavity_center + pts * radii[:, None]

    shell_residues = tuple(
        Residue(number=k + 1, name="SHL", ca=s, atom_names=("CA",),
                atom_elements=("C",), atom_coords=s[None, :])
        for k, s in enumerate(sites)
    )
    marker_residues = tuple(
        Residue(number=k + 1, name="ANC", ca=a, atom_names=("CA",),
                atom_elements=("C",), atom_coords=a[None, :])
        for k, a in enumerate(core_anchor)
    ) + tuple(
        Residue(number=101 + j, name="TIP", ca=a, atom_names=("CA",),
                atom_elements=("C",), atom_coords=a[None, :])
        for j, a in enumerate(tip_anchor)
    )
    return ProteinStructure((Chain("A", shell_residues), Chain("Z", marker_residues)))


def generate_complex(seed: int, index: int,
                     thresholds: FilterThresholds = FilterThresholds(),
                     max_attempts: int = 25) -> ComplexRecord | None:
    """One deterministic synthetic complex, or None when generation fails."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    for _ in range(max_attempts):
        conf = _build_ligand(rng)
        if conf is None or not _internal_geometry_ok(conf):
            continue
        rot = sample_rotation_uniform(rng)
        cavity_center = rng.uniform(-15.0, 15.0, size=3)
        local = conf.coords - conf.coords.mean(axis=0)
        native = local @ rot.matrix().T + cavity_center
        native_conf = conf.with_coords(native)

        core_atoms = canonical_anchor_atoms(native_conf, N_CORE_ANCHORS)
        tip_atoms = tuple(tip_atom(native_conf, rb) for rb in native_conf.rotatable_bonds)
        anchors = _place_anchors(native_conf, native, cavity_center, core_atoms, tip_atoms, rot)
        if anchors is None:
            continue
        core_anchor, tip_anchor = anchors
        protein = _build_protein(rng, native, cavity_center, core_anchor, tip_anchor)

        prot_coords, prot_elements = protein.heavy_atoms()
        report = check_pose(native, conf.elements, prot_coords, prot_elements,
                            native_conf, thresholds)
        if report.pass_count != 4:
            continue

        # Ship the conformer in a decoupled input state.
        input_pose = PoseTransform(
            tr=rng.normal(0.0, 10.0, size=3),
            rot=sample_rotation_uniform(rng),
            torsions=tuple(
                sample_torsion_uniform(rb.period, rng) for rb in native_conf.rotatable_bonds
            ),
        )
        input_conf = native_conf.with_coords(apply_pose(native_conf, input_pose))
        return ComplexRecord(
            complex_id=f"toy-{seed}-{index:04d}",
            protein=protein,
            ligand=input_conf,
            native_coords=native,
            pocket_center=cavity_center,
            metadata={
                "schema": SCHEMA_VERSION,
                "tool": TOOL_VERSION,
                "generator": "toysuite-1",
                "seed": int(seed),
                "index": int(index),
                "rotatable_rule": ROTATABLE_RULE_VERSION,
            },
        )
    warnings.warn(f"complex generation failed after {max_attempts} attempts "
                  f"(seed={seed}, index={index})", stacklevel=2)
    return None


def generate_corpus(seed: int, n_complexes: int,
                    thresholds: FilterThresholds = FilterThresholds()) -> list[ComplexRecord]:
    """Deterministic corpus; failed complexes are skipped with a warning."""
    if n_complexes < 1:
        raise ValueError("n_complexes must be >= 1")
    out = []
    for index in range(n_complexes):
        rec = generate_complex(seed, index, thresholds)
        if rec is not None:
            out.append(rec)
    return out


def sample_scorer_poses(record: ComplexRecord, rng: np.random.Generator,
                        n_poses: int = 24) -> list[np.ndarray]:
    """Noisy poses of one complex spanning near-native to decoy placements."""
    conf = record.ligand
    native_conf = conf.with_coords(record.native_coords)
    out = []
    for k in range(n_poses):
        mode = k % 3
        rot_sigma, tr_sigma = {0: (0.15, 0.4), 1: (0.5, 1.2), 2: (1.2, 4.0)}[mode]
        axis = rng.standard_normal(3)
        rot = Rotation3.from_axis_angle(axis, rot_sigma * rng.standard_normal()) if np.linalg.norm(axis) > 1e-9 else Rotation3.identity()
        pose = PoseTransform(
            tr=tr_sigma * rng.standard_normal(3),
            rot=rot,
            torsions=tuple(
                Torsion(rng.normal(0.0, rot_sigma), rb.period)
                for rb in native_conf.rotatable_bonds
            ),
        )
        out.append(apply_pose(native_conf, pose))
    return out
