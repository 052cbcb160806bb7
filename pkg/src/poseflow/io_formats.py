"""Canonical data records, minimal structure-file parsers, and run config.

The interchange format is versioned JSON; PDB and SDF support covers only
the fixed-column record subsets needed to import real files.  All JSON is
written canonically (sorted keys, no whitespace) through an atomic
write-then-rename so replays with the same seed produce byte-identical
artifacts.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .evalkit import Chain, ProteinStructure, Residue
from .filters import FilterThresholds, ValidityReport
from .ligand import Bond, LigandConformer, PoseTransform
from .manifold import Rotation3, Torsion

SCHEMA_VERSION = 1
TOOL_VERSION = "poseflow-0.1.0"


class DataFormatError(ValueError):
    """Malformed input file; carries a line number when available."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# ------------------------------------------------------------------- records


@dataclass
class ComplexRecord:
    complex_id: str
    protein: ProteinStructure
    ligand: LigandConformer
    native_coords: np.ndarray | None = None
    pocket_center: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.native_coords is not None:
            self.native_coords = np.asarray(self.native_coords, dtype=float)
        if self.pocket_center is not None:
            self.pocket_center = np.asarray(self.pocket_center, dtype=float).reshape(3)


@dataclass
class PoseEntry:
    coords: np.ndarray
    transform: PoseTransform | None = None
    report: ValidityReport | None = None
    score: float | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)


@dataclass
class PoseSet:
    complex_id: str
    seed: int
    config_hash: str
    poses: list[PoseEntry] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


# -------------------------------------------------------------- dict codecs


def _protein_to_dict(p: ProteinStructure) -> dict:
    return {
        "chains": [
            {
                "id": ch.chain_id,
                "residues": [
                    {
                        "number": res.number,
                        "name": res.name,
                        "ca": res.ca.tolist(),
                        "atom_names": list(res.atom_names),
                        "atom_elements": list(res.atom_elements),
                        "atom_coords": res.atom_coords.tolist(),
                    }
                    for res in ch.residues
                ],
            }
            for ch in p.chains
        ]
    }


def _protein_from_dict(d: dict) -> ProteinStructure:
    chains = []
    for ch in d["chains"]:
        residues = tuple(
            Residue(
                number=int(r["number"]),
                name=r["name"],
                ca=np.array(r["ca"], dtype=float),
                atom_names=tuple(r.get("atom_names", ())),
                atom_elements=tuple(r.get("atom_elements", ())),
                atom_coords=np.array(r.get("atom_coords", []), dtype=float).reshape(-1, 3),
            )
            for r in ch["residues"]
        )
        chains.append(Chain(ch["id"], residues))
    return ProteinStructure(tuple(chains))


def _ligand_to_dict(lig: LigandConformer) -> dict:
    return {
        "elements": list(lig.elements),
        "coords": lig.coords.tolist(),
        "bonds": [[b.i, b.j, b.order, b.in_ring, b.rigid] for b in lig.bonds],
    }


def _ligand_from_dict(d: dict) -> LigandConformer:
    bonds = [Bond(int(b[0]), int(b[1]), int(b[2]), bool(b[3]), bool(b[4])) for b in d["bonds"]]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return LigandConformer(d["elements"], np.array(d["coords"], dtype=float), bonds)


def complex_to_dict(rec: ComplexRecord) -> dict:
    out = {
        "schema": SCHEMA_VERSION,
        "kind": "complex",
        "id": rec.complex_id,
        "protein": _protein_to_dict(rec.protein),
        "ligand": _ligand_to_dict(rec.ligand),
        "metadata": dict(rec.metadata),
    }
    if rec.native_coords is not None:
        out["native_coords"] = rec.native_coords.tolist()
    if rec.pocket_center is not None:
        out["pocket_center"] = rec.pocket_center.tolist()
    return out


def complex_from_dict(d: dict) -> ComplexRecord:
    if d.get("kind") != "complex":
        raise DataFormatError("not a complex record")
    return ComplexRecord(
        complex_id=d["id"],
        protein=_protein_from_dict(d["protein"]),
        ligand=_ligand_from_dict(d["ligand"]),
        native_coords=np.array(d["native_coords"], dtype=float) if "native_coords" in d else None,
        pocket_center=np.array(d["pocket_center"], dtype=float) if "pocket_center" in d else None,
        metadata=d.get("metadata", {}),
    )


def _pose_to_dict(entry: PoseEntry) -> dict:
    out: dict = {"coords": entry.coords.tolist()}
    if entry.transform is not None:
        p = entry.transform
        out["transform"] = {
            "tr": p.tr.tolist(),
            "quat": p.rot.q.tolist(),
            "torsions": [t.theta for t in p.torsions],
            "periods": [t.period for t in p.torsions],
        }
    if entry.report is not None:
        out["report"] = entry.report.to_dict()
    if entry.score is not None:
        out["score"] = entry.score
    return out


def _pose_from_dict(d: dict) -> PoseEntry:
    transform = None
    if "transform" in d:
        td = d["transform"]
        transform = PoseTransform(
            tr=np.array(td["tr"], dtype=float),
            rot=Rotation3(np.array(td["quat"], dtype=float)),
            torsions=tuple(Torsion(t, p) for t, p in zip(td["torsions"], td["periods"])),
        )
    report = ValidityReport.from_dict(d["report"]) if "report" in d else None
    return PoseEntry(
        coords=np.array(d["coords"], dtype=float),
        transform=transform,
        report=report,
        score=d.get("score"),
    )


def poseset_to_dict(ps: PoseSet) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "poseset",
        "complex_id": ps.complex_id,
        "seed": ps.seed,
        "config_hash": ps.config_hash,
        "poses": [_pose_to_dict(p) for p in ps.poses],
        "metadata": dict(ps.metadata),
    }


def poseset_from_dict(d: dict) -> PoseSet:
    if d.get("kind") != "poseset":
        raise DataFormatError("not a pose set")
    return PoseSet(
        complex_id=d["complex_id"],
        seed=int(d["seed"]),
        config_hash=d["config_hash"],
        poses=[_pose_from_dict(p) for p in d["poses"]],
        metadata=d.get("metadata", {}),
    )


# ----------------------------------------------------------------- JSON I/O


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _json_safe(obj):
    """Replace non-finite floats (validity reports can carry inf) recursively."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return 1e308 if obj > 0 else -1e308
    return obj


def save_json(path: str, obj: dict) -> None:
    """Atomic canonical JSON write (temp file + rename)."""
    text = canonical_dumps(_json_safe(obj))
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- PDB parser


def parse_pdb_min(text: str):
    """Minimal fixed-column PDB reader: ATOM/HETATM records only.

    Returns (ProteinStructure, warnings).  Residues without a CA atom are
    skipped with a warning; malformed coordinate fields raise with the line
    number.  Coordinates are read from columns 31-54.
    """
    chains: dict[str, dict] = {}
    notes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        rec = line[0:6].strip()
        if rec not in ("ATOM", "HETATM"):
            continue
        if len(line) < 54:
            raise DataFormatError("truncated coordinate record", lineno)
        try:
            x = float(line[30:38])
            y = float(line[38:46])
            z = float(line[46:54])
        except ValueError:
            raise DataFormatError("malformed coordinate field", lineno) from None
        name = line[12:16].strip()
        resname = line[17:20].strip()
        chain_id = line[21].strip() or "A"
        try:
            resnum = int(line[22:26])
        except ValueError:
            raise DataFormatError("malformed residue number", lineno) from None
        element = line[76:78].strip() if len(line) >= 78 else ""
        if not element:
            element = "".join(c for c in name if c.isalpha())[:1]
        element = element.capitalize()
        ch = chains.setdefault(chain_id, {})
        res = ch.setdefault(resnum, {"name": resname, "atoms": []})
        res["atoms"].append((name, element, np.array([x, y, z])))
    if not chains:
        notes.append("no ATOM/HETATM records found; empty structure")
    out_chains = []
    for chain_id in sorted(chains):
        residues = []
        for resnum in sorted(chains[chain_id]):
            res = chains[chain_id][resnum]
            ca = next((xyz for n, _, xyz in res["atoms"] if n == "CA"), None)
            if ca is None:
                notes.append(f"residue {chain_id}/{resnum} has no CA; skipped")
                continue
            names = tuple(n for n, _, _ in res["atoms"])
            elements = tuple(e for _, e, _ in res["atoms"])
            coords = np.array([xyz for _, _, xyz in res["atoms"]])
            residues.append(Residue(resnum, res["name"], ca, names, elements, coords))
        out_chains.append(Chain(chain_id, tuple(residues)))
    return ProteinStructure(tuple(out_chains)), notes


def write_pdb_min(protein: ProteinStructure) -> str:
    """Fixed-column writer for structures produced by :func:`parse_pdb_min`."""
    lines = []
    serial = 1
    for ch in protein.chains:
        for res in ch.residues:
            for name, element, xyz in zip(res.atom_names, res.atom_elements, res.atom_coords):
                lines.append(
                    f"ATOM  {serial:5d} {name:<4s} {res.name:>3s} {ch.chain_id:1s}"
                    f"{res.number:4d}    {xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}"
                    f"{1.0:6.2f}{0.0:6.2f}          {element:>2s}"
                )
                serial += 1
    lines.append("END")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- SDF parser


def parse_sdf_min(text: str) -> LigandConformer:
    """Minimal V2000 molfile reader: counts line, atom block, bond block."""
    lines = text.splitlines()
    if len(lines) < 4:
        raise DataFormatError("molfile too short")
    counts = lines[3]
    try:
        n_atoms = int(counts[0:3])
        n_bonds = int(counts[3:6])
    except ValueError:
        raise DataFormatError("malformed counts line", 4) from None
    if len(lines) < 4 + n_atoms + n_bonds:
        raise DataFormatError("counts line does not match block sizes", 4)
    elements, coords = [], []
    for k in range(n_atoms):
        line = lines[4 + k]
        try:
            x = float(line[0:10])
            y = float(line[10:20])
            z = float(line[20:30])
        except ValueError:
            raise DataFormatError("malformed atom coordinates", 5 + k) from None
        symbol = line[31:34].strip()
        if not symbol or not symbol[0].isalpha():
            raise DataFormatError(f"bad element symbol {symbol!r}", 5 + k)
        elements.append(symbol)
        coords.append([x, y, z])
    raw_bonds = []
    for k in range(n_bonds):
        line = lines[4 + n_atoms + k]
        try:
            i = int(line[0:3]) - 1
            j = int(line[3:6]) - 1
            order = int(line[6:9])
        except ValueError:
            raise DataFormatError("malformed bond record", 5 + n_atoms + k) from None
        if not (0 <= i < n_atoms and 0 <= j < n_atoms):
            raise DataFormatError("bond index out of range", 5 + n_atoms + k)
        raw_bonds.append((i, j, order))
    ring_edges = _ring_edges(n_atoms, [(i, j) for i, j, _ in raw_bonds])
    bonds = [
        Bond(i, j, order, in_ring=(min(i, j), max(i, j)) in ring_edges) for i, j, order in raw_bonds
    ]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return LigandConformer(elements, np.array(coords), bonds)


def _ring_edges(n: int, edges) -> set:
    """Edges that lie on a cycle: removal keeps their endpoints connected."""
    adj = [set() for _ in range(n)]
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    out = set()
    for i, j in edges:
        seen = {i}
        stack = [i]
        found = False
        while stack and not found:
            u = stack.pop()
            for v in adj[u]:
                if u == i and v == j:
                    continue
                if v == j:
                    found = True
                    break
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if found:
            out.add((min(i, j), max(i, j)))
    return out


def write_sdf(conformer: LigandConformer, coords=None, title: str = "poseflow") -> str:
    coords = conformer.coords if coords is None else np.asarray(coords, dtype=float)
    lines = [title, "  poseflow", "", f"{conformer.n_atoms:3d}{len(conformer.bonds):3d}  0  0  0  0  0  0  0  0999 V2000"]
    for el, xyz in zip(conformer.elements, coords):
        lines.append(f"{xyz[0]:10.4f}{xyz[1]:10.4f}{xyz[2]:10.4f} {el:<3s} 0  0  0  0  0  0  0  0  0  0  0  0")
    for b in conformer.bonds:
        lines.append(f"{b.i + 1:3d}{b.j + 1:3d}{b.order:3d}  0  0  0  0")
    lines.append("M  END")
    lines.append("$$$$")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- config

DEFAULT_CONFIG = {
    "flow": {
        "sigma_large": 15.0,
        "sigma_medium": 5.0,
        "sigma_small": 1.0,
        "sigma_rot": 0.3,
        "sigma_tor": 0.3,
    },
    "loss": {"w_tr": 1.0, "w_rot": 1.0, "w_tor": 3.0},
    "augment": {"rotate": True, "coord_noise": 0.25, "mask_fraction": 0.15},
    "train": {
        "steps": 3000,
        "batch_size": 16,
        "lr": 1e-3,
        "optimizer": "adamw",
        "weight_decay": 1e-4,
        "momentum": 0.9,
        "seed": 0,
    },
    "net": {"hidden": 128, "n_hidden": 2, "time_width": 16},
    "rollout": {"n_steps": 10, "n_samples": 40},
    "filters": {"c_min": 0.75, "d_max": 5.0, "s_vol": 0.8, "f_max": 0.075, "c_clash": 0.80},
    "scorer": {"hidden": 32, "epochs": 40, "lr": 3e-3, "poses_per_complex": 24, "seed": 1},
}


def load_run_config(path: str | None):
    """Read a TOML run config merged over defaults; returns (config, hash)."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
        for section, values in user.items():
            if section not in cfg:
                raise DataFormatError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise DataFormatError(f"config section {section!r} must be a table")
            for key, val in values.items():
                if key not in cfg[section]:
                    raise DataFormatError(f"unknown config key {section}.{key}")
                cfg[section][key] = val
    return cfg, config_hash(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_dumps(cfg).encode()).hexdigest()[:16]


def filter_thresholds_from_config(cfg: dict) -> FilterThresholds:
    f = cfg["filters"]
    return FilterThresholds(
        c_min=f["c_min"], d_max=f["d_max"], s_vol=f["s_vol"], f_max=f["f_max"], c_clash=f["c_clash"]
    )
