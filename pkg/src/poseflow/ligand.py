"""Ligand conformers, rotatable-bond machinery, and pose transforms.

Heavy atoms only.  A pose acts on a conformer as: wrapped torsion rotations
about each rotatable bond (outermost moving set first), a global rotation
about the post-torsion centroid, then a translation of the centroid by tr.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .manifold import Rotation3, Torsion, TWO_PI, fit_rotation, wrap_angle

ROTATABLE_RULE_VERSION = "graph-rule-1"

# Van der Waals radii (Angstrom) for the heavy elements we accept, plus H.
VDW_RADII = {
    "H": 1.10,
    "C": 1.70,
    "N": 1.55,
    "O": 1.52,
    "F": 1.47,
    "P": 1.80,
    "S": 1.80,
    "Cl": 1.75,
    "Br": 1.85,
    "I": 1.98,
    "B": 1.92,
    "Se": 1.90,
}


class UnknownElementError(KeyError):
    """Raised when an element symbol has no van-der-Waals radius entry."""

    def __init__(self, symbol: str):
        super().__init__(symbol)
        self.symbol = symbol

    def __str__(self):
        return f"unknown element symbol: {self.symbol!r}"


def vdw_radius(symbol: str) -> float:
    try:
        return VDW_RADII[symbol]
    except KeyError:
        raise UnknownElementError(symbol) from None


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: int = 1
    in_ring: bool = False
    rigid: bool = False  # set for amide-like bonds flagged in input metadata


@dataclass(frozen=True)
class RotatableBond:
    """Rotatable bond (a, b); rotating moves the component on the b side."""

    axis: tuple[int, int]
    moving: tuple[int, ...]
    period: float = TWO_PI


class LigandConformer:
    """Immutable ligand: elements, reference coordinates, bond graph.

    Rotatable bonds are detected at construction unless passed explicitly.
    """

    def __init__(self, elements, coords, bonds, rotatable_bonds=None, check=True):
        self.elements = tuple(str(e) for e in elements)
        self.coords = np.array(coords, dtype=float)
        if self.coords.shape != (len(self.elements), 3):
            raise ValueError("coords must have shape (n_atoms, 3)")
        self.coords.setflags(write=False)
        self.bonds = tuple(b if isinstance(b, Bond) else Bond(*b) for b in bonds)
        n = self.n_atoms
        for b in self.bonds:
            if not (0 <= b.i < n and 0 <= b.j < n) or b.i == b.j:
                raise ValueError(f"bad bond {b}")
        self._adj = _adjacency(n, self.bonds)
        if check:
            if not _connected(self._adj, n):
                raise ValueError("bond graph is not connected")
            if not (6 <= n <= 150):
                warnings.warn(f"ligand has {n} heavy atoms, outside the 6..150 range", stacklevel=2)
        if rotatable_bonds is None:
            rotatable_bonds = detect_rotatable_bonds(self)
        self.rotatable_bonds = tuple(rotatable_bonds)
        self._graph_dist = None

    @property
    def n_atoms(self) -> int:
        return len(self.elements)

    @property
    def n_rotatable(self) -> int:
        return len(self.rotatable_bonds)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self._adj[i]

    def with_coords(self, coords) -> "LigandConformer":
        """Same graph and rotatable bonds, new reference geometry."""
        return LigandConformer(self.elements, coords, self.bonds, self.rotatable_bonds, check=False)

    def graph_distances(self) -> np.ndarray:
        """All-pairs bond-count distances (BFS per atom, cached)."""
        if self._graph_dist is None:
            n = self.n_atoms
            dist = np.full((n, n), -1, dtype=int)
            for s in range(n):
                dist[s, s] = 0
                queue = [s]
                while queue:
                    nxt = []
                    for u in queue:
                        for v in self._adj[u]:
                            if dist[s, v] < 0:
                                dist[s, v] = dist[s, u] + 1
                                nxt.append(v)
                    queue = nxt
            dist.setflags(write=False)
            self._graph_dist = dist
        return self._graph_dist

    def torsion_periods(self) -> tuple[float, ...]:
        return tuple(rb.period for rb in self.rotatable_bonds)


@dataclass(frozen=True)
class PoseTransform:
    """Translation (Angstrom), global rotation, and per-bond torsions."""

    tr: np.ndarray
    rot: Rotation3
    torsions: tuple[Torsion, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tr", np.asarray(self.tr, dtype=float).reshape(3))
        object.__setattr__(self, "torsions", tuple(self.torsions))

    @classmethod
    def identity(cls, periods=()) -> "PoseTransform":
        return cls(np.zeros(3), Rotation3.identity(), tuple(Torsion(0.0, p) for p in periods))

    def torsion_values(self) -> np.ndarray:
        return np.array([t.theta for t in self.torsions])


# ------------------------------------------------------------------ graph ops


def _adjacency(n, bonds):
    adj = [[] for _ in range(n)]
    for b in bonds:
        adj[b.i].append(b.j)
        adj[b.j].append(b.i)
    return tuple(tuple(sorted(a)) for a in adj)


def _connected(adj, n, skip_edge=None):
    if n == 0:
        return True
    seen = [False] * n
    seen[0] = True
    stack = [0]
    count = 1
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if skip_edge and {u, v} == skip_edge:
                continue
            if not seen[v]:
                seen[v] = True
                count += 1
                stack.append(v)
    return count == n


def _component_from(adj, start, banned_edge):
    """Vertices reachable from start without crossing banned_edge."""
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if {u, v} == banned_edge or v in seen:
                continue
            seen.add(v)
            stack.append(v)
    return seen


def _subtree_hash(adj, root, parent, labels, memo):
    """AHU-style canonical hash of the rooted tree hanging off root."""
    key = (root, parent)
    if key in memo:
        return memo[key]
    children = sorted(
        _subtree_hash(adj, v, root, labels, memo) for v in adj[root] if v != parent
    )
    h = (labels[root], tuple(children))
    memo[key] = h
    return h


def detect_rotatable_bonds(conformer: LigandConformer) -> list[RotatableBond]:
    """Single, non-ring bonds with both endpoints of degree >= 2.

    A bond is "in a ring" exactly when removing it leaves the graph
    connected.  The torsional period comes from the symmetry of the moving
    set about the axis: if the moving set is a tree whose branches at the
    axis atom fall into one isomorphism class of n >= 2 identical subtrees,
    the period is 2*pi/n (e.g. 2*pi/3 for a 3-fold terminal group), else
    2*pi.  Bonds flagged rigid (amide-like metadata) are skipped.
    """
    adj = conformer._adj
    n = conformer.n_atoms
    labels = [(conformer.elements[i], len(adj[i])) for i in range(n)]
    # Edge label map for the subtree hash: include bond order.
    order_of = {}
    for b in conformer.bonds:
        order_of[(b.i, b.j)] = b.order
        order_of[(b.j, b.i)] = b.order

    out = []
    for b in sorted(conformer.bonds, key=lambda b: (min(b.i, b.j), max(b.i, b.j))):
        if b.order != 1 or b.rigid:
            continue
        if len(adj[b.i]) < 2 or len(adj[b.j]) < 2:
            continue
        if _connected(adj, n, skip_edge={b.i, b.j}):
            continue  # ring bond
        a, bb = min(b.i, b.j), max(b.i, b.j)
        moving = _component_from(adj, bb, {a, bb})
        period = _moving_set_period(conformer, adj, a, bb, moving, labels, order_of)
        out.append(RotatableBond(axis=(a, bb), moving=tuple(sorted(moving)), period=period))
    return out


def _moving_set_period(conformer, adj, a, b, moving, labels, order_of):
    branches = [v for v in adj[b] if v != a]
    if len(branches) < 2:
        return TWO_PI
    # Moving set must be a tree for the subtree hashes to be canonical.
    n_edges = sum(1 for bd in conformer.bonds if bd.i in moving and bd.j in moving)
    if n_edges != len(moving) - 1:
        return TWO_PI
    memo = {}
    hashes = [
        (order_of[(b, v)], _subtree_hash(adj, v, b, labels, memo)) for v in branches
    ]
    if all(h == hashes[0] for h in hashes[1:]):
        return TWO_PI / len(branches)
    return TWO_PI


def rigid_core_atoms(conformer: LigandConformer) -> tuple[int, ...]:
    """Atoms not moved by any rotatable bond (the root rigid fragment)."""
    moving = set()
    for rb in conformer.rotatable_bonds:
        moving.update(rb.moving)
    return tuple(i for i in range(conformer.n_atoms) if i not in moving)


def canonical_anchor_atoms(conformer: LigandConformer, n: int = 4) -> tuple[int, ...]:
    """Deterministic, pose-independent selection of n spread-out atoms.

    Candidates are restricted to the rigid core (atoms untouched by every
    torsion) whenever it has at least n members, so the selected constellation
    moves rigidly under any pose.  Picks the candidate of maximum graph
    eccentricity first, then greedily adds atoms maximizing the minimal graph
    distance to the chosen set; ties break on the lowest index.  Used to pair
    ligand atoms with pocket marker sites.
    """
    dist = conformer.graph_distances()
    candidates = list(rigid_core_atoms(conformer))
    if len(candidates) < n:
        candidates = list(range(conformer.n_atoms))
    n = min(n, len(candidates))
    sub = dist[np.ix_(candidates, candidates)]
    ecc = sub.max(axis=1)
    chosen = [int(np.argmax(ecc))]
    while len(chosen) < n:
        mind = sub[:, chosen].min(axis=1)
        mind[chosen] = -1
        chosen.append(int(np.argmax(mind)))
    return tuple(candidates[i] for i in chosen)


def tip_atom(conformer: LigandConformer, bond: RotatableBond) -> int:
    """Atom of the moving set farthest (in bonds) from the axis pivot."""
    dist = conformer.graph_distances()
    b = bond.axis[1]
    moving = list(bond.moving)
    d = dist[b, moving]
    return int(moving[int(np.argmax(d))])


# ------------------------------------------------------------------ kinematics


def _torsion_order(conformer: LigandConformer) -> list[int]:
    """Application order: outermost (largest moving set) first, then index."""
    return sorted(
        range(conformer.n_rotatable),
        key=lambda j: (-len(conformer.rotatable_bonds[j].moving), conformer.rotatable_bonds[j].axis),
    )


def _rotate_about_axis(coords, pivot, unit_axis, angle, idx):
    c, s = math.cos(angle), math.sin(angle)
    p = coords[idx] - pivot
    coords[idx] = (
        pivot
        + c * p
        + s * np.cross(unit_axis, p)
        + (1.0 - c) * np.outer(p @ unit_axis, unit_axis)
    )


def apply_pose(conformer: LigandConformer, pose: PoseTransform) -> np.ndarray:
    """Coordinates of the conformer under a pose transform.

    Torsions are applied first about the current bond axes (outermost moving
    set first, deterministic), then the global rotation about the
    post-torsion centroid, then the translation.
    """
    if len(pose.torsions) != conformer.n_rotatable:
        raise ValueError(
            f"pose has {len(pose.torsions)} torsions, conformer has {conformer.n_rotatable}"
        )
    coords = conformer.coords.copy()
    for j in _torsion_order(conformer):
        rb = conformer.rotatable_bonds[j]
        theta = pose.torsions[j].theta
        if theta == 0.0:
            continue
        a, b = rb.axis
        axis = coords[b] - coords[a]
        axis /= np.linalg.norm(axis)
        _rotate_about_axis(coords, coords[a], axis, theta, list(rb.moving))
    centroid = coords.mean(axis=0)
    coords = (coords - centroid) @ pose.rot.matrix().T + centroid + pose.tr
    return coords


def _dihedral_refs(conformer: LigandConformer, bond: RotatableBond) -> tuple[int, int]:
    """Reference atoms measuring this bond's dihedral: lowest-index neighbors."""
    a, b = bond.axis
    ra = min(v for v in conformer.neighbors(a) if v != b)
    rb = min(v for v in conformer.neighbors(b) if v != a)
    return ra, rb


def measure_dihedral(coords: np.ndarray, ra: int, a: int, b: int, rb: int) -> float:
    """Signed dihedral angle ra-a-b-rb in (-pi, pi].

    Sign convention: rotating the moving (b) side about the a->b axis by
    +theta increments this dihedral by +theta.
    """
    u = coords[b] - coords[a]
    u = u / np.linalg.norm(u)
    w1 = coords[ra] - coords[a]
    w2 = coords[rb] - coords[b]
    v1 = w1 - (w1 @ u) * u
    v2 = w2 - (w2 @ u) * u
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 < 1e-9 or n2 < 1e-9:
        raise ValueError("degenerate dihedral: reference atom collinear with axis")
    v1, v2 = v1 / n1, v2 / n2
    return math.atan2(float(np.cross(v1, v2) @ u), float(v1 @ v2))


def relative_pose(conformer: LigandConformer, target_coords) -> PoseTransform:
    """Pose p with apply_pose(conformer, p) == target, assuming one exists.

    Torsions are recovered by peeling innermost bonds first (mismatch there
    is uncontaminated by outer bonds), the rigid part by Kabsch fit.  Exact
    up to the torsional period for angles at the wrap boundary.
    """
    target = np.asarray(target_coords, dtype=float)
    if target.shape != conformer.coords.shape:
        raise ValueError("target coordinate shape mismatch")
    coords = conformer.coords.copy()
    thetas = [0.0] * conformer.n_rotatable
    for j in reversed(_torsion_order(conformer)):
        rb = conformer.rotatable_bonds[j]
        ra, rbref = _dihedral_refs(conformer, rb)
        a, b = rb.axis
        d_cur = measure_dihedral(coords, ra, a, b, rbref)
        d_tgt = measure_dihedral(target, ra, a, b, rbref)
        theta = wrap_angle(d_tgt - d_cur, TWO_PI)
        thetas[j] = theta
        axis = coords[b] - coords[a]
        axis /= np.linalg.norm(axis)
        _rotate_about_axis(coords, coords[a], axis, theta, list(rb.moving))
    c_cur = coords.mean(axis=0)
    c_tgt = target.mean(axis=0)
    rot_m = fit_rotation(coords - c_cur, target - c_tgt)
    return PoseTransform(
        tr=c_tgt - c_cur,
        rot=Rotation3.from_matrix(rot_m),
        torsions=tuple(
            Torsion(thetas[j], conformer.rotatable_bonds[j].period)
            for j in range(conformer.n_rotatable)
        ),
    )
