"""Trainable velocity field over pose space, plus the attention-bias featurizer.

The velocity model is a small MLP over invariant geometric features of the
current complex, standing in for a full transformer backbone.  Features are
expressed in the ligand body frame (rotated by the transpose of the current
pose rotation), which makes the learned field consistent between training
and rollout regardless of how the input conformer is oriented.  Pocket
marker sites (chain "Z" residues named ANC/TIP) pair with canonically chosen
ligand atoms and play the role the attention mechanism would play at scale:
they expose where the rigid core and each torsion tip should go.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .evalkit import ProteinStructure
from .flowmatch import (
    AugmentConfig,
    LossWeights,
    StageConfig,
    Velocity,
    augment,
    make_training_sample,
    torsion_supervision_mask,
)
from .ligand import (
    LigandConformer,
    PoseTransform,
    apply_pose,
    canonical_anchor_atoms,
    tip_atom,
)
from .manifold import Rotation3, sample_rotation_uniform, sample_torsion_uniform, so3_log, fit_rotation
from .nn import MLP, Linear, Tanh, make_optimizer, zero_grads

ANCHOR_CHAIN = "Z"
CORE_RESIDUE = "ANC"
TIP_RESIDUE = "TIP"

CHECKPOINT_FORMAT = "poseflow-net-1"


class TrainingDivergence(RuntimeError):
    """Raised when the training loss becomes non-finite."""


# ----------------------------------------------------------- pocket plumbing


@dataclass(frozen=True)
class PocketLayout:
    """Index map into the flattened protein site array."""

    core_idx: np.ndarray
    tip_idx: np.ndarray
    shell_idx: np.ndarray


def flatten_protein(protein: ProteinStructure):
    """Flatten residue sites to one coordinate array plus an anchor layout.

    Marker residues live on chain "Z": names ANC (rigid-core anchors, in
    designation order by residue number) and TIP (one per rotatable bond, in
    bond order by residue number).  Everything else is a shell site.
    """
    coords = []
    core, tip, shell = [], [], []
    for ch in protein.chains:
        for res in ch.residues:
            idx = len(coords)
            coords.append(res.ca)
            if ch.chain_id == ANCHOR_CHAIN and res.name == CORE_RESIDUE:
                core.append((res.number, idx))
            elif ch.chain_id == ANCHOR_CHAIN and res.name == TIP_RESIDUE:
                tip.append((res.number, idx))
            else:
                shell.append(idx)
    core_idx = np.array([i for _, i in sorted(core)], dtype=int)
    tip_idx = np.array([i for _, i in sorted(tip)], dtype=int)
    return np.array(coords, dtype=float), PocketLayout(core_idx, tip_idx, np.array(shell, dtype=int))


@dataclass(frozen=True)
class LigandSlots:
    """Conformer-derived featurization slots (pose independent)."""

    conformer: LigandConformer
    core_atoms: tuple[int, ...]
    tip_atoms: tuple[int, ...]


# ------------------------------------------------------------- featurization


class ComplexFeaturizer:
    """Invariant geometric features of (protein sites, ligand at pose, time).

    All vector features are rotated into the ligand body frame; distance-like
    features divided by ``scale``.  Copies pre-divided by (1 - t), clamped at
    t = 0.95, expose the remaining-displacement-to-velocity rescaling.
    """

    def __init__(self, n_core: int = 4, m_max: int = 4, scale: float = 10.0):
        self.n_core = n_core
        self.m_max = m_max
        self.scale = scale

    def feature_dim(self) -> int:
        return 7 * self.n_core + 7 + 12 + 9 + 5 * self.m_max + 3

    def vector_block_offsets(self) -> list[int]:
        """Start offsets of every 3-vector block in the feature layout.

        Under a rigid rotation of the whole complex (with the pose rotation
        conjugated accordingly) these blocks co-rotate while every other
        feature entry is invariant.
        """
        out = []
        o = 0
        for _ in range(self.n_core):
            out.extend([o + 1, o + 4])
            o += 7
        out.extend([o + 1, o + 4])
        o += 7
        out.extend([o, o + 3, o + 6, o + 9])
        o += 12
        out.extend([o, o + 3, o + 6])
        return out

    def prepare(self, conformer: LigandConformer) -> LigandSlots:
        core = canonical_anchor_atoms(conformer, self.n_core)
        tips = tuple(tip_atom(conformer, rb) for rb in conformer.rotatable_bonds)
        return LigandSlots(conformer, core, tips)

    def features(
        self,
        slots: LigandSlots,
        site_coords: np.ndarray,
        layout: PocketLayout,
        pose: PoseTransform,
        t: float,
        coords: np.ndarray | None = None,
        site_keep: np.ndarray | None = None,
        lig_keep: np.ndarray | None = None,
    ) -> np.ndarray:
        conf = slots.conformer
        if coords is None:
            coords = apply_pose(conf, pose)
        if site_keep is None:
            site_keep = np.ones(len(site_coords), dtype=bool)
        if lig_keep is None:
            lig_keep = np.ones(conf.n_atoms, dtype=bool)
        body = pose.rot.matrix().T
        inv = 1.0 / (1.0 - min(t, 0.95))
        s = self.scale
        c_full = coords.mean(axis=0)

        out = np.zeros(self.feature_dim())
        o = 0

        # Per-core-anchor offsets.
        pairs_cur, pairs_anchor = [], []
        for k in range(self.n_core):
            valid = (
                k < len(layout.core_idx)
                and k < len(slots.core_atoms)
                and site_keep[layout.core_idx[k]]
                and lig_keep[slots.core_atoms[k]]
            )
            if valid:
                a = site_coords[layout.core_idx[k]]
                x = coords[slots.core_atoms[k]]
                d = body @ (a - x) / s
                out[o] = 1.0
                out[o + 1 : o + 4] = d
                out[o + 4 : o + 7] = d * inv / 10.0
                pairs_cur.append(x)
                pairs_anchor.append(a)
            o += 7

        # Remaining rigid motion estimated from the core constellation.
        rot_hat = None
        c_cur = c_anch = None
        if len(pairs_cur) >= 3:
            cur = np.array(pairs_cur)
            anch = np.array(pairs_anchor)
            c_cur, c_anch = cur.mean(axis=0), anch.mean(axis=0)
            rot_hat = fit_rotation(cur - c_cur, anch - c_anch)
            m_hat = so3_log(Rotation3.from_matrix(rot_hat))
            out[o] = 1.0
            out[o + 1 : o + 4] = body @ m_hat / math.pi
            out[o + 4 : o + 7] = body @ m_hat * inv / 10.0
        o += 7

        # Translation estimates: raw anchor-mean offset and the rigid-motion
        # corrected remaining translation.
        if rot_hat is not None:
            delta_c = c_anch - c_cur
            rem_tr = delta_c - (rot_hat - np.eye(3)) @ (c_cur - c_full)
            out[o : o + 3] = body @ delta_c / s
            out[o + 3 : o + 6] = body @ delta_c * inv / (10.0 * s)
            out[o + 6 : o + 9] = body @ rem_tr / s
            out[o + 9 : o + 12] = body @ rem_tr * inv / (10.0 * s)
        o += 12

        # Shell context: centroid offset and outward anisotropy.
        kept_shell = layout.shell_idx[site_keep[layout.shell_idx]]
        if len(kept_shell):
            shell = site_coords[kept_shell]
            c_shell = shell.mean(axis=0)
            rel = shell - c_shell
            norms = np.linalg.norm(rel, axis=1)
            norms[norms < 1e-9] = 1.0
            outward = (rel / norms[:, None]).mean(axis=0)
            out[o : o + 3] = body @ (c_shell - c_full) / s
            out[o + 3 : o + 6] = body @ outward
            out[o + 6 : o + 9] = body @ (c_full - (c_cur if c_cur is not None else c_full)) / s
        o += 9

        # Per-torsion mismatch angles, rigid part removed via rot_hat.
        for j in range(self.m_max):
            valid = (
                j < conf.n_rotatable
                and j < len(layout.tip_idx)
                and j < len(slots.tip_atoms)
                and site_keep[layout.tip_idx[j]]
                and lig_keep[slots.tip_atoms[j]]
            )
            if valid:
                rb = conf.rotatable_bonds[j]
                a_i, b_i = rb.axis
                axis = coords[b_i] - coords[a_i]
                axis /= np.linalg.norm(axis)
                anchor = site_coords[layout.tip_idx[j]]
                if rot_hat is not None:
                    anchor = rot_hat.T @ (anchor - c_anch) + c_cur
                w_cur = coords[slots.tip_atoms[j]] - coords[b_i]
                w_anch = anchor - coords[b_i]
                v1 = w_cur - (w_cur @ axis) * axis
                v2 = w_anch - (w_anch @ axis) * axis
                n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
                if n1 > 1e-6 and n2 > 1e-6:
                    v1, v2 = v1 / n1, v2 / n2
                    ang = math.atan2(float(np.cross(v1, v2) @ axis), float(v1 @ v2))
                    period = rb.period
                    wrapped = ang - period * round(ang / period)
                    out[o] = 1.0
                    out[o + 1] = math.sin(ang)
                    out[o + 2] = math.cos(ang)
                    out[o + 3] = wrapped * inv / (2.0 * math.pi)
                    out[o + 4] = period / (2.0 * math.pi)
            o += 5

        # Shape scalars.
        r_gyr = float(np.sqrt(np.mean(np.sum((coords - c_full) ** 2, axis=1))))
        out[o] = r_gyr / s
        out[o + 1] = conf.n_atoms / 20.0
        out[o + 2] = conf.n_rotatable / 4.0
        return out


# ------------------------------------------------------------ time embedding


class TimeEmbedding:
    """MLP over sinusoidal time features; deterministic for fixed t."""

    def __init__(self, rng: np.random.Generator, frequencies=(1.0, 2.0, 4.0), width: int = 16):
        self.frequencies = tuple(float(f) for f in frequencies)
        self.width = width
        self.linear = Linear(3 + 2 * len(self.frequencies), width, rng, name="time")
        self.act = Tanh()

    def raw_features(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float).reshape(-1, 1)
        cols = [t, 1.0 - t, 1.0 / (1.0 - 0.95 * t) / 20.0]
        for f in self.frequencies:
            cols.append(np.sin(2 * math.pi * f * t))
            cols.append(np.cos(2 * math.pi * f * t))
        return np.concatenate(cols, axis=1)

    def forward(self, t: np.ndarray) -> np.ndarray:
        return self.act.forward(self.linear.forward(self.raw_features(t)))

    def backward(self, gout: np.ndarray) -> None:
        self.linear.backward(self.act.backward(gout))

    def parameters(self):
        return self.linear.parameters()


# ----------------------------------------------------- attention-bias module


class AttentionBiasFeaturizer:
    """Distance-aware per-head attention bias over token pairs.

    For each pair (i, j) with edge type tau: a stabilized inverse distance
    s_ij = 1 / (||x_i - x_j||^2 + 1) is affinely transformed per edge type,
    embedded with a K-kernel Gaussian RBF (normalized densities), projected
    to one value per head, and summed with a direction term: a linear map of
    the displacement with zero offset.  Output is stacked heads-first.
    """

    def __init__(self, rng: np.random.Generator, n_edge_types: int = 4, n_kernels: int = 16,
                 n_heads: int = 4):
        self.n_edge_types = n_edge_types
        self.n_kernels = n_kernels
        self.n_heads = n_heads
        self.alpha = np.ones(n_edge_types)
        self.beta = np.zeros(n_edge_types)
        self.mu = np.linspace(0.0, 1.0, n_kernels)
        self.sigma = np.full(n_kernels, 1.0 / n_kernels)
        self.radial = MLP([n_kernels, n_kernels, n_heads], rng, name="bias.radial")
        self.direction = rng.uniform(-0.5, 0.5, size=(3, n_heads))

    def attention_bias(self, coords, edge_types) -> np.ndarray:
        """Bias tensor of shape (heads, N, N)."""
        coords = np.asarray(coords, dtype=float)
        n = len(coords)
        edge_types = np.asarray(edge_types, dtype=int)
        if edge_types.shape != (n, n):
            raise ValueError("edge_types must be an N x N integer array")
        if edge_types.min() < 1 or edge_types.max() > self.n_edge_types:
            bad = int(edge_types.min()) if edge_types.min() < 1 else int(edge_types.max())
            raise ValueError(f"invalid edge type {bad}; expected 1..{self.n_edge_types}")
        delta = coords[:, None, :] - coords[None, :, :]
        s = 1.0 / (np.sum(delta**2, axis=-1) + 1.0)
        st = self.alpha[edge_types - 1] * s + self.beta[edge_types - 1]
        z = (st[..., None] - self.mu) / self.sigma
        phi = np.exp(-0.5 * z**2) / (self.sigma * math.sqrt(2.0 * math.pi))
        radial = self.radial.forward(phi.reshape(n * n, self.n_kernels)).reshape(n, n, self.n_heads)
        direction = delta @ self.direction
        return np.moveaxis(radial + direction, -1, 0)

    @staticmethod
    def stabilized_inverse_distance(delta) -> float:
        return 1.0 / (float(np.sum(np.asarray(delta, dtype=float) ** 2)) + 1.0)


# ------------------------------------------------------------------- the net


class ToyVelocityNet:
    """MLP velocity field: body-frame geometric features -> velocity triple.

    Output layout is (v_tr body, v_rot body, v_tor[0..m_max)); the
    translation block is trained in units of ``tr_scale`` Angstrom.
    """

    def __init__(self, rng: np.random.Generator, hidden: int = 128, n_hidden: int = 2,
                 featurizer: ComplexFeaturizer | None = None, tr_scale: float = 10.0,
                 time_width: int = 16):
        self.featurizer = featurizer or ComplexFeaturizer()
        self.tr_scale = tr_scale
        self.time_embed = TimeEmbedding(rng, width=time_width)
        self.m_max = self.featurizer.m_max
        self.out_dim = 6 + self.m_max
        sizes = [self.featurizer.feature_dim() + time_width] + [hidden] * n_hidden + [self.out_dim]
        self.trunk = MLP(sizes, rng, name="trunk")
        self._geo_dim = self.featurizer.feature_dim()
        self._config = {
            "hidden": hidden,
            "n_hidden": n_hidden,
            "tr_scale": tr_scale,
            "time_width": time_width,
            "n_core": self.featurizer.n_core,
            "m_max": self.featurizer.m_max,
            "scale": self.featurizer.scale,
        }

    def parameters(self):
        return self.trunk.parameters() + self.time_embed.parameters()

    def forward(self, geo: np.ndarray, t: np.ndarray) -> np.ndarray:
        geo = np.asarray(geo, dtype=float)
        if geo.ndim != 2 or geo.shape[1] != self._geo_dim:
            raise ValueError(f"expected geometric features of width {self._geo_dim}")
        emb = self.time_embed.forward(t)
        return self.trunk.forward(np.concatenate([geo, emb], axis=1))

    def backward(self, gout: np.ndarray) -> None:
        gin = self.trunk.backward(gout)
        self.time_embed.backward(gin[:, self._geo_dim :])

    def predict_velocity(self, slots: LigandSlots, site_coords, layout: PocketLayout,
                         pose: PoseTransform, t: float, coords=None) -> Velocity:
        """Space-frame velocity triple at (pose, t) for one complex."""
        geo = self.featurizer.features(slots, site_coords, layout, pose, t, coords=coords)
        out = self.forward(geo[None, :], np.array([t]))[0]
        rot_m = pose.rot.matrix()
        m = slots.conformer.n_rotatable
        return Velocity(
            tr=rot_m @ (out[0:3] * self.tr_scale),
            rot=out[3:6],
            tor=out[6 : 6 + min(m, self.m_max)] if m else np.zeros(0),
        )

    # --------------------------------------------------------- serialization

    def to_state(self) -> dict:
        params = {p.name: p.value.tolist() for p in self.parameters()}
        return {"format": CHECKPOINT_FORMAT, "kind": "velocity", "config": dict(self._config),
                "params": params}

    @classmethod
    def from_state(cls, state: dict) -> "ToyVelocityNet":
        if state.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {state.get('format')!r}")
        cfg = state["config"]
        feat = ComplexFeaturizer(n_core=cfg["n_core"], m_max=cfg["m_max"], scale=cfg["scale"])
        net = cls(np.random.default_rng(0), hidden=cfg["hidden"], n_hidden=cfg["n_hidden"],
                  featurizer=feat, tr_scale=cfg["tr_scale"], time_width=cfg["time_width"])
        params = {p.name: p for p in net.parameters()}
        for name, value in state["params"].items():
            params[name].value[...] = np.asarray(value, dtype=float)
        return net


def save_checkpoint(path: str, state: dict, extra: dict | None = None) -> None:
    """Atomic write of a checkpoint dict (with optional metadata) as JSON."""
    blob = dict(state)
    if extra:
        blob["meta"] = extra
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(blob, fh, sort_keys=True, separators=(",", ":"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0


def velocity_loss_and_grad(net: ToyVelocityNet, out: np.ndarray, targets_body: np.ndarray,
                           tor_masks: np.ndarray, weights: LossWeights):
    """Mean weighted squared error over a batch plus the gradient w.r.t. out.

    ``targets_body``: (B, 6 + m_max) rows of (v_tr body, v_rot body, padded
    v_tor); ``tor_masks``: (B, m_max) booleans.  The translation block of
    ``out`` is in units of tr_scale.
    """
    b = out.shape[0]
    s = net.tr_scale
    pred = out.copy()
    pred[:, 0:3] *= s
    resid = pred - targets_body
    resid[:, 6:][~tor_masks] = 0.0
    w = np.concatenate([
        np.full(3, weights.w_tr),
        np.full(3, weights.w_rot),
        np.full(net.m_max, weights.w_tor),
    ])
    loss = float(np.sum(w * resid**2) / b)
    grad = 2.0 * w * resid / b
    grad[:, 0:3] *= s
    return loss, grad


def _training_batch(net, corpus, stage_cfg, aug_cfg, rng, batch_size, prepared):
    geos, ts, targets, masks = [], [], [], []
    for _ in range(batch_size):
        idx = int(rng.integers(0, len(corpus)))
        record = corpus[idx]
        slots, flat_coords, layout = prepared[idx]
        conf = slots.conformer

        aug = augment(flat_coords, record.native_coords, aug_cfg, rng)
        native = aug.ligand_coords
        # Decorrelate the working conformer frame from the native frame.
        rand_pose = PoseTransform(
            np.zeros(3),
            sample_rotation_uniform(rng),
            tuple(sample_torsion_uniform(rb.period, rng) for rb in conf.rotatable_bonds),
        )
        base_conf = conf.with_coords(native)
        work = base_conf.with_coords(apply_pose(base_conf, rand_pose))
        work_slots = LigandSlots(work, slots.core_atoms, slots.tip_atoms)

        tor_mask = torsion_supervision_mask(work, aug.ligand_keep)
        shell_coords = aug.protein_coords[layout.shell_idx]
        kept_shell = shell_coords[aug.protein_keep[layout.shell_idx]]
        if len(kept_shell):
            prot_center = kept_shell.mean(axis=0)
        elif len(shell_coords):
            prot_center = shell_coords.mean(axis=0)
        else:
            prot_center = native.mean(axis=0)
        sample = make_training_sample(work, native, stage_cfg, rng,
                                      protein_center=prot_center, torsion_mask=tor_mask)

        geo = net.featurizer.features(
            work_slots, aug.protein_coords, layout, sample.xt, sample.t,
            site_keep=aug.protein_keep, lig_keep=aug.ligand_keep,
        )
        body = sample.xt.rot.matrix().T
        target = np.zeros(6 + net.m_max)
        target[0:3] = body @ sample.target.tr
        target[3:6] = sample.target.rot
        m = min(work.n_rotatable, net.m_max)
        target[6 : 6 + m] = sample.target.tor[:m]
        mask = np.zeros(net.m_max, dtype=bool)
        mask[:m] = sample.torsion_mask[:m]

        geos.append(geo)
        ts.append(sample.t)
        targets.append(target)
        masks.append(mask)
    return np.array(geos), np.array(ts), np.array(targets), np.array(masks)


def train_stage(net: ToyVelocityNet, corpus, stage_cfg: StageConfig,
                aug_cfg: AugmentConfig, weights: LossWeights,
                train_cfg: TrainConfig) -> list[float]:
    """Run the stage training loop over a corpus of complex records.

    Returns the per-step loss curve.  Deterministic under a fixed seed.
    Raises TrainingDivergence if the loss becomes non-finite.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(train_cfg.seed)
    params = net.parameters()
    opt_kwargs = {"momentum": train_cfg.momentum} if train_cfg.optimizer == "sgd" else {
        "weight_decay": train_cfg.weight_decay
    }
    opt = make_optimizer(train_cfg.optimizer, params, train_cfg.lr, **opt_kwargs)
    prepared = []
    for record in corpus:
        slots = net.featurizer.prepare(record.ligand)
        flat_coords, layout = flatten_protein(record.protein)
        prepared.append((slots, flat_coords, layout))
    curve = []
    for step in range(train_cfg.steps):
        geos, ts, targets, masks = _training_batch(
            net, corpus, stage_cfg, aug_cfg, rng, train_cfg.batch_size, prepared
        )
        out = net.forward(geos, ts)
        loss, grad = velocity_loss_and_grad(net, out, targets, masks, weights)
        if not math.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at step {step}")
        zero_grads(params)
        net.backward(grad)
        opt.step()
        curve.append(loss)
    return curve
