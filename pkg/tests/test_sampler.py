import math

import numpy as np
import pytest

from poseflow.flowmatch import Velocity, interpolate_pose, pose_velocity
from poseflow.ligand import PoseTransform, apply_pose
from poseflow.manifold import Rotation3, Torsion, sample_rotation_uniform, so3_exp, so3_log
from poseflow.sampler import (
    NetField,
    RolloutConfig,
    RolloutError,
    euler_rollout,
    staged_inference,
)
from poseflow.toysuite import generate_corpus
from poseflow.velocity_net import ToyVelocityNet

from conftest import make_branched


def random_pose(conformer, rng, tr_scale=3.0):
    return PoseTransform(
        tr=rng.normal(0, tr_scale, 3),
        rot=sample_rotation_uniform(rng),
        torsions=tuple(
            Torsion(rng.uniform(-rb.period / 2, rb.period / 2), rb.period)
            for rb in conformer.rotatable_bonds
        ),
    )


def pose_distance(a: PoseTransform, b: PoseTransform) -> float:
    d = float(np.linalg.norm(a.tr - b.tr))
    d += a.rot.angle_to(b.rot)
    for ta, tb in zip(a.torsions, b.torsions):
        d += abs(ta.theta - tb.theta)
    return d


def test_zero_field_returns_initial(branched):
    rng = np.random.default_rng(0)
    p0 = random_pose(branched, rng)
    zero = lambda pose, t: Velocity(np.zeros(3), np.zeros(3), np.zeros(branched.n_rotatable))
    out = euler_rollout(zero, p0, branched, 10)
    assert pose_distance(out, p0) < 1e-12


@pytest.mark.parametrize("n_steps", [1, 2, 7, 10, 64])
def test_constant_field_exact_for_any_step_count(branched, n_steps):
    # The constant oracle field (full-path velocities toward the target)
    # integrates exactly on all three manifolds.
    rng = np.random.default_rng(1)
    p0 = random_pose(branched, rng, tr_scale=8.0)
    p1 = random_pose(branched, rng, tr_scale=8.0)
    v = pose_velocity(p0, p1)
    field = lambda pose, t: v
    out = euler_rollout(field, p0, branched, n_steps)
    assert np.linalg.norm(out.tr - p1.tr) < 1e-6
    assert out.rot.angle_to(p1.rot) < 1e-6
    for ta, tb in zip(out.torsions, p1.torsions):
        assert abs(ta.theta - tb.theta) < 1e-6


def test_remaining_velocity_field_also_exact(branched):
    # Evaluating the time-rescaled remaining velocity at the current state is
    # what a perfectly trained net would return; Euler then lands on target.
    rng = np.random.default_rng(2)
    p0 = random_pose(branched, rng, tr_scale=6.0)
    p1 = random_pose(branched, rng, tr_scale=6.0)

    def field(pose, t):
        v = pose_velocity(pose, p1)
        scale = 1.0 / (1.0 - t) if t < 1.0 else 0.0
        return Velocity(v.tr * scale, v.rot * scale, v.tor * scale)

    out = euler_rollout(field, p0, branched, 10)
    assert np.linalg.norm(out.tr - p1.tr) < 1e-9
    assert out.rot.angle_to(p1.rot) < 1e-6


def test_convergence_order_on_smooth_field(branched):
    # A smooth nonconstant synthetic field integrates with O(h) global error.
    rng = np.random.default_rng(3)
    p0 = random_pose(branched, rng, tr_scale=2.0)
    m = branched.n_rotatable

    def field(pose, t):
        tr = np.array([math.sin(2 * t + 0.3), math.cos(t), 0.4 - t])
        rot = 0.8 * np.array([math.sin(t), math.cos(2 * t), 0.2 + 0.3 * t])
        tor = 0.5 * np.array([math.sin(3 * t + j) for j in range(m)])
        # State-dependent modulation keeps the exact solution nontrivial.
        mod = 1.0 + 0.1 * math.tanh(pose.tr[0] / 5.0)
        return Velocity(tr * mod, rot * mod, tor * mod)

    ref = euler_rollout(field, p0, branched, 5120)
    errors = []
    steps = [5, 10, 20, 40, 80, 160]
    for n in steps:
        out = euler_rollout(field, p0, branched, n)
        errors.append(pose_distance(out, ref))
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert -1.2 <= slope <= -0.8


def test_rollout_invariants_hold_each_step(branched):
    rng = np.random.default_rng(4)
    p = random_pose(branched, rng)

    def field(pose, t):
        # Check invariants on the fly while driving a wild trajectory.
        assert abs(float(pose.rot.q @ pose.rot.q) - 1.0) < 1e-9
        for tor in pose.torsions:
            assert -tor.period / 2 < tor.theta <= tor.period / 2
        return Velocity(rng.normal(0, 5, 3), rng.normal(0, 3, 3), rng.normal(0, 3, branched.n_rotatable))

    euler_rollout(field, p, branched, 25)


def test_nan_velocity_aborts_with_snapshot(branched):
    rng = np.random.default_rng(5)
    p0 = random_pose(branched, rng)

    def field(pose, t):
        if t > 0.45:
            return Velocity(np.array([np.nan, 0, 0]), np.zeros(3), np.zeros(branched.n_rotatable))
        return Velocity(np.ones(3), np.zeros(3), np.zeros(branched.n_rotatable))

    with pytest.raises(RolloutError) as err:
        euler_rollout(field, p0, branched, 10)
    assert err.value.step == 5
    assert isinstance(err.value.pose, PoseTransform)


# ------------------------------------------------------------ staged rollout


@pytest.fixture(scope="module")
def toy_setup():
    corpus = generate_corpus(17, 3)
    rec = corpus[0]
    nets = tuple(ToyVelocityNet(np.random.default_rng(s), hidden=16, n_hidden=1) for s in (1, 2, 3))
    return rec, nets


def test_staged_inference_deterministic(toy_setup):
    rec, nets = toy_setup
    cfg = RolloutConfig(n_steps=5, n_samples=2, seed=123)
    a = staged_inference(rec.ligand, rec.protein, nets, cfg)
    b = staged_inference(rec.ligand, rec.protein, nets, cfg)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.coords, rb.coords)


def test_staged_inference_zero_nets(toy_setup):
    # With all-zero nets the final translation equals the stage-1 initial
    # draw and the angles equal the stage-2 initial draws.
    rec, _ = toy_setup
    zero_nets = []
    for s in (1, 2, 3):
        net = ToyVelocityNet(np.random.default_rng(s), hidden=8, n_hidden=1)
        for p in net.parameters():
            p.value[...] = 0.0
        zero_nets.append(net)
    cfg = RolloutConfig(n_steps=4, n_samples=3, seed=7)
    out = staged_inference(rec.ligand, rec.protein, zero_nets, cfg)

    from poseflow.sampler import _pose_with_center, _random_angles, _seeded_rng
    from poseflow.velocity_net import flatten_protein

    site_coords, layout = flatten_protein(rec.protein)
    center = site_coords[layout.shell_idx].mean(axis=0)
    for s, res in enumerate(out):
        rng1 = _seeded_rng(7, s, 1)
        _random_angles(rec.ligand, rng1)
        z0 = center + cfg.sigma_large * rng1.standard_normal(3)
        assert np.allclose(apply_pose(rec.ligand, res.pose).mean(axis=0), z0, atol=1e-9)
        rng2 = _seeded_rng(7, s, 2)
        rot2, tors2 = _random_angles(rec.ligand, rng2)
        assert res.pose.rot.angle_to(rot2) < 1e-9
        for ta, tb in zip(res.pose.torsions, tors2):
            assert abs(ta.theta - tb.theta) < 1e-12


def test_pocket_aware_matches_blind_when_centers_agree(toy_setup):
    rec, nets = toy_setup
    cfg = RolloutConfig(n_steps=5, n_samples=1, seed=31)
    blind = staged_inference(rec.ligand, rec.protein, nets, cfg)
    # Recover the stage-1 output center of sample 0, then run pocket-aware
    # with exactly that center: stages 2-3 must reproduce the blind result.
    from poseflow.sampler import NetField, _pose_with_center, _random_angles, _seeded_rng, euler_rollout
    from poseflow.velocity_net import flatten_protein

    site_coords, layout = flatten_protein(rec.protein)
    rng1 = _seeded_rng(31, 0, 1)
    rot0, tors0 = _random_angles(rec.ligand, rng1)
    z0 = site_coords[layout.shell_idx].mean(axis=0) + cfg.sigma_large * rng1.standard_normal(3)
    pose0 = _pose_with_center(rec.ligand, rot0, tors0, z0)
    f1 = NetField(nets[0], nets[0].featurizer.prepare(rec.ligand), site_coords, layout)
    pose1 = euler_rollout(f1, pose0, rec.ligand, cfg.n_steps)
    center1 = apply_pose(rec.ligand, pose1).mean(axis=0)

    aware = staged_inference(rec.ligand, rec.protein, nets, cfg, pocket_center=center1)
    assert np.allclose(aware[0].coords, blind[0].coords, atol=1e-12)


def test_pocket_aware_skips_stage1(toy_setup):
    rec, nets = toy_setup
    cfg = RolloutConfig(n_steps=3, n_samples=2, seed=5)
    out = staged_inference(rec.ligand, rec.protein, (None, nets[1], nets[2]), cfg,
                           pocket_center=rec.pocket_center)
    assert len(out) == 2
    with pytest.raises(ValueError, match="stage-1"):
        staged_inference(rec.ligand, rec.protein, (None, nets[1], nets[2]), cfg)


def test_missing_stage_model_rejected(toy_setup):
    rec, nets = toy_setup
    with pytest.raises(ValueError, match="stage-2"):
        staged_inference(rec.ligand, rec.protein, (nets[0], None, nets[2]),
                         RolloutConfig(n_steps=2, n_samples=1, seed=0))
