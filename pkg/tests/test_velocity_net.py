import math

import numpy as np
import pytest

from poseflow.flowmatch import AugmentConfig, LossWeights, StageConfig, Velocity
from poseflow.ligand import PoseTransform, apply_pose, relative_pose
from poseflow.manifold import Rotation3, sample_rotation_uniform
from poseflow.nn import zero_grads
from poseflow.toysuite import generate_complex, generate_corpus
from poseflow.velocity_net import (
    AttentionBiasFeaturizer,
    ComplexFeaturizer,
    TimeEmbedding,
    ToyVelocityNet,
    TrainConfig,
    TrainingDivergence,
    flatten_protein,
    save_checkpoint,
    load_checkpoint,
    train_stage,
    velocity_loss_and_grad,
)

from test_nn import numeric_gradients, relative_error


@pytest.fixture(scope="module")
def complex_record():
    rec = generate_complex(11, 0)
    assert rec is not None
    return rec


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(13, 6)


# ------------------------------------------------------------ attention bias


def test_attention_bias_shape_and_zero_distance():
    rng = np.random.default_rng(0)
    bias = AttentionBiasFeaturizer(rng, n_edge_types=4, n_kernels=8, n_heads=3)
    coords = rng.normal(size=(5, 3))
    types = np.ones((5, 5), dtype=int)
    out = bias.attention_bias(coords, types)
    assert out.shape == (3, 5, 5)
    assert bias.stabilized_inverse_distance(np.zeros(3)) == 1.0


def test_stabilized_inverse_distance_unit_separation():
    assert AttentionBiasFeaturizer.stabilized_inverse_distance([1.0, 0.0, 0.0]) == 0.5


def test_attention_bias_directional_oddness():
    # With a linear zero-offset direction term, swapping i and j negates the
    # directional part while the radial part is symmetric.
    rng = np.random.default_rng(1)
    bias = AttentionBiasFeaturizer(rng, n_kernels=6, n_heads=2)
    coords = rng.normal(size=(4, 3))
    types = np.full((4, 4), 2, dtype=int)
    out = bias.attention_bias(coords, types)
    radial_only = AttentionBiasFeaturizer(rng, n_kernels=6, n_heads=2)
    radial_only.alpha = bias.alpha
    radial_only.beta = bias.beta
    radial_only.mu = bias.mu
    radial_only.sigma = bias.sigma
    radial_only.radial = bias.radial
    radial_only.direction = np.zeros_like(bias.direction)
    rad = radial_only.attention_bias(coords, types)
    directional = out - rad
    assert np.allclose(rad, np.swapaxes(rad, 1, 2), atol=1e-12)
    assert np.allclose(directional, -np.swapaxes(directional, 1, 2), atol=1e-12)


def test_attention_bias_permutation_consistency():
    rng = np.random.default_rng(2)
    bias = AttentionBiasFeaturizer(rng)
    coords = rng.normal(size=(6, 3))
    types = rng.integers(1, 5, size=(6, 6))
    types = np.triu(types) + np.triu(types, 1).T  # symmetric edge types
    out = bias.attention_bias(coords, types)
    perm = np.array([3, 1, 5, 0, 4, 2])
    out_p = bias.attention_bias(coords[perm], types[np.ix_(perm, perm)])
    assert np.allclose(out_p, out[:, perm][:, :, perm], atol=1e-12)


def test_attention_bias_rejects_bad_edge_type():
    rng = np.random.default_rng(3)
    bias = AttentionBiasFeaturizer(rng, n_edge_types=2)
    with pytest.raises(ValueError, match="edge type"):
        bias.attention_bias(np.zeros((2, 3)), np.full((2, 2), 7))


def test_attention_bias_gaussian_rbf_values():
    rng = np.random.default_rng(4)
    bias = AttentionBiasFeaturizer(rng, n_kernels=4, n_heads=1)
    # With alpha=1, beta=0 and two coincident points, s=1; check the RBF
    # against the normal density formula.
    st = 1.0
    z = (st - bias.mu) / bias.sigma
    expected = np.exp(-0.5 * z**2) / (bias.sigma * math.sqrt(2 * math.pi))
    coords = np.zeros((2, 3))
    phi = 1.0 / (np.sum((coords[0] - coords[1]) ** 2) + 1.0)
    zz = (bias.alpha[0] * phi + bias.beta[0] - bias.mu) / bias.sigma
    got = np.exp(-0.5 * zz**2) / (bias.sigma * math.sqrt(2 * math.pi))
    assert np.allclose(got, expected)


# -------------------------------------------------------------- featurization


def test_time_embedding_deterministic():
    rng = np.random.default_rng(5)
    emb = TimeEmbedding(rng)
    t = np.array([0.0, 0.3, 0.9])
    assert np.array_equal(emb.forward(t), emb.forward(t))


def test_features_finite_and_fixed_dim(complex_record):
    rec = complex_record
    feat = ComplexFeaturizer()
    slots = feat.prepare(rec.ligand)
    coords, layout = flatten_protein(rec.protein)
    x1 = relative_pose(rec.ligand, rec.native_coords)
    for t in (0.0, 0.5, 0.99):
        g = feat.features(slots, coords, layout, x1, t)
        assert g.shape == (feat.feature_dim(),)
        assert np.all(np.isfinite(g))


def test_features_equivariant_under_global_rotation(complex_record):
    # Rigidly rotating the whole complex (pose rotation conjugated, reference
    # coordinates co-rotated) rotates every 3-vector feature block by g and
    # leaves all other entries unchanged.
    rec = complex_record
    feat = ComplexFeaturizer()
    slots = feat.prepare(rec.ligand)
    coords, layout = flatten_protein(rec.protein)
    pose = relative_pose(rec.ligand, rec.native_coords)
    rng = np.random.default_rng(6)
    g = sample_rotation_uniform(rng)
    m = g.matrix()

    conf2 = rec.ligand.with_coords(rec.ligand.coords @ m.T)
    slots2 = feat.prepare(conf2)
    assert slots2.core_atoms == slots.core_atoms
    pose2 = PoseTransform(m @ pose.tr, (g @ pose.rot) @ g.inverse(), pose.torsions)
    f1 = feat.features(slots, coords, layout, pose, 0.4)
    f2 = feat.features(slots2, coords @ m.T, layout, pose2, 0.4)
    expected = f1.copy()
    vec = np.zeros(len(f1), dtype=bool)
    for off in feat.vector_block_offsets():
        expected[off : off + 3] = m @ f1[off : off + 3]
        vec[off : off + 3] = True
    assert np.allclose(f2, expected, atol=1e-8)
    assert np.allclose(f2[~vec], f1[~vec], atol=1e-8)


def test_solver_features_align_with_targets(small_corpus):
    # On clean data (no augmentation noise) the geometric solver blocks of
    # the feature vector approximate the body-frame supervision directly.
    from poseflow.velocity_net import _training_batch

    net = ToyVelocityNet(np.random.default_rng(20), hidden=8, n_hidden=1)
    prepared = []
    for record in small_corpus:
        slots = net.featurizer.prepare(record.ligand)
        flat, layout = flatten_protein(record.protein)
        prepared.append((slots, flat, layout))
    rng = np.random.default_rng(21)
    cfg = StageConfig(stage=2)
    aug = AugmentConfig(rotate=True, coord_noise=0.0, mask_fraction=0.0)
    geos, ts, targets, masks = _training_batch(net, small_corpus, cfg, aug, rng, 200, prepared)
    o_rot = 7 * net.featurizer.n_core
    o_tr = o_rot + 7
    rem_tr = geos[:, o_tr + 9 : o_tr + 12] * (10.0 * net.featurizer.scale)
    err_tr = np.linalg.norm(rem_tr - targets[:, 0:3], axis=1)
    m_hat = geos[:, o_rot + 4 : o_rot + 7] * 10.0
    err_rot = np.linalg.norm(m_hat - targets[:, 3:6], axis=1)
    assert np.median(err_tr) < 0.5
    assert np.median(err_rot) < 0.3


# ---------------------------------------------------------------------- net


def test_zero_parameters_give_zero_output(complex_record):
    rng = np.random.default_rng(7)
    net = ToyVelocityNet(rng, hidden=16, n_hidden=1)
    for p in net.parameters():
        p.value[...] = 0.0
    geo = rng.normal(size=(3, net.featurizer.feature_dim()))
    out = net.forward(geo, np.array([0.1, 0.5, 0.9]))
    assert np.array_equal(out, np.zeros_like(out))


def test_forward_pure(complex_record):
    rng = np.random.default_rng(8)
    net = ToyVelocityNet(rng, hidden=16, n_hidden=1)
    geo = rng.normal(size=(2, net.featurizer.feature_dim()))
    t = np.array([0.2, 0.7])
    a = net.forward(geo, t)
    b = net.forward(geo, t)
    assert np.array_equal(a, b)


def test_net_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    net = ToyVelocityNet(rng, hidden=8, n_hidden=1, time_width=6)
    b = 3
    geo = rng.normal(size=(b, net.featurizer.feature_dim()))
    t = rng.uniform(0, 1, size=b)
    targets = rng.normal(size=(b, 6 + net.m_max))
    masks = np.ones((b, net.m_max), dtype=bool)
    weights = LossWeights(1.0, 1.0, 3.0)

    def loss_fn():
        out = net.forward(geo, t)
        return velocity_loss_and_grad(net, out, targets, masks, weights)[0]

    out = net.forward(geo, t)
    _, grad = velocity_loss_and_grad(net, out, targets, masks, weights)
    params = net.parameters()
    zero_grads(params)
    net.backward(grad)
    numeric = numeric_gradients(loss_fn, params, eps=1e-5)
    for p, num in zip(params, numeric):
        assert relative_error(p.grad, num) < 1e-4, p.name


def test_overfit_single_sample(complex_record):
    # 500 gradient steps on one fixed training sample crush the loss.
    rec = complex_record
    rng = np.random.default_rng(10)
    net = ToyVelocityNet(rng, hidden=32, n_hidden=1)
    geo = rng.normal(size=(1, net.featurizer.feature_dim()))
    t = np.array([0.4])
    target = rng.normal(size=(1, 6 + net.m_max))
    mask = np.ones((1, net.m_max), dtype=bool)
    weights = LossWeights()
    from poseflow.nn import AdamW

    params = net.parameters()
    opt = AdamW(params, lr=3e-3)
    first = None
    for _ in range(500):
        out = net.forward(geo, t)
        loss, grad = velocity_loss_and_grad(net, out, target, mask, weights)
        if first is None:
            first = loss
        zero_grads(params)
        net.backward(grad)
        opt.step()
    assert loss < 1e-3 * first


def test_train_stage_runs_and_is_deterministic(small_corpus):
    w = LossWeights()
    aug = AugmentConfig()
    cfg = TrainConfig(steps=30, batch_size=4, seed=5)
    net_a = ToyVelocityNet(np.random.default_rng(0), hidden=16, n_hidden=1)
    curve_a = train_stage(net_a, small_corpus, StageConfig(stage=2), aug, w, cfg)
    net_b = ToyVelocityNet(np.random.default_rng(0), hidden=16, n_hidden=1)
    curve_b = train_stage(net_b, small_corpus, StageConfig(stage=2), aug, w, cfg)
    assert curve_a == curve_b
    for pa, pb in zip(net_a.parameters(), net_b.parameters()):
        assert np.array_equal(pa.value, pb.value)
    assert np.mean(curve_a[-5:]) < np.mean(curve_a[:5])


def test_train_zero_lr_keeps_parameters(small_corpus):
    net = ToyVelocityNet(np.random.default_rng(1), hidden=16, n_hidden=1)
    before = [p.value.copy() for p in net.parameters()]
    cfg = TrainConfig(steps=5, batch_size=4, lr=0.0, optimizer="sgd", momentum=0.0, seed=2)
    train_stage(net, small_corpus, StageConfig(stage=2), AugmentConfig(), LossWeights(), cfg)
    for p, b in zip(net.parameters(), before):
        assert np.array_equal(p.value, b)


def test_training_divergence_detected(small_corpus):
    net = ToyVelocityNet(np.random.default_rng(2), hidden=16, n_hidden=1)
    net.parameters()[0].value[...] = np.nan
    with pytest.raises(TrainingDivergence):
        train_stage(net, small_corpus, StageConfig(stage=2), AugmentConfig(), LossWeights(),
                    TrainConfig(steps=2, batch_size=2, seed=0))


def test_checkpoint_round_trip(tmp_path, complex_record):
    rng = np.random.default_rng(11)
    net = ToyVelocityNet(rng, hidden=16, n_hidden=1)
    path = tmp_path / "net.json"
    save_checkpoint(str(path), net.to_state(), extra={"config_hash": "abc"})
    state = load_checkpoint(str(path))
    assert state["meta"]["config_hash"] == "abc"
    net2 = ToyVelocityNet.from_state(state)
    geo = rng.normal(size=(2, net.featurizer.feature_dim()))
    t = np.array([0.1, 0.8])
    assert np.allclose(net.forward(geo, t), net2.forward(geo, t), atol=0, rtol=0)


def test_predict_velocity_shapes(complex_record):
    rec = complex_record
    net = ToyVelocityNet(np.random.default_rng(12), hidden=16, n_hidden=1)
    slots = net.featurizer.prepare(rec.ligand)
    coords, layout = flatten_protein(rec.protein)
    pose = PoseTransform.identity(rec.ligand.torsion_periods())
    v = net.predict_velocity(slots, coords, layout, pose, 0.3)
    assert v.tr.shape == (3,) and v.rot.shape == (3,)
    assert v.tor.shape == (min(rec.ligand.n_rotatable, net.m_max),)
