import numpy as np
import pytest

from dnfnet import autograd as ag
from dnfnet.autograd import Tensor, finite_difference_check
from dnfnet.network import (DNFNet, ModelConfig, count_parameters, feature_extraction,
                            feature_grouping, feature_knn, forward, init_params, loss_deep,
                            loss_residual, loss_total, multiscale_embedding, normal_grouping,
                            residual_unit, residual_unit_size)

SMALL = dict(C=8, k1=2, k2=4, k3=6, k_res=4)


def _unit(rng, shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _index(rng, N, K):
    out = np.empty((N, K), np.int64)
    for r in range(N):
        out[r] = rng.permutation(np.delete(np.arange(N), r))[:K]
    return out


# -- grouping -----------------------------------------------------------------

def test_normal_grouping_example():
    n = np.array([[0, 0, 1], [1, 0, 0]], float)
    g = normal_grouping(Tensor(n), np.array([[1], [0]]), 1).data
    assert g.tolist() == [[[0, 0, 1, 1, 0, 0]], [[1, 0, 0, 0, 0, 1]]]


def test_normal_grouping_constant_field():
    n = np.tile([0.0, 0.6, 0.8], (5, 1))
    g = normal_grouping(Tensor(n), _index(np.random.default_rng(0), 5, 3), 3).data
    assert np.allclose(g, np.tile([0.0, 0.6, 0.8, 0.0, 0.6, 0.8], (5, 3, 1)))


def test_grouping_rejects_wide_k():
    with pytest.raises(ValueError):
        normal_grouping(Tensor(np.zeros((3, 3))), np.zeros((3, 2), int), 3)


def test_feature_grouping_example():
    g = feature_grouping(Tensor(np.array([[3.0], [5.0]])), np.array([[1], [0]]), 1).data
    assert g.tolist() == [[[3, 2]], [[5, -2]]]


def test_feature_grouping_constant_residual_zero():
    g = feature_grouping(Tensor(np.ones((4, 3))), _index(np.random.default_rng(1), 4, 3), 3).data
    assert np.all(g[..., 3:] == 0)


def test_feature_grouping_without_subtraction_matches_normal_grouping():
    rng = np.random.default_rng(2)
    n = _unit(rng, (6, 3))
    idx = _index(rng, 6, 4)
    a = feature_grouping(Tensor(n), idx, 4, subtraction=False).data
    assert np.array_equal(a, normal_grouping(Tensor(n), idx, 4).data)


# -- extraction ---------------------------------------------------------------

def _params(cfg=None, seed=0):
    with ag.precision("double"):
        return init_params(cfg or ModelConfig(**SMALL), seed)


def test_extraction_k1_is_projection_of_gated_input():
    cfg = ModelConfig(**SMALL)
    p = _params(cfg)
    rng = np.random.default_rng(3)
    G = rng.normal(size=(5, 1, 6))
    out = feature_extraction(Tensor(G, dtype=np.float64), p, "level1").data

    def fc(name, x, act=True):
        y = x @ p[f"{name}.W"].data + p[f"{name}.b"].data
        return np.maximum(y, 0) if act else y
    x = G[:, 0]
    mlp = fc("level1.att.fc2", fc("level1.att.fc1", x), act=False)
    gate = 1 / (1 + np.exp(-2 * mlp))
    assert np.allclose(out, fc("level1.proj", x * gate))


def test_extraction_open_gate_is_plain_mlp_maxpool():
    cfg = ModelConfig(**SMALL)
    p = _params(cfg)
    p["level1.att.fc1.W"].data[:] = 0
    p["level1.att.fc2.W"].data[:] = 0
    p["level1.att.fc2.b"].data[:] = 50.0
    G = np.random.default_rng(4).normal(size=(5, 3, 6))
    out = feature_extraction(Tensor(G, dtype=np.float64), p, "level1").data
    plain = np.maximum(G @ p["level1.proj.W"].data + p["level1.proj.b"].data, 0).max(axis=1)
    assert np.allclose(out, plain, atol=1e-12)


def test_extraction_neighbour_order_free():
    p = _params()
    rng = np.random.default_rng(5)
    G = rng.normal(size=(7, 5, 6))
    a = feature_extraction(Tensor(G, dtype=np.float64), p, "level1").data
    b = feature_extraction(Tensor(G[:, rng.permutation(5)], dtype=np.float64), p, "level1").data
    assert np.allclose(a, b, atol=1e-12)


def test_index_column_order_within_k_is_irrelevant():
    cfg = ModelConfig(**SMALL)
    p = _params(cfg)
    rng = np.random.default_rng(6)
    n = Tensor(_unit(rng, (10, 3)), dtype=np.float64)
    idx = _index(rng, 10, 6)
    shuffled = idx.copy()
    shuffled[:, :2] = shuffled[:, [1, 0]]
    a = feature_extraction(normal_grouping(n, idx, 2), p, "level1").data
    b = feature_extraction(normal_grouping(n, shuffled, 2), p, "level1").data
    assert np.allclose(a, b, atol=1e-12)


def test_embedding_shape_and_constant_patch():
    cfg = ModelConfig(**SMALL)
    p = _params(cfg)
    n = np.tile([0.0, 0.0, 1.0], (9, 1))
    F = multiscale_embedding(Tensor(n, dtype=np.float64), _index(np.random.default_rng(7), 9, 6),
                             p, cfg).data
    assert F.shape == (9, 8)
    assert np.allclose(F, F[0])


# -- residual units -----------------------------------------------------------

def test_feature_knn_examples():
    assert feature_knn(np.array([[0.0], [1.0], [10.0]]), 1)[:, 0].tolist() == [1, 0, 1]
    assert feature_knn(np.array([[0.0], [1.0]]), 3).tolist() == [[1, 1, 1], [0, 0, 0]]


def test_feature_knn_matches_brute_force():
    f = np.random.default_rng(8).normal(size=(12, 4))
    got = feature_knn(f, 5)
    for r in range(12):
        d = [(np.sum((f[r] - f[j]) ** 2), j) for j in range(12) if j != r]
        assert got[r].tolist() == [j for _, j in sorted(d)[:5]]


def test_residual_unit_equivariant():
    cfg = ModelConfig(**SMALL)
    p = _params(cfg)
    rng = np.random.default_rng(9)
    f = rng.normal(size=(11, 8))
    perm = rng.permutation(11)
    a = residual_unit(Tensor(f, dtype=np.float64), p, 1, 4).data
    b = residual_unit(Tensor(f[perm], dtype=np.float64), p, 1, 4).data
    assert np.abs(a[perm] - b).max() <= 1e-10


def _random_patch(rng, N, K):
    return _unit(rng, (N, 3)), _index(rng, N, K)


def test_forward_equivariance_single_precision():
    cfg = ModelConfig(**SMALL)
    net = DNFNet(cfg, seed=1)
    rng = np.random.default_rng(10)
    n, idx = _random_patch(rng, 24, 6)
    perm = rng.permutation(24)
    inv = np.argsort(perm)
    a = net.forward(n, idx)
    b = net.forward(n[perm], inv[idx[perm]])
    for x, y in [(a.normals, b.normals), (a.features, b.features),
                 (a.intermediate, b.intermediate)] + list(zip(a.residuals, b.residuals)):
        assert np.abs(x.data[0][perm] - y.data[0]).max() <= 1e-5


def test_forward_outputs_unit_rows():
    net = DNFNet(ModelConfig(**SMALL), seed=2)
    n, idx = _random_patch(np.random.default_rng(11), 16, 6)
    out = net.forward(n, idx)
    for t in [out.normals] + out.intermediates:
        assert np.abs(np.linalg.norm(t.data.astype(np.float64), axis=-1) - 1).max() <= 1e-6


def test_zero_residual_weights_pass_features_through():
    cfg = ModelConfig(**SMALL)
    p = _params(cfg)
    for u in (1, 2):
        for s in ("fc1", "fc2"):
            p[f"res{u}.{s}.W"].data[:] = 0
    n, idx = _random_patch(np.random.default_rng(12), 10, 6)
    out = forward(Tensor(n[None], dtype=np.float64), idx[None], p, cfg)
    assert np.array_equal(out.cleaned[0].data, out.features.data)
    assert np.array_equal(out.cleaned[1].data, out.features.data)
    assert np.all(out.residuals[0].data == 0)


def test_single_unit_two_heads_share_input():
    cfg = ModelConfig(**SMALL, num_res_units=1)
    assert cfg.num_heads == 2
    p = _params(cfg)
    p["head2.fc1.W"].data[:] = p["head1.fc1.W"].data
    p["head2.fc2.W"].data[:] = p["head1.fc2.W"].data
    n, idx = _random_patch(np.random.default_rng(13), 10, 6)
    out = forward(Tensor(n[None], dtype=np.float64), idx[None], p, cfg)
    assert len(out.intermediates) == 1
    assert np.array_equal(out.normals.data, out.intermediate.data)


def test_three_units_three_heads():
    cfg = ModelConfig(**SMALL, num_res_units=3)
    net = DNFNet(cfg)
    n, idx = _random_patch(np.random.default_rng(14), 10, 6)
    out = net.forward(n, idx)
    assert len(out.intermediates) == 2 and len(out.residuals) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(k1=5, k2=5, k3=6)
    with pytest.raises(ValueError):
        ModelConfig(alpha=-1)
    with pytest.raises(ValueError):
        ModelConfig(**SMALL).check_k(5)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"C": 4, "bogus": 1})


# -- losses -------------------------------------------------------------------

def test_loss_deep_examples():
    gt = np.array([[0.0, 0.0, 1.0]])
    same = loss_deep(Tensor(gt), Tensor(gt), Tensor(gt)).data
    assert same == 0
    pred = Tensor(np.array([[0.0, 1.0, 0.0]]))
    assert loss_deep(pred, pred, Tensor(gt)).data == pytest.approx(4.0)
    anti = Tensor(-gt)
    assert loss_deep(anti, anti, Tensor(gt)).data == pytest.approx(8.0)
    assert loss_deep(anti, anti, Tensor(gt), supervise_intermediate=False).data == pytest.approx(4.0)


def test_loss_deep_is_batch_mean_of_patch_means():
    rng = np.random.default_rng(15)
    gt = _unit(rng, (2, 5, 3))
    a = _unit(rng, (2, 5, 3))
    b = _unit(rng, (2, 5, 3))
    per = [np.mean(np.sum((gt[i] - a[i]) ** 2, -1)) + np.mean(np.sum((gt[i] - b[i]) ** 2, -1))
           for i in range(2)]
    assert loss_deep(Tensor(a), Tensor(b), Tensor(gt)).data == pytest.approx(np.mean(per))


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss_deep(Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 3))), Tensor(np.zeros((4, 3))))


def test_loss_residual_examples():
    z = Tensor(np.zeros((4, 8)))
    assert loss_residual([z, z]).data == 0
    two = Tensor(np.full((4, 8), 2.0))
    assert loss_residual([two, z]).data == pytest.approx(4.0)
    r = Tensor(np.random.default_rng(16).normal(size=(4, 8)))
    doubled = Tensor(2 * r.data)
    assert loss_residual([doubled]).data == pytest.approx(4 * loss_residual([r]).data)


def test_loss_total_examples():
    assert loss_total(Tensor(1.0), Tensor(2.0), 0.5).data == pytest.approx(2.0)
    assert loss_total(Tensor(1.5), Tensor(2.0), 0.0).data == pytest.approx(1.5)
    assert loss_total(Tensor(0.0), Tensor(0.0), 0.7).data == 0


def test_ablation_flags():
    rng = np.random.default_rng(17)
    n, idx = _random_patch(rng, 12, 6)
    gt = _unit(rng, (12, 3))
    full = DNFNet(ModelConfig(**SMALL), seed=3)
    out = full.forward(n, idx)
    deep = loss_deep(out.normals, out.intermediates, Tensor(gt[None], dtype=np.float32)).data
    resid = loss_residual(out.residuals).data
    assert full.loss(out, gt).data == pytest.approx(deep + 0.5 * resid, rel=1e-6)
    noreg = DNFNet(ModelConfig(**SMALL, residual_regularization=False), params=full.params)
    assert noreg.loss(noreg.forward(n, idx), gt).data == pytest.approx(deep, rel=1e-6)


# -- gradients and parameters ---------------------------------------------------

def test_full_loss_gradient_check():
    cfg = ModelConfig(C=8, k1=2, k2=4, k3=8, k_res=4)
    rng = np.random.default_rng(18)
    n, idx = _random_patch(rng, 12, 8)
    gt = _unit(rng, (12, 3))
    with ag.precision("double"):
        net = DNFNet(cfg, seed=4)
        net.astype("double")
        res = finite_difference_check(lambda: net.loss(net.forward(n, idx), gt),
                                      net.parameters(), max_entries=12, rng=0)
    assert res.checked > 100
    assert res.max_rel_error < 1e-4, res


def test_parameter_budget():
    two = ModelConfig(C=128)
    three = ModelConfig(C=128, num_res_units=3)
    assert 300_000 <= count_parameters(two) <= 420_000
    assert count_parameters(three) - count_parameters(two) == residual_unit_size(two)
    assert DNFNet(two).num_parameters() == count_parameters(two)


def test_checkpoint_round_trip(tmp_path):
    net = DNFNet(ModelConfig(**SMALL), seed=5)
    p = tmp_path / "m.ckpt"
    net.save(p, {"N": 12, "K": 6})
    back = DNFNet.load(p)
    assert back.config == net.config and back.meta == {"N": 12, "K": 6}
    n, idx = _random_patch(np.random.default_rng(19), 12, 6)
    assert np.array_equal(back.predict(n, idx), net.predict(n, idx))


def test_deterministic_init_and_forward():
    a = DNFNet(ModelConfig(**SMALL), seed=7)
    b = DNFNet(ModelConfig(**SMALL), seed=7)
    n, idx = _random_patch(np.random.default_rng(20), 12, 6)
    assert np.array_equal(a.predict(n, idx), b.predict(n, idx))
