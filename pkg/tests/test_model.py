import numpy as np
import pytest

from graphstad.diagnostics import tiny_geometry
from graphstad.geometry import GeometryConfig
from graphstad.model import VARIANTS, ArchConfig, GraphSTAD, plan_pooling
from graphstad.tensor import ContractError, NormalizedAdjacency, Tensor, gcn_layer, global_attention_pool, ops
from graphstad.training import LossConfig, channel_weights, total_loss

from oracles import clique_adjacency

TINY = dict(cnn_features=(2, 3), gnn_features=(3, 2), lstm_sizes=(4, 3), latent=3, window=3)


def test_default_geometry_plan():
    plan = plan_pooling((64, 72, 7), 4)
    assert plan.extents == [(64, 72, 7), (32, 36, 4), (16, 18, 2), (8, 9, 1), (4, 5, 1)]
    assert plan.bottleneck == (4, 4, 1)


def test_small_geometry_plan():
    plan = plan_pooling((8, 8, 2), 4)
    assert plan.extents[1:] == [(4, 4, 1), (2, 2, 1), (1, 1, 1), (1, 1, 1)]
    assert plan.align is None
    assert GraphSTAD(ArchConfig(), GeometryConfig(n_ieta=8, n_iphi=8, n_depth=2, active_ieta_min=1,
                                                   active_ieta_max=4, depth_profile=None)).cnn_flat == 128


def test_default_geometry_shapes():
    model = GraphSTAD(ArchConfig(), GeometryConfig.full())
    assert model.cnn_flat == 2048
    x = np.random.default_rng(0).random((1, 5) + model.geometry.shape).astype(np.float32)
    maps = Tensor(x.reshape((5,) + model.geometry.shape))
    feats, _ = model.encode_cnn(maps)
    y = ops.concat([feats, model.encode_gnn(maps)], axis=-1)
    assert y.shape == (5, 2176)
    x_rec, lat = model.forward(Tensor(x))
    assert lat.z.shape == (1, 32)
    assert x_rec.shape == x.shape


def test_toy_output_shape_all_variants():
    g = GeometryConfig.toy()
    for name in VARIANTS:
        arch = ArchConfig.variant(name, **TINY)
        model = GraphSTAD(arch, g)
        T = arch.window
        x = Tensor(np.random.default_rng(1).random((2, T) + g.shape))
        out, lat = model.forward(x)
        assert out.shape == x.shape, name
        assert np.isfinite(out.data).all() and (out.data >= 0).all()


def test_zero_input_zero_cnn_features():
    model = GraphSTAD(ArchConfig.variant("graphstad", **TINY), tiny_geometry())
    feats, _ = model.encode_cnn(Tensor(np.zeros((2,) + tiny_geometry().shape)))
    assert not feats.data.any()


def test_vae_off_is_deterministic():
    g = tiny_geometry()
    model = GraphSTAD(ArchConfig(**TINY, use_vae=False), g)
    x = Tensor(np.random.default_rng(2).random((2, 3) + g.shape))
    lat, _ = model.encode(x, rng=np.random.default_rng(0))
    assert lat.z is lat.mu


def test_zero_eps_gives_mean():
    g = tiny_geometry()
    model = GraphSTAD(ArchConfig(**TINY), g)
    x = Tensor(np.random.default_rng(3).random((2, 3) + g.shape))
    lat, _ = model.encode(x, eps=np.zeros((2, 3)))
    np.testing.assert_array_equal(lat.z.data, lat.mu.data)


def test_reparameterization_statistics():
    g = tiny_geometry()
    model = GraphSTAD(ArchConfig.variant("nontemporal", **TINY), g)
    x = np.random.default_rng(4).random((1, 1) + g.shape)
    lat, _ = model.encode(Tensor(np.repeat(x, 10_000, axis=0)), rng=np.random.default_rng(5))
    mu, sigma = lat.mu.data[0], lat.sigma.data[0]
    assert np.all(np.abs(lat.z.data.mean(axis=0) - mu) <= 4 * sigma / 100)


def test_every_parameter_receives_gradient():
    g = tiny_geometry()
    model = GraphSTAD(ArchConfig(**TINY), g, seed=1)
    rng = np.random.default_rng(6)
    x = Tensor(rng.random((3, 3) + g.shape))
    cfg = LossConfig(depth_groups=((1,), (2,)))
    x_rec, lat = model.forward(x, training=True, rng=rng)
    loss, _ = total_loss(x, x_rec, lat.mu, lat.sigma, model.params, channel_weights(np.ones(g.shape, bool), cfg), cfg)
    loss.backward()
    dead = [n for n, t in model.params.trainable() if t.grad is None or not np.any(t.grad)]
    assert not dead


def test_untrained_loss_finite():
    g = GeometryConfig.toy()
    model = GraphSTAD(ArchConfig(**TINY), g)
    x = Tensor(np.random.default_rng(7).random((2, 3) + g.shape))
    x_rec, lat = model.forward(x)
    cfg = LossConfig(depth_groups=((1,), (2, 3)))
    loss, _ = total_loss(x, x_rec, lat.mu, lat.sigma, model.params,
                         channel_weights(model.graph.scatter(np.ones(model.graph.num_nodes)) > 0, cfg), cfg)
    assert np.isfinite(loss.item())


def test_wrong_window_rejected():
    g = tiny_geometry()
    model = GraphSTAD(ArchConfig(**TINY), g)
    with pytest.raises(ContractError):
        model.forward(Tensor(np.zeros((1, 4) + g.shape)))


def test_gnn_branch_permutation_invariant():
    rng = np.random.default_rng(8)
    groups = rng.integers(0, 3, 12)
    A = clique_adjacency(groups)
    h = rng.random((12, 1))
    ws = [Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((4, 3)))]
    bs = [Tensor(np.full(4, 0.1)), Tensor(np.full(3, 0.1))]
    gate = Tensor(rng.standard_normal(3))

    def branch(h, A, groups):
        adj = NormalizedAdjacency(A, groups=groups)
        x = Tensor(h)
        for w, b in zip(ws, bs):
            x = ops.relu(gcn_layer(x, adj, w, b))
        return global_attention_pool(x, gate).data

    p = rng.permutation(12)
    np.testing.assert_allclose(branch(h[p], A[np.ix_(p, p)], groups[p]), branch(h, A, groups), atol=1e-5)


def test_symmetric_pair_equal_node_outputs():
    adj = NormalizedAdjacency(np.array([[0, 1], [1, 0]]))
    w = Tensor(np.random.default_rng(9).standard_normal((2, 3)))
    out = gcn_layer(Tensor(np.tile([0.3, 0.7], (2, 1))), adj, w).data
    np.testing.assert_allclose(out[0], out[1])


def test_save_load_round_trip(tmp_path):
    g = GeometryConfig.toy()
    model = GraphSTAD(ArchConfig(**TINY), g, seed=3)
    model.save(tmp_path / "m", {"note": "x"})
    back = GraphSTAD.load(tmp_path / "m")
    x = Tensor(np.random.default_rng(0).random((1, 3) + g.shape))
    np.testing.assert_array_equal(back.forward(x)[0].data, model.forward(x)[0].data)


def test_arch_validation():
    with pytest.raises(ContractError):
        ArchConfig(lstm_sizes=(64, 16), latent=32)
    with pytest.raises(ValueError):
        ArchConfig.variant("transformer")
