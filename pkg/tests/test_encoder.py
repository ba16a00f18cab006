"""Encoder tests: positional encoding, EdgeConv, blocks, full encode."""

import numpy as np
import pytest

import sdfenc.diffcore as dc
from sdfenc.diffcore import ParamStore, Value, reduce_sum
from sdfenc.encoder import (
    EncoderConfig,
    GridVector,
    conv_block,
    edge_conv,
    encode,
    encoder_param_count,
    init_encoder_params,
    paper_large,
    positional_encode,
    query_latent,
)
from sdfenc.decoder import DecoderConfig, decoder_param_count, init_decoder_params
from sdfenc.geometry import GeometryError, PointCloud, build_knn_graph
from sdfenc.transfer import GridSpec, trilinear_sample
from gradcheck import check_param_grads

rng = np.random.default_rng(11)


def small_cfg(**kw) -> EncoderConfig:
    base = dict(resolutions=(4, 8), features=8, knn=4, pe_frequencies=2)
    base.update(kw)
    return EncoderConfig(**base)


def unit_cloud(n: int, seed=0, normals=False) -> PointCloud:
    r = np.random.default_rng(seed)
    pos = r.uniform(-0.9, 0.9, size=(n, 3))
    nrm = None
    if normals:
        nrm = r.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    return PointCloud(pos, nrm)


class TestConfig:
    def test_resolutions_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            EncoderConfig(resolutions=(8, 4))

    def test_odd_resolution_rejected_with_grid_conv(self):
        with pytest.raises(ValueError, match="even"):
            EncoderConfig(resolutions=(3, 6))

    def test_odd_resolution_fine_without_grid_conv(self):
        EncoderConfig(resolutions=(3, 5), grid_conv=False)

    def test_paper_large_preset(self):
        cfg = paper_large()
        assert cfg.resolutions == (4, 8, 16, 32, 64)
        assert cfg.features == 64


class TestPositionalEncode:
    def test_zero_position(self):
        out = positional_encode(np.zeros((1, 3)), 3)
        assert out.shape == (1, 3 + 18)
        np.testing.assert_array_equal(out[0, :3], 0)
        for l in range(3):
            np.testing.assert_array_equal(out[0, 3 + 6 * l: 6 + 6 * l], 0)  # sin
            np.testing.assert_array_equal(out[0, 6 + 6 * l: 9 + 6 * l], 1)  # cos

    def test_l_zero_is_identity(self):
        p = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(positional_encode(p, 0), p)

    def test_first_frequency_x_slot(self):
        out = positional_encode(np.array([[1.0, 0.0, 0.0]]), 1)
        assert abs(out[0, 3] - np.sin(np.pi)) < 1e-15
        assert out[0, 4] == 0 and out[0, 5] == 0


class TestEdgeConv:
    def make(self, n=10, f=6, k=3, seed=0):
        r = np.random.default_rng(seed)
        cloud = unit_cloud(n, seed)
        graph = build_knn_graph(cloud.positions, k)
        w = r.normal(size=(2 * f, f))
        b = r.normal(size=f)
        return cloud, graph, w, b

    def test_constant_features_give_constant_output(self):
        cloud, graph, w, b = self.make()
        c = rng.normal(size=6)
        feats = Value(np.tile(c, (10, 1)))
        out = edge_conv(feats, graph, Value(w), Value(b))
        expect = np.maximum(np.concatenate([c, np.zeros(6)]) @ w + b, 0)
        np.testing.assert_allclose(out.data, np.tile(expect, (10, 1)), atol=1e-12)

    def test_zero_weight_gives_relu_bias(self):
        cloud, graph, _, b = self.make()
        feats = Value(rng.normal(size=(10, 6)))
        out = edge_conv(feats, graph, Value(np.zeros((12, 6))), Value(b))
        np.testing.assert_array_equal(out.data, np.tile(np.maximum(b, 0), (10, 1)))

    def test_matches_per_edge_loop(self):
        cloud, graph, w, b = self.make()
        feats = rng.normal(size=(10, 6))
        out = edge_conv(Value(feats), graph, Value(w), Value(b)).data
        for i in range(10):
            msgs = []
            for j in graph.neighbors[i]:
                e = np.concatenate([feats[i], feats[j] - feats[i]])
                msgs.append(np.maximum(e @ w + b, 0))
            np.testing.assert_allclose(out[i], np.max(msgs, axis=0), atol=1e-12)

    def test_vertex_count_mismatch(self):
        cloud, graph, w, b = self.make()
        with pytest.raises(ValueError, match="vertices"):
            edge_conv(Value(np.zeros((5, 6))), graph, Value(w), Value(b))


class TestConvBlock:
    def setup_block(self, cfg, n=20, seed=1):
        cloud = unit_cloud(n, seed)
        graph = build_knn_graph(cloud.positions, cfg.knn)
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(seed))
        return cloud, graph, store

    @pytest.mark.parametrize("transfer", ["pic", "maxpool"])
    @pytest.mark.parametrize("graph_conv", [True, False])
    @pytest.mark.parametrize("grid_conv", [True, False])
    def test_shape_contract(self, transfer, graph_conv, grid_conv):
        cfg = small_cfg(transfer=transfer, graph_conv=graph_conv, grid_conv=grid_conv)
        cloud, graph, store = self.setup_block(cfg)
        feats = Value(rng.normal(size=(20, cfg.features)))
        spec = GridSpec(4, cfg.features)
        out, grid = conv_block(feats, cloud.positions, graph, spec, store, "encoder.block0", cfg)
        assert out.shape == (20, cfg.features)
        assert grid.values.shape == (64, cfg.features)
        assert np.all(np.isfinite(out.data))

    def test_zero_conv_weights_zero_grid(self):
        # single point at a cell center, pic mode, zeroed grid convs:
        # grid contribution vanishes and the output is ReLU(FC(g))
        cfg = small_cfg(resolutions=(4,), knn=1)
        spec = GridSpec(4, cfg.features)
        centers = spec.cell_centers()
        pos = np.stack([centers[21], centers[42]])
        graph = build_knn_graph(pos, 1)
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(3))
        for name in ("conv.weight", "conv.bias", "deconv.weight", "deconv.bias"):
            store[f"encoder.block0.{name}"].data[:] = 0
        feats = Value(rng.normal(size=(2, cfg.features)))
        out, grid = conv_block(feats, pos, graph, spec, store, "encoder.block0", cfg)
        np.testing.assert_array_equal(grid.values.data, 0)
        g = edge_conv(feats, graph, store["encoder.block0.edge.weight"],
                      store["encoder.block0.edge.bias"])
        expect = dc.relu(dc.linear(g, store["encoder.block0.fc.weight"],
                                   store["encoder.block0.fc.bias"]))
        np.testing.assert_array_equal(out.data, expect.data)

    def test_disabled_convs_reduce_to_fc_of_sum(self):
        cfg = small_cfg(graph_conv=False, grid_conv=False, transfer="pic")
        cloud, graph, store = self.setup_block(cfg, seed=4)
        feats = Value(rng.normal(size=(20, cfg.features)))
        spec = GridSpec(4, cfg.features)
        out, grid = conv_block(feats, cloud.positions, graph, spec, store, "encoder.block0", cfg)
        from sdfenc.transfer import pic_project
        ref_grid = pic_project(cloud.positions, feats, spec)
        v = trilinear_sample(ref_grid, cloud.positions)
        ref = dc.relu(dc.linear(dc.add(feats, v), store["encoder.block0.fc.weight"],
                                store["encoder.block0.fc.bias"]))
        np.testing.assert_array_equal(out.data, ref.data)
        np.testing.assert_array_equal(grid.values.data, ref_grid.values.data)

    def test_golden_regression(self):
        # frozen from a verified run; guards accidental reordering of the block
        cfg = small_cfg(resolutions=(4,), features=4, knn=2, pe_frequencies=0)
        cloud = unit_cloud(6, seed=123)
        graph = build_knn_graph(cloud.positions, 2)
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(99))
        feats = Value(positional_encode(cloud.positions, 0) @ np.eye(3, 4))
        out, grid = conv_block(feats, cloud.positions, graph, GridSpec(4, 4), store,
                               "encoder.block0", cfg)
        golden_out0 = [0.5995101133152257, 0.23099264867371727, 0.5741996550408278, 0.0]
        golden_grid_sum = 45.28839403444303
        np.testing.assert_allclose(out.data[0], golden_out0, atol=1e-12)
        assert abs(float(grid.values.data.sum()) - golden_grid_sum) < 1e-10


class TestEncode:
    def test_level_shapes(self):
        cfg = EncoderConfig(resolutions=(4, 8, 16), features=16, knn=4)
        cloud = unit_cloud(30, seed=5)
        model_store = ParamStore()
        init_encoder_params(cfg, model_store, np.random.default_rng(0))
        gv = encode(cloud, model_store, cfg)
        assert [g.spec.resolution for g in gv.grids] == [4, 8, 16]
        assert all(g.values.shape == (g.spec.resolution ** 3, 16) for g in gv.grids)

    def test_permutation_invariance(self):
        cfg = small_cfg()
        cloud = unit_cloud(60, seed=6)
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(1))
        gv = encode(cloud, store, cfg)
        perm = np.random.default_rng(2).permutation(60)
        gv_p = encode(PointCloud(cloud.positions[perm]), store, cfg)
        for a, b in zip(gv.grids, gv_p.grids):
            assert np.max(np.abs(a.values.data - b.values.data)) <= 1e-12

    def test_normals_required_when_configured(self):
        cfg = small_cfg(use_normals=True)
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(0))
        with pytest.raises(GeometryError, match="normals"):
            encode(unit_cloud(10), store, cfg)

    def test_normals_accepted(self):
        cfg = small_cfg(use_normals=True)
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(0))
        gv = encode(unit_cloud(10, normals=True), store, cfg)
        assert len(gv.grids) == 2

    def test_unnormalized_cloud_rejected(self):
        cfg = small_cfg()
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(0))
        with pytest.raises(GeometryError, match="domain"):
            encode(PointCloud(np.array([[0.0, 0, 3.0]])), store, cfg)

    def test_default_param_count_in_paper_range(self):
        cfg = EncoderConfig(resolutions=(4, 8, 16, 32), features=16, knn=8, pe_frequencies=4)
        dec = DecoderConfig()
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(0))
        init_decoder_params(dec, cfg.features, store, np.random.default_rng(1))
        assert 20_000 <= store.total_count <= 60_000
        assert store.total_count == encoder_param_count(cfg) + decoder_param_count(dec, 16)


class TestQueryLatent:
    def make_gv(self, cfg, seed=7):
        cloud = unit_cloud(25, seed)
        store = ParamStore()
        init_encoder_params(cfg, store, np.random.default_rng(seed))
        return encode(cloud, store, cfg)

    def test_zero_grids_zero_latents(self):
        from sdfenc.transfer import LatentGrid
        specs = [GridSpec(4, 8), GridSpec(8, 8)]
        gv = GridVector([LatentGrid(s, Value(np.zeros((s.num_cells, 8)))) for s in specs])
        out = query_latent(gv, rng.uniform(-1, 1, size=(10, 3)))
        np.testing.assert_array_equal(out.data, 0)

    def test_single_level_equals_its_sample(self):
        cfg = small_cfg()
        gv = self.make_gv(cfg)
        q = rng.uniform(-0.7, 0.7, size=(12, 3))
        single = GridVector([gv.grids[1]])
        np.testing.assert_array_equal(query_latent(single, q).data,
                                      trilinear_sample(gv.grids[1], q).data)

    def test_sum_of_levels(self):
        cfg = small_cfg()
        gv = self.make_gv(cfg)
        q = rng.uniform(-0.7, 0.7, size=(12, 3))
        out = query_latent(gv, q).data
        manual = sum(trilinear_sample(g, q).data for g in gv.grids)
        np.testing.assert_allclose(out, manual, atol=1e-14)

    def test_piecewise_trilinear_second_differences_vanish(self):
        cfg = small_cfg()
        gv = self.make_gv(cfg)
        # pick a point strictly inside a fine-level cell, step far from faces
        q0 = np.array([[0.31, -0.22, 0.14]])
        h = 1e-4
        for axis in range(3):
            qp, qm = q0.copy(), q0.copy()
            qp[0, axis] += h
            qm[0, axis] -= h
            vals = [query_latent(gv, q).data[0] for q in (qm, q0, qp)]
            second = vals[0] - 2 * vals[1] + vals[2]
            assert np.max(np.abs(second)) <= 1e-10

    def test_query_position_gradient_matches_fd(self):
        cfg = small_cfg()
        gv = self.make_gv(cfg)
        q0 = np.array([[0.31, -0.22, 0.14], [0.52, 0.41, -0.33]])
        c = rng.normal(size=(2, cfg.features))

        def f_np(q):
            return float(np.sum(query_latent(gv, q).data * c))

        store = ParamStore()
        q = store.add("q", q0)

        def loss_fn():
            return reduce_sum(dc.mul(query_latent(gv, q), Value(c)))

        check_param_grads(store, loss_fn)

    def test_finite_outputs_all_ablations(self):
        for graph_conv in (True, False):
            for grid_conv in (True, False):
                cfg = small_cfg(graph_conv=graph_conv, grid_conv=grid_conv)
                gv = self.make_gv(cfg, seed=8)
                out = query_latent(gv, rng.uniform(-1, 1, size=(20, 3)))
                assert np.all(np.isfinite(out.data))
