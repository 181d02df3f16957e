import numpy as np
import numpy.testing as npt
import pytest

from pointconv import conv as C
from pointconv import network as N
from pointconv import pointops as P
from pointconv import tensor as T
from pointconv.tensor import Tensor
from tests.test_pointconv import force_constant_weightnet


def tiny_classify_config(**overrides):
    base = dict(
        task="classify",
        input_dim=3,
        input_channels=2,
        num_classes=3,
        encoders=[
            N.EncodingSpec(n_out=16, k=4, c_mid=4, c_out=8, mlp_channels=(6,)),
            N.EncodingSpec(n_out=4, k=4, c_mid=4, c_out=12),
        ],
        head_widths=(8,),
        head_dropout=0.0,
        seed=3,
    )
    base.update(overrides)
    return N.NetworkConfig(**base).validate()


def tiny_segment_config(**overrides):
    base = dict(
        task="segment",
        input_dim=3,
        input_channels=2,
        num_classes=2,
        encoders=[
            N.EncodingSpec(n_out=16, k=4, c_mid=4, c_out=8, mlp_channels=(6,)),
            N.EncodingSpec(n_out=4, k=4, c_mid=4, c_out=12),
        ],
        propagators=[
            N.PropagationSpec(skip_level=1, k=4, c_mid=4, c_out=12),
            N.PropagationSpec(skip_level=0, k=4, c_mid=4, c_out=8),
        ],
        head_widths=(8,),
        head_dropout=0.0,
        seed=4,
    )
    base.update(overrides)
    return N.NetworkConfig(**base).validate()


def random_cloud(rng, n=32, channels=2):
    pos = rng.uniform(-1, 1, (n, 3))
    pos /= max(np.linalg.norm(pos, axis=1).max(), 1.0)
    return P.PointCloud(pos, features=rng.normal(size=(n, channels)).astype(np.float32))


class TestConfig:
    def test_roundtrip_through_dict(self):
        cfg = tiny_segment_config()
        again = N.NetworkConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_rejects_single_class(self):
        with pytest.raises(N.ConfigError, match="classes"):
            tiny_classify_config(num_classes=1)

    def test_rejects_non_mirrored_propagators(self):
        with pytest.raises(N.ConfigError, match="mirror"):
            tiny_segment_config(propagators=[
                N.PropagationSpec(skip_level=0, k=4, c_mid=4, c_out=8),
                N.PropagationSpec(skip_level=1, k=4, c_mid=4, c_out=8),
            ])

    def test_rejects_bad_task(self):
        with pytest.raises(N.ConfigError, match="task"):
            tiny_classify_config(task="detect")


class TestEncoderLevel:
    def test_k1_collapses_to_per_point_linear_map(self):
        cfg = tiny_classify_config(density_mode="disabled", post_activation=False)
        spec = N.EncodingSpec(n_out=10, k=1, c_mid=2, c_out=3, mlp_channels=())
        level = N.EncoderLevel(spec, 2, cfg, np.random.default_rng(0))
        force_constant_weightnet(level.conv, [0.5, 2.0], 0.0)
        level.conv.weight_net.final_w.data[:] = np.arange(12, dtype=np.float64).reshape(2, 6) * 0.1
        cloud = random_cloud(np.random.default_rng(1), n=10)
        feats = Tensor(cloud.features)
        _, out, _ = level.forward_single(cloud, feats)

        m = np.array([0.5, 2.0])
        w_eff = (m @ level.conv.weight_net.final_w.data).reshape(2, 3)
        cents = P.farthest_point_sample(cloud, 10)
        want = cloud.features[cents].astype(np.float64) @ w_eff
        npt.assert_allclose(out.data, want, rtol=1e-5)

    def test_output_positions_subset_of_input(self):
        cfg = tiny_classify_config()
        net = N.PointConvNet(cfg)
        cloud = random_cloud(np.random.default_rng(2))
        feats, _ = net._initial_features([cloud])
        sub, out, _ = net.encoders[0].forward_single(cloud, feats)
        assert sub.n == 16 and out.shape == (16, 8)
        in_rows = {tuple(p) for p in cloud.positions}
        assert all(tuple(p) in in_rows for p in sub.positions)

    def test_matches_naive_rerun_with_same_indices(self):
        cfg = tiny_classify_config()
        net = N.PointConvNet(cfg)
        level = net.encoders[0]
        cloud = random_cloud(np.random.default_rng(3))
        feats, _ = net._initial_features([cloud])
        _, out, skip = level.forward_single(cloud, feats)

        _, neigh = level.geometry(cloud, train=False, rng=None)  # cached, same indices
        grouped = T.gather(skip, neigh.neighbor_indices)
        ref = C.pointconv_naive(level.conv, neigh.local_coords, grouped, neigh.grouped_inverse_density)
        ref = T.relu(T.batch_norm(ref, level.post_bn, train=False))
        assert T.max_rel_diff(out.data, ref.data) < 1e-5

    def test_n_out_exceeding_points_rejected(self):
        cfg = tiny_classify_config()
        net = N.PointConvNet(cfg)
        cloud = random_cloud(np.random.default_rng(4), n=8)
        feats, _ = net._initial_features([cloud])
        with pytest.raises(N.ConfigError, match="n_out"):
            net.encoders[0].forward_single(cloud, feats)


class TestPropagationLevel:
    def test_identity_interpolation_when_resolutions_match(self):
        cfg = tiny_segment_config(density_mode="disabled", post_activation=False)
        rng = np.random.default_rng(5)
        prop = N.PropagationLevel(N.PropagationSpec(skip_level=0, k=2, c_mid=2, c_out=3), 2, 2, cfg, rng)
        cloud = random_cloud(rng, n=12)
        coarse_f = Tensor(rng.normal(size=(12, 2)).astype(np.float32))
        skip_f = Tensor(rng.normal(size=(12, 2)).astype(np.float32))

        idx, w, _ = prop.geometry(cloud, cloud, train=False)
        npt.assert_array_equal(idx[:, 0], np.arange(12))
        interp = np.einsum("mk,mkc->mc", w, coarse_f.data[idx].astype(np.float64))
        npt.assert_allclose(interp, coarse_f.data, atol=1e-6)

        out = prop.forward_single(cloud, coarse_f, cloud, skip_f)
        cat = Tensor(np.concatenate([coarse_f.data, skip_f.data], axis=1))
        neigh = P.knn_group(cloud, np.arange(12), 2)
        want = C.pointconv_efficient(prop.conv, neigh.local_coords, T.gather(cat, neigh.neighbor_indices))
        assert T.max_rel_diff(out.data, want.data) < 1e-5

    def test_constant_coarse_features_interpolate_constant(self):
        cfg = tiny_segment_config(density_mode="disabled")
        rng = np.random.default_rng(6)
        prop = N.PropagationLevel(N.PropagationSpec(skip_level=0, k=2, c_mid=2, c_out=3), 1, 2, cfg, rng)
        fine = random_cloud(rng, n=20)
        coarse = random_cloud(rng, n=5)
        idx, w, _ = prop.geometry(fine, coarse, train=False)
        const = np.full((5, 1), 3.25)
        interp = np.einsum("mk,mkc->mc", w, const[idx])
        npt.assert_allclose(interp, 3.25, rtol=1e-6)

    def test_composed_oracle_on_16_points(self):
        cfg = tiny_segment_config()
        rng = np.random.default_rng(7)
        prop = N.PropagationLevel(N.PropagationSpec(skip_level=0, k=3, c_mid=2, c_out=4), 2, 2, cfg, rng)
        fine = random_cloud(rng, n=16)
        coarse = random_cloud(rng, n=6)
        coarse_f = Tensor(rng.normal(size=(6, 2)).astype(np.float32))
        skip_f = Tensor(rng.normal(size=(16, 2)).astype(np.float32))
        out = prop.forward_single(coarse, coarse_f, fine, skip_f)

        interp = P.three_nn_interpolate(fine.positions, coarse.positions, coarse_f.data)
        cat = np.concatenate([interp, skip_f.data], axis=1)
        P.kde_density(fine, cfg.kde_bandwidth)
        neigh = P.knn_group(fine, np.arange(16), 3)
        ref = C.pointconv_naive(prop.conv, neigh.local_coords, cat[neigh.neighbor_indices],
                                neigh.grouped_inverse_density)
        ref = T.relu(T.batch_norm(ref, prop.post_bn, train=False))
        assert T.max_rel_diff(out.data, ref.data) < 1e-5


class TestForward:
    def test_classify_logit_shape(self):
        net = N.PointConvNet(tiny_classify_config())
        clouds = [random_cloud(np.random.default_rng(i)) for i in range(3)]
        logits = net.forward_batch(clouds)
        assert logits.shape == (3, 3)

    def test_segment_output_rows_equal_input_points(self):
        net = N.PointConvNet(tiny_segment_config())
        cloud = random_cloud(np.random.default_rng(8), n=40)
        logits = net.forward(cloud)
        assert logits.shape == (40, 2)

    def test_eval_forward_is_deterministic(self):
        net = N.PointConvNet(tiny_classify_config())
        cloud = random_cloud(np.random.default_rng(9))
        a = net.forward(cloud).data
        b = net.forward(cloud).data
        npt.assert_array_equal(a, b)

    def test_channel_mismatch_rejected(self):
        net = N.PointConvNet(tiny_classify_config())
        cloud = random_cloud(np.random.default_rng(10), channels=5)
        with pytest.raises(N.ConfigError, match="channels"):
            net.forward(cloud)

    def test_translation_invariance_of_logits(self):
        net = N.PointConvNet(tiny_classify_config())
        rng = np.random.default_rng(11)
        for _ in range(5):
            pos = rng.uniform(-1, 1, (32, 3))
            feats = rng.normal(size=(32, 2)).astype(np.float32)
            base = net.forward(P.PointCloud(pos, features=feats)).data
            shifted = net.forward(P.PointCloud(pos + np.array([4.0, -7.5, 2.25]), features=feats)).data
            assert np.abs(base - shifted).max() < 1e-4

    def test_not_density_blind(self):
        # duplicating a cluster changes neighborhoods, hence outputs, even
        # with the density path disabled
        net = N.PointConvNet(tiny_classify_config(density_mode="disabled"))
        rng = np.random.default_rng(12)
        pos = rng.uniform(-1, 1, (32, 3))
        feats = rng.normal(size=(32, 2)).astype(np.float32)
        dense_pos = np.concatenate([pos, pos[:8] + 1e-3], axis=0)
        dense_feats = np.concatenate([feats, feats[:8]], axis=0)
        a = net.forward(P.PointCloud(pos, features=feats)).data
        b = net.forward(P.PointCloud(dense_pos, features=dense_feats)).data
        assert np.abs(a - b).max() > 1e-6


class TestParameterCount:
    @pytest.mark.parametrize("make", [tiny_classify_config, tiny_segment_config])
    def test_closed_form_matches_actual(self, make):
        cfg = make()
        net = N.PointConvNet(cfg)
        assert net.parameter_count() == N.parameter_count(cfg)

    def test_density_mode_changes_count(self):
        with_density = N.parameter_count(tiny_classify_config())
        without = N.parameter_count(tiny_classify_config(density_mode="disabled"))
        assert with_density - without == 177 * 2  # one DensityNet per conv layer


class TestCheckpoint:
    def test_save_load_save_identical_bytes(self, tmp_path):
        net = N.PointConvNet(tiny_segment_config())
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        N.save_params(net, p1)
        N.save_params(N.load_params(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_identical_after_roundtrip(self, tmp_path):
        net = N.PointConvNet(tiny_classify_config())
        cloud = random_cloud(np.random.default_rng(13))
        want = net.forward(cloud).data
        path = tmp_path / "net.ckpt"
        N.save_params(net, path)
        got = N.load_params(path).forward(cloud).data
        npt.assert_array_equal(want, got)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(N.CheckpointError, match="magic"):
            N.load_params(path)

    def test_truncated_file_rejected(self, tmp_path):
        net = N.PointConvNet(tiny_classify_config())
        path = tmp_path / "net.ckpt"
        N.save_params(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(N.CheckpointError, match="expected"):
            N.load_params(path)

    def test_mismatched_class_count_rejected(self, tmp_path):
        import json
        import struct

        net = N.PointConvNet(tiny_classify_config())
        path = tmp_path / "net.ckpt"
        N.save_params(net, path)
        blob = path.read_bytes()
        (jlen,) = struct.unpack("<I", blob[8:12])
        meta = json.loads(blob[12:12 + jlen])
        meta["config"]["num_classes"] = 7
        new_json = json.dumps(meta, sort_keys=True).encode()
        patched = blob[:8] + struct.pack("<I", len(new_json)) + new_json + blob[12 + jlen:]
        path.write_bytes(patched)
        with pytest.raises(N.CheckpointError, match="shape"):
            N.load_params(path)
