import json
import struct
from dataclasses import replace

import numpy as np
import pytest

from src.core.autodiff import Tensor, check_gradients
from src.core.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    InvalidArgumentError,
)
from src.core.imgcore import EncodedImage
from src.core.loss import ExtractorConfig, LossWeights, build_extractor, combined_loss
from src.core.model import (
    ModelConfig,
    build_network,
    checkpoint_bytes,
    checkpoint_size,
    default_skip_pairs,
    layer_plan,
    load_checkpoint,
    make_identity_network,
    network_from_bytes,
    parameter_count,
    save_checkpoint,
)


def positive_batch(rng, n, h, w):
    return rng.uniform(0.0, 1.0, size=(n, 3, h, w))


class TestModelConfig:
    def test_default_parameter_count(self):
        assert parameter_count(ModelConfig()) == 2_263_875

    def test_default_skip_pairs(self):
        assert ModelConfig().skip_pairs == ((8, 5), (10, 3))
        assert default_skip_pairs(6, 6) == ((8, 5), (10, 3))
        assert default_skip_pairs(1, 1, 1) == ()

    def test_layer_plan_kernels(self):
        plan = layer_plan(ModelConfig(inner_kernel=3, outer_kernel=5))
        kernels = {p.name: p.kernel for p in plan}
        assert kernels["conv1"] == kernels["conv2"] == 5
        assert kernels["conv3"] == kernels["conv12"] == 3
        assert kernels["deconv10"] == 3
        assert kernels["deconv11"] == kernels["deconv12"] == 5
        assert (plan[0].in_channels, plan[-1].out_channels) == (3, 3)

    @pytest.mark.parametrize("pairs", [((1, 1),), ((8, 7),), ((8, 5), (8, 5))])
    def test_invalid_skip_pairs(self, pairs):
        with pytest.raises(ConfigError):
            ModelConfig(skip_pairs=pairs)

    @pytest.mark.parametrize("field,value", [("filters", 0), ("inner_kernel", 4), ("outer_kernel", -1),
                                             ("stage3_deconvs", 0)])
    def test_invalid_values(self, field, value):
        with pytest.raises(ConfigError):
            ModelConfig(**{field: value})

    def test_dict_round_trip(self, tiny_model_cfg):
        assert ModelConfig.from_dict(tiny_model_cfg.to_dict()) == tiny_model_cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"filters": 4, "dropout": 0.5})


class TestForward:
    @pytest.mark.parametrize("h,w", [(11, 9), (3, 3), (20, 7)])
    def test_preserves_spatial_dims(self, rng, tiny_model_cfg, h, w):
        net = build_network(tiny_model_cfg)
        out = net(positive_batch(rng, 2, h, w))
        assert out.shape == (2, 3, h, w)

    def test_odd_sizes_with_default_depths(self, rng):
        cfg = ModelConfig(filters=4, inner_kernel=3, outer_kernel=5)
        out = build_network(cfg)(positive_batch(rng, 1, 13, 9))
        assert out.shape == (1, 3, 13, 9)

    def test_deterministic_init(self, tiny_model_cfg):
        a = checkpoint_bytes(build_network(tiny_model_cfg))
        b = checkpoint_bytes(build_network(tiny_model_cfg))
        c = checkpoint_bytes(build_network(replace(tiny_model_cfg, seed=6)))
        assert a == b
        assert a != c

    def test_zero_network_outputs_last_bias(self, rng, tiny_model_cfg):
        net = build_network(tiny_model_cfg, initialize=False)
        net.deconvs[-1].bias.data[...] = [0.1, -0.2, 0.3]
        out = net(positive_batch(rng, 2, 5, 6))
        for c, b in enumerate([0.1, -0.2, 0.3]):
            assert np.all(out.data[:, c] == b)

    def test_junction_is_relu_of_difference(self, rng):
        cfg = ModelConfig(filters=4, inner_kernel=3, outer_kernel=3, stage1_convs=2, stage2_convs=3,
                          stage2_deconvs=3, stage3_deconvs=2, seed=1)
        net = build_network(cfg)
        _, taps = net.forward(positive_batch(rng, 1, 8, 8), capture_taps=True)
        expected = np.maximum(0.0, taps.conv6_out.data - taps.deconv6_out.data)
        np.testing.assert_array_equal(taps.junction_out.data, expected)
        assert np.all(taps.junction_out.data >= 0)

    def test_stage2_reads_only_stage1(self, rng, tiny_model_cfg):
        net = build_network(tiny_model_cfg)
        _, taps = net.forward(positive_batch(rng, 1, 7, 7), capture_taps=True)
        again = net.stage2(Tensor(taps.conv6_out.data.copy()))
        np.testing.assert_array_equal(again.data, taps.deconv6_out.data)

    def test_skip_connections_change_stage2(self, rng):
        with_skip = ModelConfig(filters=4, inner_kernel=3, outer_kernel=3, stage1_convs=1, stage2_convs=3,
                                stage2_deconvs=3, stage3_deconvs=1, seed=2)
        assert with_skip.skip_pairs == ((3, 2),)
        without = replace(with_skip, skip_pairs=())
        x = positive_batch(rng, 1, 8, 8)
        _, taps_a = build_network(with_skip).forward(x, capture_taps=True)
        _, taps_b = build_network(without).forward(x, capture_taps=True)
        np.testing.assert_array_equal(taps_a.conv6_out.data, taps_b.conv6_out.data)
        assert not np.array_equal(taps_a.deconv6_out.data, taps_b.deconv6_out.data)

    def test_layer_capture(self, rng, tiny_model_cfg):
        net = build_network(tiny_model_cfg)
        _, taps = net.forward(positive_batch(rng, 1, 5, 5), capture_layers=True)
        assert list(taps.layers) == ["conv1", "conv2", "deconv1", "deconv2"]

    def test_undersized_input(self, rng):
        net = build_network(ModelConfig(filters=4, inner_kernel=3, outer_kernel=5,
                                        stage1_convs=1, stage2_convs=1, stage2_deconvs=1, stage3_deconvs=1))
        with pytest.raises(InvalidArgumentError):
            net(positive_batch(rng, 1, 4, 9))

    def test_wrong_channel_count(self, tiny_model_cfg):
        with pytest.raises(InvalidArgumentError):
            build_network(tiny_model_cfg)(np.zeros((1, 4, 5, 5)))

    def test_identity_network(self, rng):
        cfg = ModelConfig(filters=4, inner_kernel=3, outer_kernel=3, stage1_convs=2, stage2_convs=3,
                          stage2_deconvs=3, stage3_deconvs=2)
        img = EncodedImage(rng.uniform(0, 1, size=(9, 11, 3)))
        out = make_identity_network(cfg).run_image(img)
        np.testing.assert_array_equal(out.data, img.data)

    def test_run_image_clamps(self, rng, tiny_model_cfg):
        net = build_network(tiny_model_cfg, initialize=False)
        net.deconvs[-1].bias.data[...] = [2.0, -1.0, 0.5]
        out = net.run_image(EncodedImage(rng.uniform(0, 1, size=(5, 5, 3))))
        np.testing.assert_array_equal(out.data[..., 0], 1.0)
        np.testing.assert_array_equal(out.data[..., 1], 0.0)

    @pytest.mark.slow
    def test_full_size_forward(self, rng):
        out = build_network(ModelConfig())(positive_batch(rng, 1, 128, 128))
        assert out.shape == (1, 3, 128, 128)
        assert np.all(np.isfinite(out.data))


class TestGradients:
    @pytest.fixture
    def active_network(self):
        """Non-negative weights, positive biases and a weak stage 2: every ReLU sits well inside its linear part."""
        cfg = ModelConfig(filters=2, inner_kernel=3, outer_kernel=3, stage1_convs=1, stage2_convs=3,
                          stage2_deconvs=2, stage3_deconvs=2, seed=7)
        net = build_network(cfg)
        stage2 = net.convs[cfg.stage1_convs:] + net.deconvs[:cfg.stage2_deconvs]
        for layer in net.layers:
            layer.weight.data[...] = np.abs(layer.weight.data)
            layer.bias.data[...] = 0.1
        for layer in stage2:
            layer.weight.data *= 0.05
            layer.bias.data[...] = 0.01
        return net

    def test_combined_loss_through_junction_and_skip(self, rng, active_network):
        net = active_network
        assert net.cfg.skip_pairs == ((3, 1),)
        fx = build_extractor(ExtractorConfig(channels=(4,), seed=2))
        fx.stages[0].weight.data[...] = np.abs(fx.stages[0].weight.data)
        x = positive_batch(rng, 1, 6, 6) * 0.6 + 0.2
        target = positive_batch(rng, 1, 6, 6)

        _, taps = net.forward(x, capture_taps=True)
        assert np.all(taps.junction_out.data > 0)

        report = check_gradients(lambda: combined_loss(net(x), target, fx, LossWeights(1.0)),
                                 net.parameters, max_checks=6, seed=4)
        assert report.passed, report.failures
        assert len(report.entries) == 2 * len(net.layers)
        # the skip source and the junction's reflection side both receive gradient
        assert np.any(net.convs[2].weight.grad != 0)
        assert np.any(net.deconvs[1].weight.grad != 0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng, tiny_model_cfg):
        net = build_network(tiny_model_cfg)
        path = save_checkpoint(net, tmp_path / "m.ckpt")
        back = load_checkpoint(path)
        assert back.cfg == net.cfg
        assert checkpoint_bytes(back) == path.read_bytes()
        x = positive_batch(rng, 1, 6, 6)
        np.testing.assert_array_equal(back(x).data, net(x).data)

    def test_size(self, tiny_model_cfg):
        assert len(checkpoint_bytes(build_network(tiny_model_cfg))) == checkpoint_size(tiny_model_cfg)

    def test_bad_magic(self, tiny_model_cfg):
        blob = checkpoint_bytes(build_network(tiny_model_cfg))
        with pytest.raises(CheckpointVersionError):
            network_from_bytes(b"XXXXXXXX" + blob[8:])
        with pytest.raises(CheckpointVersionError):
            network_from_bytes(b"")

    def test_unsupported_version(self, tiny_model_cfg):
        blob = bytearray(checkpoint_bytes(build_network(tiny_model_cfg)))
        blob[8:12] = struct.pack("<I", 2)
        with pytest.raises(CheckpointVersionError):
            network_from_bytes(bytes(blob))

    @pytest.mark.parametrize("keep", [10, 21, -8])
    def test_truncated(self, tiny_model_cfg, keep):
        blob = checkpoint_bytes(build_network(tiny_model_cfg))
        with pytest.raises(CheckpointTruncatedError):
            network_from_bytes(blob[:keep])

    def test_trailing_bytes(self, tiny_model_cfg):
        blob = checkpoint_bytes(build_network(tiny_model_cfg))
        with pytest.raises(CheckpointShapeError):
            network_from_bytes(blob + b"\0" * 8)

    def test_unreadable_header(self):
        header = b"{not json"
        blob = struct.pack("<8sII", b"RRNETCKP", 1, len(header)) + header
        with pytest.raises(CheckpointError):
            network_from_bytes(blob)

    def test_invalid_architecture(self, tiny_model_cfg):
        cfg = tiny_model_cfg.to_dict()
        cfg["filters"] = 0
        header = json.dumps(cfg).encode("utf-8")
        blob = struct.pack("<8sII", b"RRNETCKP", 1, len(header)) + header
        with pytest.raises(CheckpointShapeError):
            network_from_bytes(blob)
