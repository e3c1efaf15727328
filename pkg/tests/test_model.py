"""Network topology, shape contracts, backward wiring, describe(),
probes, and the checkpoint container."""

import numpy as np
import pytest

from seget.checkpoint import load_checkpoint, save_checkpoint
from seget.errors import DataFormatError
from seget.model import NetworkConfig, build, probe_center_branches
from seget.tensor import Tensor

TINY = NetworkConfig(base_filters=2, depth=1, dilation_rates=(1, 2), dtype="float64")
SMALL = NetworkConfig(base_filters=4, depth=2, dilation_rates=(1, 2))


def rand_input(cfg, n=1, hw=None, seed=0):
    hw = hw or 4 * cfg.downsample_factor
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((n, cfg.input_channels, hw, hw)).astype(cfg.np_dtype))


class TestBuild:
    def test_encoder_filter_ladder_doubles(self):
        net = build(NetworkConfig())  # full-size defaults
        assert [blk["c1"].spec.out_channels for blk in net.encoder] == [16, 32, 64, 128]

    def test_bottleneck_spatial_for_512_input(self):
        net = build(NetworkConfig())
        rows = net.describe(ref_hw=(512, 512)).rows
        center_in = next(r for r in rows if r.name == "center.c1")
        assert center_in.in_shape[2:] == (32, 32)

    def test_param_count_matches_independent_tally(self):
        """base 4, depth 2, rates (1, 2): closed-form channel arithmetic."""
        cfg = NetworkConfig(base_filters=4, depth=2, dilation_rates=(1, 2))
        net = build(cfg)

        def conv_bn(cin, cout, k=3):
            return k * k * cin * cout + 2 * cout  # kernel + gamma + beta (no bias)

        expected = 0
        # encoder block 0: 1->4, 4->4, 4->2 (skip), 2->4 stride 2
        expected += conv_bn(1, 4) + conv_bn(4, 4) + conv_bn(4, 2) + conv_bn(2, 4)
        # encoder block 1: 4->8, 8->8, 8->4 (skip), 4->8 stride 2
        expected += conv_bn(4, 8) + conv_bn(8, 8) + conv_bn(8, 4) + conv_bn(4, 8)
        # center: 8->16, 16->16, two branches 16->8, 1x1 reduce (2*8+8)->16
        expected += conv_bn(8, 16) + conv_bn(16, 16) + 2 * conv_bn(16, 8)
        expected += conv_bn(24, 16, k=1)
        # decoder block 0: up(16) + skip1(4) -> 8, 8->8
        expected += conv_bn(20, 8) + conv_bn(8, 8)
        # decoder block 1: up(8) + skip0(2) -> 4, 4->4
        expected += conv_bn(10, 4) + conv_bn(4, 4)
        # head (depth 2: no intermediate fusion convs): up(d0=8) + d1(4) -> 4, 4->4
        expected += conv_bn(12, 4) + conv_bn(4, 4)
        # logit 1x1 conv keeps its bias
        expected += 1 * 1 * 4 * 1 + 1

        total = sum(p.value.size for p in net.parameters.values())
        assert total == expected
        assert net.describe().total_params == expected

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(depth=0)
        with pytest.raises(ValueError):
            NetworkConfig(dilation_rates=())
        with pytest.raises(ValueError):
            NetworkConfig(dilation_rates=(0, 2))

    def test_center_concat_switch(self):
        """Default stacks branches plus the encoded input; the switch drops
        the input path and shrinks the 1x1 reduce conv accordingly."""
        with_input = build(NetworkConfig(base_filters=4, depth=2, dilation_rates=(1, 2)))
        without = build(NetworkConfig(base_filters=4, depth=2, dilation_rates=(1, 2),
                                      center_concat_input=False))
        f_top = 8
        assert with_input.center_reduce.spec.in_channels == 2 * f_top + f_top
        assert without.center_reduce.spec.in_channels == 2 * f_top
        cfg = without.config
        y = without.forward(rand_input(cfg), mode="infer")
        assert y.shape[2:] == (4 * cfg.downsample_factor,) * 2


class TestForward:
    def test_64x64_through_depth4(self):
        cfg = NetworkConfig(base_filters=4, depth=4)
        net = build(cfg)
        y = net.forward(rand_input(cfg, hw=64), mode="infer")
        assert y.shape == (1, 1, 64, 64)

    @pytest.mark.slow
    def test_full_size_config_512_batch2(self):
        cfg = NetworkConfig()
        net = build(cfg)
        x = Tensor(np.zeros((2, 1, 512, 512), dtype=np.float32))
        y = net.forward(x, mode="infer")
        assert y.shape == (2, 1, 512, 512)

    def test_48_is_divisible_by_16_and_accepted(self):
        cfg = NetworkConfig(base_filters=2, depth=4)
        net = build(cfg)
        y = net.forward(rand_input(cfg, hw=48), mode="infer")
        assert y.shape == (1, 1, 48, 48)

    def test_indivisible_extent_rejected_with_divisibility_diagnostic(self):
        cfg = NetworkConfig(base_filters=2, depth=4)
        net = build(cfg)
        with pytest.raises(ValueError, match="divisible by 2\\^depth = 16"):
            net.forward(rand_input(cfg, hw=40))

    def test_shape_round_trip_over_divisible_sizes(self):
        cfg = NetworkConfig(base_filters=2, depth=2)
        net = build(cfg)
        for hw in range(16, 129, 2 ** cfg.depth * 2):
            y = net.forward(rand_input(cfg, hw=hw), mode="infer")
            assert y.shape[2:] == (hw, hw)

    def test_infer_mode_is_deterministic_bitwise(self):
        cfg = SMALL
        net = build(cfg, seed=1)
        x = rand_input(cfg, seed=9)
        a = net.forward(x, mode="infer")
        b = net.forward(x, mode="infer")
        assert np.array_equal(a.data, b.data)

    def test_skip_paths_are_live(self):
        """Zeroing any one skip tap at inference must change the logits."""
        cfg = NetworkConfig(base_filters=4, depth=3)
        net = build(cfg, seed=2)
        x = rand_input(cfg, seed=3)
        base = net.forward(x, mode="infer")
        for i in range(cfg.depth):
            ablated = net.forward(x, mode="infer", ablate_skips=(i,))
            assert not np.allclose(base.data, ablated.data), f"skip_{i} appears dead"


class TestBackward:
    def test_zero_grad_logits_gives_zero_param_grads(self):
        net = build(TINY)
        x = rand_input(TINY)
        y = net.forward(x, mode="train")
        net.zero_grads()
        net.backward(Tensor(np.zeros_like(y.data)))
        for name, p in net.parameters.items():
            assert np.all(p.grad == 0), name

    def test_double_backward_doubles_grads_exactly(self):
        net = build(TINY, seed=4)
        x = rand_input(TINY, seed=5)
        y = net.forward(x, mode="train")
        g = Tensor(np.ones_like(y.data))
        net.zero_grads()
        net.backward(g)
        once = {n: p.grad.copy() for n, p in net.parameters.items()}
        net.backward(g)
        for n, p in net.parameters.items():
            np.testing.assert_array_equal(p.grad, 2 * once[n])

    def test_backward_without_forward_rejected(self):
        net = build(TINY)
        with pytest.raises(ValueError, match="forward"):
            net.backward(Tensor(np.zeros((1, 1, 8, 8))))

    def test_backward_shape_mismatch_rejected(self):
        net = build(TINY)
        net.forward(rand_input(TINY), mode="train")
        with pytest.raises(ValueError, match="does not match"):
            net.backward(Tensor(np.zeros((1, 1, 4, 4))))

    def test_everything_finite_after_forward_backward(self):
        cfg = NetworkConfig(base_filters=4, depth=3)
        net = build(cfg, seed=8)
        y = net.forward(rand_input(cfg, n=2, seed=9), mode="train")
        assert np.all(np.isfinite(y.data))
        net.zero_grads()
        net.backward(Tensor(np.ones_like(y.data)))
        for name, p in net.parameters.items():
            assert np.all(np.isfinite(p.grad)), name


class TestDescribe:
    def test_summary_counters_for_default_config(self):
        summary = build(NetworkConfig()).describe()
        assert summary.downsample_factor == 16
        assert summary.center_conv_count == 7
        assert summary.encoder_convs_per_block == 4
        assert summary.decoder_block_count == 4

    def test_totals_equal_registry(self):
        net = build(SMALL)
        summary = net.describe()
        assert summary.total_params == sum(p.value.size for p in net.parameters.values())
        assert sum(r.params for r in summary.rows) == summary.total_params

    def test_static_shapes_match_real_forward(self):
        cfg = NetworkConfig(base_filters=2, depth=3, dilation_rates=(1, 2, 4))
        net = build(cfg)
        hw = 4 * cfg.downsample_factor
        summary = net.describe(ref_hw=(hw, hw))
        y = net.forward(rand_input(cfg, hw=hw), mode="infer")
        assert tuple(summary.rows[-1].out_shape) == (1,) + y.shape[1:]

    def test_table_renders(self):
        text = build(TINY).describe().table()
        assert "total params" in text and "enc0.c1" in text


class TestProbes:
    def test_center_branch_receptive_fields(self):
        """Dilation rates 1, 2, 4, 8 respond over supports 3, 5, 9, 17."""
        net = build(NetworkConfig(base_filters=2, depth=1, dilation_rates=(1, 2, 4, 8)))
        probe = probe_center_branches(net, spatial=33)
        assert [(d, h, w) for d, h, w in probe] == [
            (1, 3, 3), (2, 5, 5), (4, 9, 9), (8, 17, 17),
        ]


class TestCheckpoint:
    def test_round_trip_preserves_inference(self, tmp_path):
        cfg = SMALL
        net = build(cfg, seed=6)
        x = rand_input(cfg, seed=7)
        net.forward(x, mode="train")  # populate running stats
        before = net.forward(x, mode="infer")
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, net, epoch=3, val_miou=0.5)
        loaded, meta = load_checkpoint(path)
        after = loaded.forward(x, mode="infer")
        np.testing.assert_array_equal(before.data, after.data)
        assert meta == {"epoch": 3, "val_miou": 0.5}

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataFormatError, match="magic"):
            load_checkpoint(path)

    def test_rejects_version_mismatch(self, tmp_path):
        net = build(TINY)
        path = tmp_path / "v.ckpt"
        save_checkpoint(path, net, 0, 0.0)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="version"):
            load_checkpoint(path)

    def test_rejects_name_set_mismatch(self, tmp_path):
        """A checkpoint whose config echo disagrees with its array names."""
        net = build(TINY)
        path = tmp_path / "names.ckpt"
        save_checkpoint(path, net, 0, 0.0)
        raw = path.read_bytes()
        # corrupt the config echo so the rebuilt net expects other arrays
        swapped = raw.replace(b'"depth": 1', b'"depth": 2')
        path.write_bytes(swapped)
        with pytest.raises(DataFormatError, match="registry"):
            load_checkpoint(path)

    def test_rejects_truncated_payload(self, tmp_path):
        net = build(TINY)
        path = tmp_path / "trunc.ckpt"
        save_checkpoint(path, net, 0, 0.0)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 64])
        with pytest.raises(DataFormatError, match="truncated"):
            load_checkpoint(path)
