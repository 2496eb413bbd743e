"""Reconstruction network: structure, equivalences, and the float reference."""

import numpy as np
import pytest

import reference_impl as ref
from qsci.autodiff import Tensor
from qsci.errors import ConfigError, ShapeError
from qsci.network import (CFormerBlock, QNet, QNetConfig, ShiftedAttention, make_variant,
                          parse_fingerprint)
from qsci.sci import encode, generate_masks, initial_estimate, synth_video

TINY = dict(base_channels=8, resdnet_blocks=1, cformer_per_block=1, heads=2, cr=2)


def tiny_cfg(**kw):
    merged = {**TINY, **kw}
    return QNetConfig(**merged)


def tiny_inputs(t=2, hw=8, seed=0):
    masks = generate_masks(seed, t, hw, hw)
    clip = synth_video(seed + 1, t, hw, hw)
    meas = encode(clip, masks)
    return masks, clip, meas


class TestConfig:
    def test_heads_divide_channels(self):
        with pytest.raises(ConfigError, match="divisible"):
            QNetConfig(base_channels=6, heads=4)

    def test_shortcut_bits_floor(self):
        with pytest.raises(ConfigError, match="shortcut_bits"):
            QNetConfig(body_bits=8, shortcut_bits=4)

    def test_fingerprint_round_trip(self):
        cfg = tiny_cfg(body_bits=4, shortcut_bits=8, use_fem_shortcuts=True,
                       use_qk_shift=True, fem_bits=8)
        assert parse_fingerprint(cfg.fingerprint()) == cfg

    def test_quantized_flag(self):
        assert not tiny_cfg(body_bits=32, shortcut_bits=32).quantized
        assert tiny_cfg(body_bits=8, shortcut_bits=8).quantized
        assert tiny_cfg(body_bits=32, fem_bits=4).quantized


class TestVariants:
    def test_q8_flags(self):
        cfg = make_variant("q8")
        assert cfg.body_bits == 8
        assert not cfg.use_fem_shortcuts and not cfg.use_vrm_shortcuts
        assert cfg.use_qk_shift

    @pytest.mark.parametrize("name,bits", [("q4", 4), ("q3", 3), ("q2", 2)])
    def test_low_bit_variants(self, name, bits):
        cfg = make_variant(name)
        assert cfg.body_bits == bits
        assert cfg.shortcut_bits == 8
        assert cfg.use_fem_shortcuts and cfg.use_vrm_shortcuts and cfg.use_qk_shift

    def test_fp32(self):
        cfg = make_variant("fp32")
        assert cfg.body_bits == 32
        assert not (cfg.use_fem_shortcuts or cfg.use_vrm_shortcuts or cfg.use_qk_shift)

    def test_baseline(self):
        cfg = make_variant("q4_baseline")
        assert cfg.body_bits == 4
        assert not (cfg.use_fem_shortcuts or cfg.use_vrm_shortcuts or cfg.use_qk_shift)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            make_variant("q5")


class TestForward:
    def test_output_shape_and_range(self):
        masks, clip, meas = tiny_inputs()
        net = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=0)
        rec = net.reconstruct(meas, masks)
        assert rec.frames.shape == clip.frames.shape
        assert rec.frames.min() >= 0.0 and rec.frames.max() <= 1.0

    def test_deterministic(self):
        masks, _, meas = tiny_inputs()
        net = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=0)
        a = net.reconstruct(meas, masks).frames
        b = net.reconstruct(meas, masks).frames
        np.testing.assert_array_equal(a, b)

    def test_wrong_t_rejected(self):
        net = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=0)
        with pytest.raises(ShapeError, match="T="):
            net.forward_stack(Tensor(np.zeros((1, 2, 3, 8, 8), np.float32)))

    def test_odd_spatial_rejected(self):
        net = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=0)
        with pytest.raises(ShapeError, match="even"):
            net.forward_stack(Tensor(np.zeros((1, 2, 2, 7, 7), np.float32)))

    @pytest.mark.parametrize("variant", ["fp32", "q8", "q4"])
    def test_untrained_model_outputs_estimate(self, variant):
        # zero-initialized output conv: the model reproduces channel 0
        masks, _, meas = tiny_inputs()
        net = QNet(make_variant(variant, **TINY), seed=0)
        stack = initial_estimate(meas, masks)
        if net.cfg.quantized:
            net.calibrate_quantizers(stack)
        rec = net.reconstruct(meas, masks)
        np.testing.assert_allclose(rec.frames, np.clip(stack[0, 0], 0, 1), atol=1e-5)


class TestFloatReference:
    @pytest.mark.parametrize("flags", [
        dict(),
        dict(use_fem_shortcuts=True, use_vrm_shortcuts=True, use_qk_shift=True),
    ])
    def test_32bit_matches_independent_reference(self, flags):
        cfg = tiny_cfg(body_bits=32, shortcut_bits=32, **flags)
        net = QNet(cfg, seed=3)
        # shortcut convs are zero-initialized; randomize so the test is not
        # comparing zeros, and give the shifts a nonzero value too
        rng = np.random.default_rng(5)
        for name, p in net.named_params():
            if "short_" in name or "beta_" in name:
                p.data = (rng.standard_normal(p.data.shape) * 0.05).astype(np.float32)
        masks, _, meas = tiny_inputs()
        stack = initial_estimate(meas, masks)
        ours = net.forward_stack(Tensor(stack)).data
        theirs = ref.forward(stack, net.state_dict(), cfg)
        np.testing.assert_allclose(ours, theirs.astype(np.float32), atol=1e-6)


class TestShiftedAttention:
    def test_zero_shift_bit_equals_unshifted(self):
        rng = np.random.default_rng(0)
        shifted = ShiftedAttention(np.random.default_rng(1), 8, 2, 8, shift=True)
        plain = ShiftedAttention(np.random.default_rng(1), 8, 2, 8, shift=False)
        for (_, a), (_, b) in zip(shifted.named_params(), plain.named_params()):
            pass  # structures differ by beta params; copy shared ones by name
        shared = dict(plain.named_params())
        for name, p in shifted.named_params():
            if name in shared:
                p.data = shared[name].data.copy()
        tok = Tensor(rng.standard_normal((5, 3, 8)).astype(np.float32))
        np.testing.assert_array_equal(shifted.forward(tok).data, plain.forward(tok).data)

    def test_single_token_probability_one(self):
        rng = np.random.default_rng(2)
        attn = ShiftedAttention(np.random.default_rng(3), 8, 2, 32, shift=False)
        tok = Tensor(rng.standard_normal((4, 1, 8)).astype(np.float32))
        out = attn.forward(tok)
        v = attn.v_proj.forward(tok)
        expect = attn.out_proj.forward(v)
        np.testing.assert_allclose(out.data, expect.data, atol=1e-6)

    def test_shift_moves_mean_exactly(self):
        rng = np.random.default_rng(4)
        attn = ShiftedAttention(np.random.default_rng(5), 8, 2, 8, shift=True)
        attn.beta_q.data = rng.standard_normal(8).astype(np.float32) * 0.5
        tok = Tensor(rng.standard_normal((6, 3, 8)).astype(np.float32))
        q = attn.q_proj.forward(tok)
        q_shifted = q + attn.beta_q
        lhs = float(q_shifted.data.mean()) - float(q.data.mean())
        rhs = float(attn.beta_q.data.mean())
        assert lhs == pytest.approx(rhs, abs=1e-6)

    def test_head_mismatch(self):
        with pytest.raises(ShapeError):
            ShiftedAttention(np.random.default_rng(0), 6, 4, 8, shift=False)

    def test_shift_params_absent_without_flag(self):
        attn = ShiftedAttention(np.random.default_rng(0), 8, 2, 8, shift=False)
        names = [n for n, _ in attn.named_params()]
        assert not any("beta" in n for n in names)


class TestResidualStructure:
    def test_zero_final_projection_is_identity(self):
        rng = np.random.default_rng(6)
        block = CFormerBlock(np.random.default_rng(7), 8, 2, 32, shift=False)
        block.mlp_out.weight.data[:] = 0.0
        block.mlp_out.bias.data[:] = 0.0
        x = Tensor(rng.standard_normal((1, 8, 2, 4, 4)).astype(np.float32))
        out = block.forward(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_init_shortcuts_match_plain_stack(self):
        masks, _, meas = tiny_inputs()
        plain = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=9)
        with_sc = QNet(tiny_cfg(body_bits=32, shortcut_bits=32, use_fem_shortcuts=True,
                                use_vrm_shortcuts=True), seed=9)
        shared = dict(plain.named_params())
        for name, p in with_sc.named_params():
            if name in shared:
                p.data = shared[name].data.copy()
        a = plain.reconstruct(meas, masks).frames
        b = with_sc.reconstruct(meas, masks).frames
        np.testing.assert_array_equal(a, b)

    def test_shortcut_params_absent_without_flags(self):
        net = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=0)
        assert not any("short_" in n for n, _ in net.named_params())


class TestAudit:
    def test_every_body_layer_has_one_quantizer_pair(self):
        net = QNet(make_variant("q4", **TINY), seed=0)
        for name, layer in net.quant_layers():
            assert layer.aq is not None and layer.wq is not None
            assert layer.aq.bits == layer.bits and layer.wq.bits == layer.bits

    def test_audit_lists_all_layers_with_bits(self):
        cfg = make_variant("q4", **TINY)
        net = QNet(cfg, seed=0)
        rows = net.audit((8, 8))
        assert len(rows) == len(net.quant_layers())
        by_name = {r["name"]: r for r in rows}
        assert by_name["fem.conv_a"]["w_bits"] == 4
        assert by_name["fem.short_a"]["w_bits"] == 8
        assert all(r["flops"] > 0 and r["weight_params"] > 0 for r in rows)

    def test_stage_bit_overrides(self):
        cfg = tiny_cfg(body_bits=8, shortcut_bits=8, fem_bits=4)
        net = QNet(cfg, seed=0)
        rows = {r["name"]: r for r in net.audit((8, 8))}
        assert rows["fem.conv_a"]["w_bits"] == 4
        assert rows["vrm.conv_up"]["w_bits"] == 8
        assert rows["block0.cf0.conv"]["w_bits"] == 8


class TestCheckpointInit:
    def test_quantized_init_from_fp32_backbone(self):
        fp32 = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=1)
        q4 = QNet(make_variant("q4", **TINY), seed=2)
        q4.init_from_backbone(fp32.state_dict(), fp32.cfg.backbone_geometry())
        np.testing.assert_array_equal(q4.fem.conv_a.weight.data, fp32.fem.conv_a.weight.data)

    def test_geometry_mismatch_rejected(self):
        fp32 = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=1)
        other = QNet(QNetConfig(base_channels=16, resdnet_blocks=1, cformer_per_block=1,
                                heads=2, cr=2, body_bits=8, shortcut_bits=8), seed=0)
        with pytest.raises(ConfigError, match="geometry"):
            other.init_from_backbone(fp32.state_dict(), fp32.cfg.backbone_geometry())

    def test_missing_backbone_param_rejected(self):
        fp32 = QNet(tiny_cfg(body_bits=32, shortcut_bits=32), seed=1)
        state = fp32.state_dict()
        del state["fem.conv_a.weight"]
        q8 = QNet(make_variant("q8", **TINY), seed=0)
        with pytest.raises(ConfigError, match="fem.conv_a.weight"):
            q8.init_from_backbone(state, fp32.cfg.backbone_geometry())

    def test_load_state_round_trip(self):
        net = QNet(make_variant("q8", **TINY), seed=4)
        state = net.state_dict()
        other = QNet(make_variant("q8", **TINY), seed=5)
        other.load_state(state)
        for (n1, p1), (n2, p2) in zip(net.named_params(), other.named_params()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)
