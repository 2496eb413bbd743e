"""Miniature three-stage quantized reconstruction network.

Stage 1 extracts features from the measurement stack with a small strided
conv path (optionally bridged by 8-bit 1x1x1 shortcut convolutions, with a
channel-packing pixel rearrangement before the last shortcut so its spatial
size matches the strided main path). Stage 2 enhances features with residual
blocks that fuse a 3-D conv branch and a temporal attention branch whose
query/key can carry learnable distribution shifts. Stage 3 reconstructs the
frames with an upsampling conv stack (again optionally shortcut-bridged) and
clamps the output to [0, 1].

Every weight-bearing layer in the body carries one activation quantizer and
one weight quantizer at its assigned bit-width; a 32-bit assignment disables
quantization for that layer.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .quantize import VALID_BITS, ActQuantizer, WeightQuantizer, fake_quant
from .sci import MaskSet, Measurement, VideoClip, initial_estimate

_CALIBRATING = False


@contextmanager
def calibration_mode():
    """While active, quantized layers refit their scale/zero-point from the
    data flowing through them before quantizing."""
    global _CALIBRATING
    _CALIBRATING = True
    try:
        yield
    finally:
        _CALIBRATING = False


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QNetConfig:
    base_channels: int = 16
    resdnet_blocks: int = 2
    cformer_per_block: int = 2
    heads: int = 2
    cr: int = 4                      # compression ratio T
    body_bits: int = 32
    shortcut_bits: int = 32
    use_fem_shortcuts: bool = False
    use_vrm_shortcuts: bool = False
    use_qk_shift: bool = False
    # optional per-stage overrides of body_bits (bit-width ablation grid)
    fem_bits: Optional[int] = None
    enh_bits: Optional[int] = None
    vrm_bits: Optional[int] = None

    def __post_init__(self):
        if self.base_channels % self.heads != 0:
            raise ConfigError(
                f"base_channels {self.base_channels} not divisible by heads {self.heads}"
            )
        for label, bits in (("body_bits", self.body_bits), ("shortcut_bits", self.shortcut_bits)):
            if bits not in VALID_BITS:
                raise ConfigError(f"{label}={bits} not in {VALID_BITS}")
        for label, bits in (("fem_bits", self.fem_bits), ("enh_bits", self.enh_bits),
                            ("vrm_bits", self.vrm_bits)):
            if bits is not None and bits not in VALID_BITS:
                raise ConfigError(f"{label}={bits} not in {VALID_BITS}")
        if self.shortcut_bits < self.body_bits:
            raise ConfigError(
                f"shortcut_bits {self.shortcut_bits} must be >= body_bits {self.body_bits}"
            )
        if self.cr < 1 or self.resdnet_blocks < 1 or self.cformer_per_block < 1:
            raise ConfigError("cr, resdnet_blocks and cformer_per_block must be >= 1")

    def stage_bits(self, stage: str) -> int:
        override = {"fem": self.fem_bits, "enh": self.enh_bits, "vrm": self.vrm_bits}[stage]
        return self.body_bits if override is None else override

    def fingerprint(self) -> str:
        def opt(v):
            return "-" if v is None else str(v)

        return (
            f"v1;C={self.base_channels};N={self.resdnet_blocks};K={self.cformer_per_block};"
            f"heads={self.heads};T={self.cr};body={self.body_bits};short={self.shortcut_bits};"
            f"fem={int(self.use_fem_shortcuts)};vrm={int(self.use_vrm_shortcuts)};"
            f"shift={int(self.use_qk_shift)};femb={opt(self.fem_bits)};"
            f"enhb={opt(self.enh_bits)};vrmb={opt(self.vrm_bits)}"
        )

    def backbone_geometry(self) -> str:
        """The part of the fingerprint that must match for checkpoint init."""
        return (
            f"C={self.base_channels};N={self.resdnet_blocks};K={self.cformer_per_block};"
            f"heads={self.heads};T={self.cr}"
        )

    @property
    def quantized(self) -> bool:
        bits = [self.stage_bits(s) for s in ("fem", "enh", "vrm")]
        if any(b < 32 for b in bits):
            return True
        return (self.use_fem_shortcuts or self.use_vrm_shortcuts) and self.shortcut_bits < 32


def parse_fingerprint(fp: str) -> QNetConfig:
    parts = fp.split(";")
    if not parts or parts[0] != "v1":
        raise ConfigError(f"unrecognized config fingerprint '{fp}'")
    kv = {}
    for part in parts[1:]:
        k, _, v = part.partition("=")
        kv[k] = v

    def opt(v):
        return None if v == "-" else int(v)

    try:
        return QNetConfig(
            base_channels=int(kv["C"]),
            resdnet_blocks=int(kv["N"]),
            cformer_per_block=int(kv["K"]),
            heads=int(kv["heads"]),
            cr=int(kv["T"]),
            body_bits=int(kv["body"]),
            shortcut_bits=int(kv["short"]),
            use_fem_shortcuts=bool(int(kv["fem"])),
            use_vrm_shortcuts=bool(int(kv["vrm"])),
            use_qk_shift=bool(int(kv["shift"])),
            fem_bits=opt(kv["femb"]),
            enh_bits=opt(kv["enhb"]),
            vrm_bits=opt(kv["vrmb"]),
        )
    except KeyError as exc:
        raise ConfigError(f"fingerprint missing field {exc}") from exc


VARIANT_NAMES = ("fp32", "q8", "q4", "q3", "q2", "q4_baseline", "q3_baseline", "q2_baseline")


def make_variant(name: str, **overrides) -> QNetConfig:
    """Named quantization presets.

    q8 keeps every layer at 8-bit and only adds the query/key shift; q4/q3/q2
    quantize the body to 4/3/2 bits and enable the 8-bit shortcut modules plus
    the shift; the *_baseline presets quantize everything directly with no
    additions; fp32 is the unquantized backbone.
    """
    base = dict(base_channels=16, resdnet_blocks=2, cformer_per_block=2, heads=2, cr=4)
    base.update(overrides)
    if name == "fp32":
        return QNetConfig(body_bits=32, shortcut_bits=32, **base)
    if name == "q8":
        return QNetConfig(body_bits=8, shortcut_bits=8, use_qk_shift=True, **base)
    if name in ("q4", "q3", "q2"):
        bits = int(name[1])
        return QNetConfig(body_bits=bits, shortcut_bits=8, use_fem_shortcuts=True,
                          use_vrm_shortcuts=True, use_qk_shift=True, **base)
    if name.endswith("_baseline") and name[:2] in ("q4", "q3", "q2"):
        bits = int(name[1])
        return QNetConfig(body_bits=bits, shortcut_bits=8, **base)
    raise ConfigError(f"unknown variant '{name}'; expected one of {VARIANT_NAMES}")


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter registry with dotted-name traversal."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, Module] = {}

    def register_param(self, name: str, tensor: Tensor):
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def register_module(self, name: str, module: "Module"):
        self._modules[name] = module
        return module

    def register_quantizer(self, name: str, q):
        for pname, p in q.params():
            self.register_param(f"{name}.{pname}", p)
        return q

    def named_params(self, prefix: str = ""):
        for n, p in self._params.items():
            yield prefix + n, p
        for n, m in self._modules.items():
            yield from m.named_params(prefix + n + ".")

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for n, m in self._modules.items():
            yield from m.named_modules(prefix + n + ".")

    def params(self):
        return [p for _, p in self.named_params()]

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state(self, state: dict):
        own = dict(self.named_params())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(
                f"state mismatch: missing {missing[:4]}..., unexpected {extra[:4]}..."
                if len(missing) > 4 or len(extra) > 4
                else f"state mismatch: missing {missing}, unexpected {extra}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"parameter '{name}' shape {arr.shape} does not match model {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arr)

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()


def _he_weight(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


# Parameter-name fragments that a quantized model may add on top of its
# full-precision backbone; init-from-checkpoint leaves these at their
# defaults instead of failing.
_QUANT_ADDITIONS = ("aq.", "wq.", "qq.", "kq.", "pq.", "beta_q", "beta_k", "short_")


def _is_quant_addition(name: str) -> bool:
    return any(frag in name for frag in _QUANT_ADDITIONS)


class QConv3d(Module):
    """3-D convolution with one input activation quantizer and one weight
    quantizer; bias stays full precision. 32-bit disables quantization."""

    def __init__(self, rng, in_ch, out_ch, kernel, stride=(1, 1, 1), padding=(0, 0, 0),
                 bits=32, bias=True, zero_init=False):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.bits = bits
        kt, kh, kw = self.kernel
        fan_in = in_ch * kt * kh * kw
        if zero_init:
            w = np.zeros((out_ch, in_ch, kt, kh, kw), dtype=np.float32)
        else:
            w = _he_weight(rng, (out_ch, in_ch, kt, kh, kw), fan_in)
        self.weight = self.register_param("weight", Tensor(w))
        self.bias = self.register_param("bias", Tensor(np.zeros(out_ch, dtype=np.float32))) \
            if bias else None
        self.aq = self.register_quantizer("aq", ActQuantizer(bits))
        self.wq = self.register_quantizer("wq", WeightQuantizer(bits))
        self.int_kernel = None       # installed by the packed inference path
        self.last_io = None          # (input shape, output shape) for the audit

    def forward(self, x: Tensor, packed: bool = False) -> Tensor:
        if _CALIBRATING and self.bits < 32:
            self.aq.calibrate(x.data)
            self.wq.calibrate(self.weight.data)
        if packed and self.int_kernel is not None:
            out = Tensor(self.int_kernel(x.data))
        else:
            xq = fake_quant(x, self.aq)
            wq = fake_quant(self.weight, self.wq)
            out = ad.conv3d(xq, wq, self.bias, self.stride, self.padding)
        self.last_io = (x.shape, out.shape)
        return out

    def weight_count(self) -> int:
        return int(np.prod(self.weight.shape))

    def bias_count(self) -> int:
        return 0 if self.bias is None else self.out_ch


class QLinear(Module):
    """Token-wise linear layer, weight stored [in, out], same quantizer pair."""

    def __init__(self, rng, in_features, out_features, bits=32, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.bits = bits
        w = _he_weight(rng, (in_features, out_features), in_features)
        self.weight = self.register_param("weight", Tensor(w))
        self.bias = self.register_param("bias", Tensor(np.zeros(out_features, dtype=np.float32))) \
            if bias else None
        self.aq = self.register_quantizer("aq", ActQuantizer(bits))
        self.wq = self.register_quantizer("wq", WeightQuantizer(bits))
        self.int_kernel = None
        self.last_io = None

    def forward(self, x: Tensor, packed: bool = False) -> Tensor:
        if _CALIBRATING and self.bits < 32:
            self.aq.calibrate(x.data)
            self.wq.calibrate(self.weight.data)
        if packed and self.int_kernel is not None:
            out = Tensor(self.int_kernel(x.data))
        else:
            xq = fake_quant(x, self.aq)
            wq = fake_quant(self.weight, self.wq)
            out = ad.matmul(xq, wq)
            if self.bias is not None:
                out = out + self.bias
        self.last_io = (x.shape, out.shape)
        return out

    def weight_count(self) -> int:
        return self.in_features * self.out_features

    def bias_count(self) -> int:
        return 0 if self.bias is None else self.out_features


class LayerNorm(Module):
    """Normalization over the channel axis of [B, T, C] tokens."""

    EPS = 1e-5

    def __init__(self, channels: int):
        super().__init__()
        self.gain = self.register_param("gain", Tensor(np.ones(channels, dtype=np.float32)))
        self.bias = self.register_param("bias", Tensor(np.zeros(channels, dtype=np.float32)))

    def forward(self, x: Tensor) -> Tensor:
        mu = ad.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = ad.mean(xc * xc, axis=-1, keepdims=True)
        normed = xc / ad.sqrt(var + self.EPS)
        return normed * self.gain + self.bias


class ShiftedAttention(Module):
    """Temporal self-attention with quantized projections and optional
    learnable query/key distribution shifts.

    Logits use the dequantized query/key values scaled by 1/sqrt(head_dim);
    attention probabilities pass through their own quantizer before weighting
    the (unquantized) values. With zero shifts the layer is exactly the
    unshifted quantized attention.
    """

    def __init__(self, rng, channels: int, heads: int, bits: int, shift: bool):
        super().__init__()
        if channels % heads != 0:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.shift = shift
        self.q_proj = self.register_module("q_proj", QLinear(rng, channels, channels, bits))
        self.k_proj = self.register_module("k_proj", QLinear(rng, channels, channels, bits))
        self.v_proj = self.register_module("v_proj", QLinear(rng, channels, channels, bits))
        self.out_proj = self.register_module("out_proj", QLinear(rng, channels, channels, bits))
        if shift:
            self.beta_q = self.register_param("beta_q", Tensor(np.zeros(channels, np.float32)))
            self.beta_k = self.register_param("beta_k", Tensor(np.zeros(channels, np.float32)))
        else:
            self.beta_q = None
            self.beta_k = None
        self.qq = self.register_quantizer("qq", ActQuantizer(bits))
        self.kq = self.register_quantizer("kq", ActQuantizer(bits))
        self.pq = self.register_quantizer("pq", ActQuantizer(bits))

    def _split_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        x = ad.reshape(x, (b, t, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def forward(self, tokens: Tensor, packed: bool = False) -> Tensor:
        b, t, c = tokens.shape
        if c != self.channels:
            raise ShapeError(f"token channels {c} do not match layer channels {self.channels}")
        q = self.q_proj.forward(tokens, packed)
        k = self.k_proj.forward(tokens, packed)
        v = self.v_proj.forward(tokens, packed)
        if self.shift:
            q = q + self.beta_q
            k = k + self.beta_k
        if _CALIBRATING:
            self.qq.calibrate(q.data)
            self.kq.calibrate(k.data)
        qh = self._split_heads(fake_quant(q, self.qq), b, t)
        kh = self._split_heads(fake_quant(k, self.kq), b, t)
        vh = self._split_heads(v, b, t)
        logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))),
                          1.0 / math.sqrt(self.head_dim))
        probs = ad.softmax(logits, axis=-1)
        if _CALIBRATING:
            self.pq.calibrate(probs.data)
        mixed = ad.matmul(fake_quant(probs, self.pq), vh)
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, c))
        return self.out_proj.forward(merged, packed)


def _to_tokens(x: Tensor):
    """[N, C, T, H, W] -> ([N*H*W, T, C], restore shape)."""
    n, c, t, h, w = x.shape
    perm = ad.transpose(x, (0, 3, 4, 2, 1))
    return ad.reshape(perm, (n * h * w, t, c)), (n, c, t, h, w)


def _from_tokens(tok: Tensor, shape) -> Tensor:
    n, c, t, h, w = shape
    x = ad.reshape(tok, (n, h, w, t, c))
    return ad.transpose(x, (0, 4, 3, 1, 2))


class CFormerBlock(Module):
    """Residual block fusing a 3-D conv branch with the temporal attention
    branch (concat + 1x1x1), followed by a quantized pointwise MLP."""

    MLP_RATIO = 2

    def __init__(self, rng, channels: int, heads: int, bits: int, shift: bool):
        super().__init__()
        c = channels
        self.conv = self.register_module(
            "conv", QConv3d(rng, c, c, (3, 3, 3), padding=(1, 1, 1), bits=bits))
        self.norm = self.register_module("norm", LayerNorm(c))
        self.attn = self.register_module(
            "attn", ShiftedAttention(rng, c, heads, bits, shift))
        self.fuse = self.register_module(
            "fuse", QConv3d(rng, 2 * c, c, (1, 1, 1), bits=bits))
        hidden = self.MLP_RATIO * c
        self.mlp_in = self.register_module(
            "mlp_in", QConv3d(rng, c, hidden, (1, 1, 1), bits=bits))
        self.mlp_out = self.register_module(
            "mlp_out", QConv3d(rng, hidden, c, (1, 1, 1), bits=bits))

    def forward(self, x: Tensor, packed: bool = False) -> Tensor:
        conv_branch = ad.leaky_relu(self.conv.forward(x, packed))
        tokens, shape = _to_tokens(x)
        attn_tokens = self.attn.forward(self.norm.forward(tokens), packed)
        attn_branch = _from_tokens(attn_tokens, shape)
        fused = self.fuse.forward(ad.concat([conv_branch, attn_branch], axis=1), packed)
        hidden = ad.gelu(self.mlp_in.forward(fused, packed))
        return x + self.mlp_out.forward(hidden, packed)


class ResDNetBlock(Module):
    """K CFormer blocks with a tail fusion conv and a residual skip."""

    def __init__(self, rng, channels: int, heads: int, k: int, bits: int, shift: bool):
        super().__init__()
        self.cformers = [
            self.register_module(f"cf{i}", CFormerBlock(rng, channels, heads, bits, shift))
            for i in range(k)
        ]
        self.tail = self.register_module(
            "tail", QConv3d(rng, channels, channels, (1, 1, 1), bits=bits))

    def forward(self, x: Tensor, packed: bool = False) -> Tensor:
        h = x
        for blk in self.cformers:
            h = blk.forward(h, packed)
        return x + self.tail.forward(h, packed)


class FeatureExtraction(Module):
    """Strided conv stack over the estimate stack; optional zero-initialized
    8-bit 1x1x1 shortcut convs bridge each stage, the last one fed through a
    space-to-channel rearrangement to match the strided output size."""

    IN_CH = 2

    def __init__(self, rng, cfg: QNetConfig):
        super().__init__()
        c = cfg.base_channels
        bits = cfg.stage_bits("fem")
        self.use_shortcuts = cfg.use_fem_shortcuts
        self.conv_a = self.register_module(
            "conv_a", QConv3d(rng, self.IN_CH, c, (3, 3, 3), padding=(1, 1, 1), bits=bits))
        self.conv_b = self.register_module(
            "conv_b", QConv3d(rng, c, c, (3, 3, 3), stride=(1, 2, 2), padding=(1, 1, 1),
                              bits=bits))
        if self.use_shortcuts:
            sb = cfg.shortcut_bits
            self.short_a = self.register_module(
                "short_a", QConv3d(rng, self.IN_CH, c, (1, 1, 1), bits=sb, zero_init=True))
            self.short_b = self.register_module(
                "short_b", QConv3d(rng, 4 * c, c, (1, 1, 1), bits=sb, zero_init=True))

    def forward(self, x: Tensor, packed: bool = False) -> Tensor:
        n, ch, t, h, w = x.shape
        if ch != self.IN_CH:
            raise ShapeError(f"estimate stack must have {self.IN_CH} channels, got {ch}")
        if h % 2 or w % 2:
            raise ShapeError(f"spatial extents must be even for the strided stage, got {h}x{w}")
        h1 = self.conv_a.forward(x, packed)
        if self.use_shortcuts:
            h1 = h1 + self.short_a.forward(x, packed)
        h1 = ad.leaky_relu(h1)
        h2 = self.conv_b.forward(h1, packed)
        if self.use_shortcuts:
            h2 = h2 + self.short_b.forward(ad.pixel_unshuffle_spatial(h1, 2), packed)
        return ad.leaky_relu(h2)


class VideoReconstruction(Module):
    """Upsampling conv stack emitting T frames in [0, 1]; optional 8-bit
    1x1x1 shortcut convs parallel each stage.

    The network predicts a correction on top of the normalized measurement
    estimate (the base argument), so the untrained model already reproduces
    the estimate instead of saturating the output clamp.
    """

    def __init__(self, rng, cfg: QNetConfig):
        super().__init__()
        c = cfg.base_channels
        bits = cfg.stage_bits("vrm")
        self.use_shortcuts = cfg.use_vrm_shortcuts
        self.conv_up = self.register_module(
            "conv_up", QConv3d(rng, c, 4 * c, (1, 3, 3), padding=(0, 1, 1), bits=bits))
        # zero-init so the untrained model emits the estimate unchanged
        self.conv_out = self.register_module(
            "conv_out", QConv3d(rng, c, 1, (1, 3, 3), padding=(0, 1, 1), bits=bits,
                                zero_init=True))
        if self.use_shortcuts:
            sb = cfg.shortcut_bits
            self.short_up = self.register_module(
                "short_up", QConv3d(rng, c, 4 * c, (1, 1, 1), bits=sb, zero_init=True))
            self.short_out = self.register_module(
                "short_out", QConv3d(rng, c, 1, (1, 1, 1), bits=sb, zero_init=True))

    def forward(self, x: Tensor, base: Tensor, packed: bool = False) -> Tensor:
        u = self.conv_up.forward(x, packed)
        if self.use_shortcuts:
            u = u + self.short_up.forward(x, packed)
        u = ad.leaky_relu(ad.pixel_shuffle_spatial(u, 2))
        y = self.conv_out.forward(u, packed)
        if self.use_shortcuts:
            y = y + self.short_out.forward(u, packed)
        return ad.clamp(y + base, 0.0, 1.0)


class QNet(Module):
    """Composition: estimate stack -> feature extraction -> residual
    enhancement blocks -> video reconstruction."""

    def __init__(self, cfg: QNetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
        self.fem = self.register_module("fem", FeatureExtraction(rng, cfg))
        enh_bits = cfg.stage_bits("enh")
        self.blocks = [
            self.register_module(
                f"block{i}",
                ResDNetBlock(rng, cfg.base_channels, cfg.heads, cfg.cformer_per_block,
                             enh_bits, cfg.use_qk_shift))
            for i in range(cfg.resdnet_blocks)
        ]
        self.vrm = self.register_module("vrm", VideoReconstruction(rng, cfg))

    def forward_stack(self, stack: Tensor, packed: bool = False) -> Tensor:
        """[B, 2, T, H, W] estimate stacks -> [B, T, H, W] frames."""
        b, _, t, h, w = stack.shape
        if t != self.cfg.cr:
            raise ShapeError(f"stack has T={t}, model expects T={self.cfg.cr}")
        feat = self.fem.forward(stack, packed)
        for blk in self.blocks:
            feat = blk.forward(feat, packed)
        base = ad.narrow(stack, 1, 0, 1)   # the broadcast estimate channel
        y = self.vrm.forward(feat, base, packed)
        return ad.reshape(y, (b, t, h, w))

    def reconstruct(self, meas: Measurement, masks: MaskSet, packed: bool = False) -> VideoClip:
        stack = Tensor(initial_estimate(meas, masks))
        out = self.forward_stack(stack, packed)
        return VideoClip(frames=out.data[0].copy())

    # -- initialization / calibration -------------------------------------

    def init_from_backbone(self, state: dict, backbone_geometry: str):
        """Load a full-precision checkpoint into a (possibly quantized) model.

        Every checkpoint parameter must exist in the model with the same
        shape; model parameters absent from the checkpoint are only tolerated
        when they are quantization additions (quantizer scales/zero-points,
        query/key shifts, zero-initialized shortcut convs).
        """
        if backbone_geometry != self.cfg.backbone_geometry():
            raise ConfigError(
                f"init checkpoint geometry '{backbone_geometry}' does not match "
                f"model geometry '{self.cfg.backbone_geometry()}'"
            )
        own = dict(self.named_params())
        for name, arr in state.items():
            if name not in own:
                if _is_quant_addition(name):
                    continue   # e.g. initializing from a shifted/shortcut model
                raise ConfigError(f"checkpoint parameter '{name}' has no counterpart in model")
            arr = np.asarray(arr, dtype=np.float32)
            if arr.shape != own[name].data.shape:
                raise ConfigError(
                    f"parameter '{name}' shape {arr.shape} vs model {own[name].data.shape}"
                )
            own[name].data = np.ascontiguousarray(arr)
        for name in own:
            if name not in state and not _is_quant_addition(name):
                raise ConfigError(f"model parameter '{name}' missing from init checkpoint")

    def calibrate_quantizers(self, stack: np.ndarray):
        """One forward pass that refits every quantizer range to the data."""
        with calibration_mode():
            self.forward_stack(Tensor(np.asarray(stack, dtype=np.float32)))

    def alpha_params(self):
        """Learnable quantizer scales (clamped positive after each step)."""
        return [p for name, p in self.named_params()
                if name.endswith(("aq.alpha", "wq.alpha", "qq.alpha", "kq.alpha", "pq.alpha"))]

    def quant_layers(self):
        """(name, layer) for every weight-bearing layer, forward order."""
        return [(name, m) for name, m in self.named_modules()
                if isinstance(m, (QConv3d, QLinear))]

    def audit(self, input_hw) -> list:
        """Structural table: every weight-bearing layer with its bit
        assignment, parameter count and MAC-based FLOPs for the given input.

        Runs one dummy forward to resolve data-dependent shapes.
        """
        h, w = input_hw
        stack = np.zeros((1, 2, self.cfg.cr, h, w), dtype=np.float32)
        self.forward_stack(Tensor(stack))
        rows = []
        for name, layer in self.quant_layers():
            if layer.last_io is None:
                raise ShapeError(f"layer '{name}' not exercised by audit forward")
            in_shape, out_shape = layer.last_io
            if isinstance(layer, QConv3d):
                kt, kh, kw = layer.kernel
                positions = int(np.prod(out_shape[2:])) * out_shape[0]
                macs = positions * layer.out_ch * layer.in_ch * kt * kh * kw
                kind = "conv3d"
                geometry = f"{layer.in_ch}x{layer.out_ch}x{kt}x{kh}x{kw}"
            else:
                tokens = int(np.prod(in_shape[:-1]))
                macs = tokens * layer.in_features * layer.out_features
                kind = "linear"
                geometry = f"{layer.in_features}x{layer.out_features}"
            rows.append({
                "name": name,
                "kind": kind,
                "geometry": geometry,
                "w_bits": layer.bits,
                "a_bits": layer.bits,
                "weight_params": layer.weight_count(),
                "bias_params": layer.bias_count(),
                "flops": 2 * macs,
            })
        return rows
