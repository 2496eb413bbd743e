"""Deployment-style integer inference: bit-packed weights and integer
accumulation kernels numerically matched to the fake-quant float path.

Weight codes are stored as b-bit two's-complement fields packed little-endian
into 64-bit words (no field straddles a word; leftover bits are zero).
Contractions run on int64 accumulators; the real-valued zero-point enters as
a per-output correction term (for convolutions a cached correction map that
accounts for zero padding at the borders), after which the accumulator is
scaled by the product of the two quantizer scales.

Everything that is not a weight contraction (softmax, norms, activations,
residuals, the attention products) runs in float on dequantized values.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import _im2col, conv3d_output_shape
from .errors import ConfigError, FormatError, ShapeError
from .evaluation import bit_adjusted_ops
from .network import QConv3d, QLinear, QNet, parse_fingerprint
from .quantize import act_quantize, weight_quantize
from .sci import MaskSet, Measurement, VideoClip

ACC_BITS = 64          # signed accumulator width
_ACC_HEADROOM = 2      # bits reserved above the worst-case bound


def pack_weights(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack signed integer codes into uint64 words, bits-wide fields filled
    LSB-first; padding bits are zero. Exact and reversible."""
    if bits not in (2, 3, 4, 8):
        raise ConfigError(f"cannot bit-pack {bits}-bit codes")
    flat = np.asarray(codes).reshape(-1)
    q_n, q_p = 1 << (bits - 1), (1 << (bits - 1)) - 1
    ints = np.rint(flat).astype(np.int64)
    if flat.size and (ints.min() < -q_n or ints.max() > q_p):
        raise ConfigError(f"codes outside the signed {bits}-bit range [-{q_n}, {q_p}]")
    per_word = 64 // bits
    n_words = (flat.size + per_word - 1) // per_word
    words = np.zeros(n_words, dtype=np.uint64)
    fields = (ints & ((1 << bits) - 1)).astype(np.uint64)   # two's complement
    for slot in range(per_word):
        chunk = fields[slot::per_word]
        words[: chunk.size] |= chunk << np.uint64(slot * bits)
    return words


def unpack_weights(words: np.ndarray, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_weights`; returns int64 codes."""
    if bits not in (2, 3, 4, 8):
        raise ConfigError(f"cannot unpack {bits}-bit codes")
    per_word = 64 // bits
    words = np.asarray(words, dtype=np.uint64)
    if count > words.size * per_word:
        raise FormatError(f"{count} codes cannot fit in {words.size} words at {bits} bits")
    mask = np.uint64((1 << bits) - 1)
    out = np.empty(words.size * per_word, dtype=np.int64)
    for slot in range(per_word):
        fields = ((words >> np.uint64(slot * bits)) & mask).astype(np.int64)
        out[slot::per_word] = fields
    out = out[:count]
    sign = 1 << (bits - 1)
    return np.where(out >= sign, out - (1 << bits), out)


@dataclass
class PackedLayer:
    """One quantized weight layer in deployment form."""

    name: str
    kind: str                    # "conv3d" | "linear"
    bits: int
    shape: tuple                 # conv: (O,C,kt,kh,kw); linear: (in, out)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    alpha_w: float = 1.0
    alpha_x: float = 1.0
    z: float = 0.0
    words: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))

    @property
    def code_count(self) -> int:
        return int(np.prod(self.shape))

    def codes(self) -> np.ndarray:
        return unpack_weights(self.words, self.bits, self.code_count).reshape(self.shape)

    def contraction_length(self) -> int:
        if self.kind == "conv3d":
            _, c, kt, kh, kw = self.shape
            return c * kt * kh * kw
        return self.shape[0]

    def accumulator_bound(self, a_bits: int) -> int:
        """Worst-case |accumulator|: K * 2^(a-1) * 2^(b-1)."""
        return self.contraction_length() * (1 << (a_bits - 1)) * (1 << (self.bits - 1))


def _int_conv3d(x_codes: np.ndarray, w_codes: np.ndarray, stride, padding) -> np.ndarray:
    """int64 im2col convolution of code tensors."""
    o, c, kt, kh, kw = w_codes.shape
    n, _, to, ho, wo = conv3d_output_shape(x_codes.shape, w_codes.shape, stride, padding)
    pt, ph, pw = padding
    xp = np.pad(x_codes, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols = _im2col(xp, (kt, kh, kw), stride, (to, ho, wo))
    acc = cols @ w_codes.reshape(o, -1).T
    return np.ascontiguousarray(acc.transpose(0, 2, 1)).reshape(n, o, to, ho, wo)


def int_contract(x_codes: np.ndarray, layer: PackedLayer, a_bits: int) -> np.ndarray:
    """Raw integer contraction of activation codes with the packed weight
    codes (int64 accumulators, no scaling or correction applied)."""
    x_codes = np.asarray(x_codes, dtype=np.int64)
    w_codes = layer.codes()
    if layer.kind == "conv3d":
        acc = _int_conv3d(x_codes, w_codes, layer.stride, layer.padding)
    else:
        acc = x_codes @ w_codes
    bound = layer.accumulator_bound(a_bits)
    assert int(np.abs(acc).max(initial=0)) <= bound, \
        f"accumulator bound exceeded in '{layer.name}'"
    return acc


class IntKernel:
    """Integer-path forward for one layer; callable on float activations."""

    def __init__(self, layer: PackedLayer, aq, bias: Optional[np.ndarray]):
        self.layer = layer
        self.aq = aq
        self.bias = bias
        self.w_codes = layer.codes()
        bound = layer.accumulator_bound(aq.bits)
        if bound >= 1 << (ACC_BITS - 1 - _ACC_HEADROOM):
            raise ConfigError(
                f"layer '{layer.name}' may overflow the {ACC_BITS}-bit accumulator: "
                f"worst case |acc| = {bound}"
            )
        self._bound = bound
        self._ones_maps: dict = {}   # input shape -> padded-ones correction conv

    def _conv_correction(self, in_shape) -> np.ndarray:
        """sum_j Q_w(w)_j over the taps that overlap each output position
        (equals the full kernel-code sum away from zero-padded borders)."""
        cached = self._ones_maps.get(in_shape)
        if cached is None:
            ones = np.ones(in_shape, dtype=np.int64)
            cached = _int_conv3d(ones, self.w_codes, self.layer.stride, self.layer.padding)
            self._ones_maps[in_shape] = cached
        return cached

    def __call__(self, x: np.ndarray) -> np.ndarray:
        layer = self.layer
        x_codes = act_quantize(x, self.aq).astype(np.int64)
        alpha_x, alpha_w, z = layer.alpha_x, layer.alpha_w, layer.z
        if layer.kind == "conv3d":
            acc = _int_conv3d(x_codes, self.w_codes, layer.stride, layer.padding)
            assert int(np.abs(acc).max(initial=0)) <= self._bound, \
                f"accumulator bound exceeded in '{layer.name}'"
            corr = self._conv_correction(x_codes.shape)
            out = alpha_x * alpha_w * (acc + (z / alpha_x) * corr)
            if self.bias is not None:
                out = out + self.bias.reshape(1, -1, 1, 1, 1)
        else:
            acc = x_codes @ self.w_codes
            assert int(np.abs(acc).max(initial=0)) <= self._bound, \
                f"accumulator bound exceeded in '{layer.name}'"
            corr = (z / alpha_x) * self.w_codes.sum(axis=0)
            out = alpha_x * alpha_w * (acc + corr)
            if self.bias is not None:
                out = out + self.bias
        return out.astype(np.float32)


@dataclass
class PackedModel:
    fingerprint: str
    layers: list                 # PackedLayer, forward order
    blobs: dict                  # name -> float32 array (biases, shifts, norms, ...)


def pack_model(net: QNet) -> PackedModel:
    """Quantize and bit-pack every sub-32-bit weight layer; everything else
    (biases, shifts, norms, 32-bit weights, remaining quantizer params) goes
    into the float blob section."""
    layers = []
    packed_param_names = set()
    for name, layer in net.quant_layers():
        if layer.bits >= 32:
            continue
        codes = weight_quantize(layer.weight.data, layer.wq)
        if isinstance(layer, QConv3d):
            pl = PackedLayer(
                name=name, kind="conv3d", bits=layer.bits,
                shape=tuple(layer.weight.shape), stride=layer.stride,
                padding=layer.padding,
                alpha_w=float(layer.wq.alpha.data[0]),
                alpha_x=float(layer.aq.alpha.data[0]),
                z=float(layer.aq.z.data[0]),
                words=pack_weights(codes, layer.bits),
            )
        else:
            pl = PackedLayer(
                name=name, kind="linear", bits=layer.bits,
                shape=(layer.in_features, layer.out_features),
                alpha_w=float(layer.wq.alpha.data[0]),
                alpha_x=float(layer.aq.alpha.data[0]),
                z=float(layer.aq.z.data[0]),
                words=pack_weights(codes, layer.bits),
            )
        layers.append(pl)
        packed_param_names.update({
            f"{name}.weight", f"{name}.wq.alpha", f"{name}.aq.alpha", f"{name}.aq.z",
        })
    blobs = {pname: p.data.copy() for pname, p in net.named_params()
             if pname not in packed_param_names}
    return PackedModel(fingerprint=net.cfg.fingerprint(), layers=layers, blobs=blobs)


def install_packed(net: QNet, model: PackedModel):
    """Attach integer kernels and float blobs to a network skeleton."""
    if net.cfg.fingerprint() != model.fingerprint:
        raise FormatError(
            f"packed model fingerprint '{model.fingerprint}' does not match "
            f"network '{net.cfg.fingerprint()}'"
        )
    modules = dict(net.named_modules())
    own = dict(net.named_params())
    audit_count = sum(1 for _, l in net.quant_layers() if l.bits < 32)
    if audit_count != len(model.layers):
        raise FormatError(
            f"packed model has {len(model.layers)} layers, network expects {audit_count}"
        )
    for pl in model.layers:
        layer = modules.get(pl.name)
        if layer is None or not isinstance(layer, (QConv3d, QLinear)):
            raise FormatError(f"packed layer '{pl.name}' not found in network")
        if layer.bits != pl.bits:
            raise FormatError(f"layer '{pl.name}' bits {layer.bits} vs packed {pl.bits}")
        # act quantizer params come from the packed record
        layer.aq.alpha.data[0] = pl.alpha_x
        layer.aq.z.data[0] = pl.z
        layer.wq.alpha.data[0] = pl.alpha_w
        bias = model.blobs.get(f"{pl.name}.bias")
        layer.int_kernel = IntKernel(pl, layer.aq, bias)
    for pname, arr in model.blobs.items():
        if pname not in own:
            raise FormatError(f"blob '{pname}' has no counterpart in network")
        if own[pname].data.shape != arr.shape:
            raise FormatError(f"blob '{pname}' shape {arr.shape} vs {own[pname].data.shape}")
        own[pname].data = np.ascontiguousarray(arr, dtype=np.float32)


def infer_packed(model: PackedModel, meas: Measurement, masks: MaskSet) -> VideoClip:
    """Full-network inference over the integer path."""
    cfg = parse_fingerprint(model.fingerprint)
    net = QNet(cfg, seed=0)
    install_packed(net, model)
    return net.reconstruct(meas, masks, packed=True)


# ---------------------------------------------------------------------------
# container format: magic "QSCIPACK"
# ---------------------------------------------------------------------------

PACK_MAGIC = b"QSCIPACK"
PACK_VERSION = 1

_KIND_TAGS = {"conv3d": 0, "linear": 1}
_KIND_NAMES = {v: k for k, v in _KIND_TAGS.items()}


def write_packed(model: PackedModel, path):
    from .containers import _write_str, _write_u16, _write_u32, _write_u64, _write_array

    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        _write_u16(fh, PACK_VERSION)
        _write_str(fh, model.fingerprint)
        _write_u32(fh, len(model.blobs))
        for name in sorted(model.blobs):
            _write_str(fh, name)
            _write_array(fh, model.blobs[name])
        _write_u32(fh, len(model.layers))
        for pl in model.layers:
            _write_str(fh, pl.name)
            fh.write(bytes([_KIND_TAGS[pl.kind]]))
            fh.write(bytes([pl.bits]))
            _write_u16(fh, len(pl.shape))
            for d in pl.shape:
                _write_u32(fh, d)
            for d in pl.stride:
                _write_u32(fh, d)
            for d in pl.padding:
                _write_u32(fh, d)
            fh.write(np.array([pl.alpha_w, pl.alpha_x, pl.z], dtype="<f4").tobytes())
            _write_u64(fh, pl.code_count)
            _write_u64(fh, pl.words.size)
            fh.write(pl.words.astype("<u8").tobytes())


def read_packed(path) -> PackedModel:
    from .containers import _read_str, _read_u16, _read_u32, _read_u64, _read_array

    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != PACK_MAGIC:
            raise FormatError(f"bad packed-model magic {magic!r}")
        version = _read_u16(fh)
        if version != PACK_VERSION:
            raise FormatError(f"unsupported packed-model version {version}")
        fingerprint = _read_str(fh)
        blobs = {}
        for _ in range(_read_u32(fh)):
            name = _read_str(fh)
            blobs[name] = _read_array(fh)
        layers = []
        for _ in range(_read_u32(fh)):
            name = _read_str(fh)
            kind = _KIND_NAMES[fh.read(1)[0]]
            bits = fh.read(1)[0]
            ndim = _read_u16(fh)
            shape = tuple(_read_u32(fh) for _ in range(ndim))
            stride = tuple(_read_u32(fh) for _ in range(3))
            padding = tuple(_read_u32(fh) for _ in range(3))
            alpha_w, alpha_x, z = np.frombuffer(fh.read(12), dtype="<f4")
            code_count = _read_u64(fh)
            n_words = _read_u64(fh)
            words = np.frombuffer(fh.read(8 * n_words), dtype="<u8").copy()
            if code_count != int(np.prod(shape)):
                raise FormatError(f"layer '{name}' code count {code_count} vs shape {shape}")
            layers.append(PackedLayer(
                name=name, kind=kind, bits=int(bits), shape=shape, stride=stride,
                padding=padding, alpha_w=float(alpha_w), alpha_x=float(alpha_x),
                z=float(z), words=words))
    return PackedModel(fingerprint=fingerprint, layers=layers, blobs=blobs)


# ---------------------------------------------------------------------------
# kernel micro-benchmark
# ---------------------------------------------------------------------------

def kernel_bench(in_shape, w_shape, bits: int, repetitions: int,
                 stride=(1, 1, 1), padding=(0, 0, 0), seed: int = 0) -> dict:
    """Time the integer conv kernel on random codes and report wall-clock per
    call next to the bit-adjusted theoretical OPs for the same geometry.
    No pass/fail: the ratio is informational."""
    report = {
        "in_shape": tuple(in_shape),
        "w_shape": tuple(w_shape),
        "bits": bits,
        "repetitions": repetitions,
        "calls": [],
    }
    out_shape = conv3d_output_shape(in_shape, w_shape, stride, padding)
    o, c, kt, kh, kw = w_shape
    macs = int(np.prod(out_shape[1:])) * c * kt * kh * kw * in_shape[0]
    flops = 2.0 * macs
    report["float_flops"] = flops
    report["theoretical_ops"] = bit_adjusted_ops(flops, bits, bits)
    if repetitions <= 0:
        return report

    rng = np.random.default_rng(seed)
    q_p = (1 << (bits - 1)) - 1
    codes = rng.integers(-q_p, q_p + 1, size=w_shape).astype(np.float32)
    layer = PackedLayer(name="bench", kind="conv3d", bits=bits, shape=tuple(w_shape),
                        stride=tuple(stride), padding=tuple(padding),
                        words=pack_weights(codes, bits))
    x_codes = rng.integers(-q_p, q_p + 1, size=in_shape)
    for _ in range(repetitions):
        t0 = time.perf_counter()
        int_contract(x_codes, layer, a_bits=bits)
        report["calls"].append(time.perf_counter() - t0)
    mean_s = float(np.mean(report["calls"]))
    report["wall_clock_s"] = mean_s
    report["achieved_ops_per_s"] = report["theoretical_ops"] / mean_s if mean_s > 0 else 0.0
    return report
