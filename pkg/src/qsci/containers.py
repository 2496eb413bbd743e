"""Binary checkpoint container and the plain-text experiment config.

Checkpoints carry a config fingerprint plus named little-endian parameter
records; save/load round trips are bit-exact and a fingerprint mismatch on
load is rejected. The experiment config is a ``section.key = value`` text
file with a fixed key schema; unknown keys are rejected and the parsed
values are echoed into the run directory for provenance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np

from .errors import ConfigError, FormatError

CKPT_MAGIC = b"QSCICKPT"
CKPT_VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<i8"): 1, np.dtype("<u8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _write_u16(fh, v):
    fh.write(struct.pack("<H", v))


def _write_u32(fh, v):
    fh.write(struct.pack("<I", v))


def _write_u64(fh, v):
    fh.write(struct.pack("<Q", v))


def _read_u16(fh):
    return struct.unpack("<H", fh.read(2))[0]


def _read_u32(fh):
    return struct.unpack("<I", fh.read(4))[0]


def _read_u64(fh):
    return struct.unpack("<Q", fh.read(8))[0]


def _write_str(fh, s: str):
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError("string field too long")
    _write_u16(fh, len(raw))
    fh.write(raw)


def _read_str(fh) -> str:
    n = _read_u16(fh)
    return fh.read(n).decode("utf-8")


def _write_array(fh, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        le = arr.astype("<f4", copy=False)
    elif arr.dtype == np.int64:
        le = arr.astype("<i8", copy=False)
    elif arr.dtype == np.uint64:
        le = arr.astype("<u8", copy=False)
    else:
        raise FormatError(f"unsupported array dtype {arr.dtype}")
    fh.write(bytes([_DTYPE_TAGS[le.dtype]]))
    fh.write(bytes([arr.ndim]))
    for d in arr.shape:
        _write_u32(fh, d)
    fh.write(np.ascontiguousarray(le).tobytes())


def _read_array(fh) -> np.ndarray:
    tag = fh.read(1)[0]
    dtype = _TAG_DTYPES.get(tag)
    if dtype is None:
        raise FormatError(f"unknown dtype tag {tag}")
    ndim = fh.read(1)[0]
    shape = tuple(_read_u32(fh) for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise FormatError("truncated array payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_checkpoint(path, fingerprint: str, state: dict):
    """Write named parameter arrays under the given config fingerprint."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        _write_u16(fh, CKPT_VERSION)
        _write_str(fh, fingerprint)
        _write_u32(fh, len(state))
        for name in sorted(state):
            _write_str(fh, name)
            _write_array(fh, np.asarray(state[name]))


def load_checkpoint(path, expect_fingerprint: str | None = None):
    """Read (fingerprint, state); rejects wrong magic, version or fingerprint."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version = _read_u16(fh)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        fingerprint = _read_str(fh)
        if expect_fingerprint is not None and fingerprint != expect_fingerprint:
            raise FormatError(
                f"checkpoint fingerprint '{fingerprint}' does not match "
                f"expected '{expect_fingerprint}'"
            )
        state = {}
        for _ in range(_read_u32(fh)):
            name = _read_str(fh)
            state[name] = _read_array(fh)
    return fingerprint, state


# ---------------------------------------------------------------------------
# experiment config: "section.key = value" text files
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    # net.*
    net_variant: str = "fp32"
    net_base_channels: int = 16
    net_resdnet_blocks: int = 1
    net_cformer_per_block: int = 1
    net_heads: int = 2
    net_cr: int = 4
    # train.*
    train_lr_phase1: float = 1e-4
    train_lr_phase2: float = 1e-5
    train_epochs_phase1: int = 60
    train_epochs_phase2: int = 20
    train_batch_size: int = 8
    train_crop: int = 32
    train_aug_crop: bool = True
    train_aug_flip: bool = True
    train_aug_scale: bool = True
    train_seed: int = 0
    # data.*
    data_seed: int = 1
    data_count: int = 200
    data_holdout: int = 16
    data_clip_hw: int = 48
    data_mask_p: float = 0.5
    data_noise_sigma: float = 0.0
    # out.*
    out_dir: str = "run"

    _KEY_MAP: ClassVar[dict | None] = None   # "section.key" -> (field name, type)

    @classmethod
    def _key_map(cls):
        if cls._KEY_MAP is None:
            m = {}
            for f in fields(cls):
                if f.name.startswith("_"):
                    continue
                section, _, rest = f.name.partition("_")
                m[f"{section}.{rest}"] = (f.name, f.type)
            cls._KEY_MAP = m
        return cls._KEY_MAP

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        key_map = cls._key_map()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'section.key = value', got '{raw}'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in key_map:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
            fname, ftype = key_map[key]
            setattr(cfg, fname, _convert(key, value, ftype))
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def echo(self) -> str:
        """Canonical text rendering of every key (written for provenance)."""
        lines = []
        for key in sorted(self._key_map()):
            fname, _ = self._key_map()[key]
            v = getattr(self, fname)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def _convert(key, value, ftype):
    tname = ftype if isinstance(ftype, str) else ftype.__name__
    try:
        if tname == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tname == "int":
            return int(value)
        if tname == "float":
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"key '{key}': cannot parse '{value}' as {tname}") from exc
