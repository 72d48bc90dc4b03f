"""Bit-exact persistence for compressed embedding artifacts.

File layout (all integers little-endian):

    offset  size  field
    0       8     magic "DPQCBK01"
    8       2     version (u16, currently 1)
    10      2     flags (u16): bit0 subspace sharing, bit1 tied key/value
    12      8     n (u64)
    20      4     d (u32)
    24      4     k (u32)
    28      4     d_groups (u32)
    32      -     packed codes, ceil(n*d_groups*b/8) bytes, b = ceil(log2 k)
    ...     -     values, float32 row-major: (k, d), or (k, d/d_groups) shared
    end-4   4     CRC-32 over the two payload sections

Codes are packed row-major (row outer, group inner), least-significant
bit first within each byte; the final partial byte is zero-padded, so a
given codebook has exactly one encoding. Values are stored in 32-bit
precision; training math stays in 64-bit and narrows only here.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .core import (
    BatchNormState,
    Codebook,
    DpqConfig,
    EmaState,
    QuantizerState,
    ValueView,
    build_codebook,
    code_bits,
)
from .errors import CorruptFileError, UnsupportedFileError

MAGIC = b"DPQCBK01"
VERSION = 1
FLAG_SHARED = 1 << 0
FLAG_TIED = 1 << 1

_HEADER = struct.Struct("<8sHHQIII")


def pack_codes(codebook: Codebook) -> bytes:
    """Pack codes into ceil(n*d_groups*b/8) bytes, LSB-first."""
    b = code_bits(codebook.k)
    flat = codebook.codes.reshape(-1).astype(np.uint64)
    if flat.size == 0:
        return b""
    bits = ((flat[:, None] >> np.arange(b, dtype=np.uint64)) & 1)
    bits = bits.astype(np.uint8).reshape(-1)
    pad = (-bits.size) % 8
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    weights = (1 << np.arange(8, dtype=np.uint16))
    packed = (bits.reshape(-1, 8).astype(np.uint16) * weights).sum(axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, n: int, d_groups: int, k: int) -> Codebook:
    """Inverse of :func:`pack_codes`; validates length, range and padding."""
    b = code_bits(k)
    total = n * d_groups
    expected = (total * b + 7) // 8
    if len(data) != expected:
        raise CorruptFileError(
            f"packed codes are {len(data)} bytes, expected {expected}"
        )
    if total == 0:
        return Codebook(np.zeros((n, d_groups), dtype=np.int64), k)
    arr = np.frombuffer(data, dtype=np.uint8)
    bits = ((arr[:, None] >> np.arange(8, dtype=np.uint8)) & 1).reshape(-1)
    used = total * b
    if bits[used:].any():
        raise CorruptFileError("nonzero padding bits in packed codes")
    weights = (1 << np.arange(b, dtype=np.int64))
    values = (bits[:used].reshape(total, b).astype(np.int64) * weights).sum(axis=1)
    if values.max() >= k:
        raise CorruptFileError(
            f"decoded code {values.max()} out of range for k={k}"
        )
    return Codebook(values.reshape(n, d_groups), k)


@dataclass
class Artifact:
    """Everything needed to rebuild embeddings: codes plus values."""

    codebook: Codebook
    values: ValueView
    tied: bool
    version: int = VERSION

    @property
    def n(self) -> int:
        return self.codebook.n

    @property
    def d(self) -> int:
        return self.values.d

    @property
    def k(self) -> int:
        return self.codebook.k

    @property
    def d_groups(self) -> int:
        return self.codebook.d_groups

    @property
    def shared(self) -> bool:
        return self.values.shared


def artifact_from_state(state: QuantizerState, cfg: DpqConfig) -> Artifact:
    """Freeze a training state into its inference artifact.

    Discretizes every vocabulary row (running statistics, no batch mode)
    and copies the value blocks; the query and key matrices are dropped.
    """
    codebook = build_codebook(state, cfg)
    values = ValueView(state.value_blocks.copy(), cfg.d_groups, cfg.subspace_sharing)
    return Artifact(codebook=codebook, values=values, tied=cfg.tied)


def save_artifact(path: Union[str, Path], artifact: Artifact) -> None:
    """Write the canonical binary form; see the module docstring."""
    cb = artifact.codebook
    values = artifact.values
    if values.k != cb.k or values.d_groups != cb.d_groups:
        raise ValueError(
            f"codebook (k={cb.k}, groups={cb.d_groups}) does not match "
            f"values (k={values.k}, groups={values.d_groups})"
        )
    if not np.all(np.isfinite(values.blocks)):
        raise ValueError("refusing to serialize non-finite values")
    flags = (FLAG_SHARED if values.shared else 0) | (FLAG_TIED if artifact.tied else 0)
    header = _HEADER.pack(MAGIC, VERSION, flags, cb.n, values.d, cb.k, cb.d_groups)
    code_bytes = pack_codes(cb)
    value_bytes = values.to_matrix().astype("<f4").tobytes()
    payload = code_bytes + value_bytes
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def load_artifact(path: Union[str, Path]) -> Artifact:
    """Read and validate an artifact; inverse of :func:`save_artifact`."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise CorruptFileError(f"file too short ({len(raw)} bytes)")
    magic, version, flags, n, d, k, d_groups = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise UnsupportedFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedFileError(f"unsupported version {version}")
    shared = bool(flags & FLAG_SHARED)
    tied = bool(flags & FLAG_TIED)
    if d_groups == 0 or d % d_groups != 0:
        raise CorruptFileError(f"d_groups={d_groups} does not divide d={d}")
    if k < 2:
        raise CorruptFileError(f"k={k} below minimum of 2")
    code_len = (n * d_groups * code_bits(k) + 7) // 8
    value_cols = (d // d_groups) if shared else d
    value_len = 4 * k * value_cols
    expected = _HEADER.size + code_len + value_len + 4
    if len(raw) != expected:
        raise CorruptFileError(
            f"file is {len(raw)} bytes, expected {expected}"
        )
    payload = raw[_HEADER.size:-4]
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CorruptFileError("checksum mismatch")
    codebook = unpack_codes(payload[:code_len], n, d_groups, k)
    value_mat = np.frombuffer(payload[code_len:], dtype="<f4").astype(np.float64)
    value_mat = value_mat.reshape(k, value_cols)
    if not np.all(np.isfinite(value_mat)):
        raise CorruptFileError("non-finite values in payload")
    values = ValueView.from_matrix(value_mat, d_groups, shared)
    return Artifact(codebook=codebook, values=values, tied=tied, version=version)


def payload_sizes(n: int, d: int, k: int, d_groups: int, shared: bool):
    """(code_bytes, value_bytes) of the on-disk payload sections."""
    code_len = (n * d_groups * code_bits(k) + 7) // 8
    value_cols = (d // d_groups) if shared else d
    return code_len, 4 * k * value_cols


def save_state_sidecar(path: Union[str, Path], state: QuantizerState) -> None:
    """Dense training state next to a checkpoint artifact.

    A timestamp-free container (JSON manifest + consecutive npy blocks)
    so identical runs write identical bytes. Only the artifact is needed
    for inference; this file exists to resume or inspect training.
    """
    arrays = [("query", state.query),
              ("key_blocks", state.key_blocks)]
    if not state.tied:
        arrays.append(("value_blocks", state.value_blocks))
    if state.bn is not None:
        arrays += [("bn_running_mean", state.bn.running_mean),
                   ("bn_running_var", state.bn.running_var)]
        if state.bn.gamma is not None:
            arrays += [("bn_gamma", state.bn.gamma), ("bn_beta", state.bn.beta)]
    if state.ema is not None:
        arrays += [("ema_counts", state.ema.counts), ("ema_sums", state.ema.sums)]
    meta = {
        "names": [name for name, _ in arrays],
        "d_groups": state.d_groups,
        "shared": state.shared,
        "tied": state.tied,
        "bn_momentum": state.bn.momentum if state.bn else None,
        "bn_eps": state.bn.eps if state.bn else None,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            np.save(f, arr)


def load_state_sidecar(path: Union[str, Path]) -> QuantizerState:
    """Rebuild a :class:`QuantizerState` written by the sidecar writer."""
    with open(path, "rb") as f:
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        arrays = {name: np.load(f) for name in meta["names"]}
    key_blocks = arrays["key_blocks"]
    value_blocks = key_blocks if meta["tied"] else arrays["value_blocks"]
    bn = None
    if "bn_running_mean" in arrays:
        bn = BatchNormState(
            running_mean=arrays["bn_running_mean"],
            running_var=arrays["bn_running_var"],
            momentum=meta["bn_momentum"],
            eps=meta["bn_eps"],
            gamma=arrays.get("bn_gamma"),
            beta=arrays.get("bn_beta"),
        )
    ema = None
    if "ema_counts" in arrays:
        ema = EmaState(counts=arrays["ema_counts"], sums=arrays["ema_sums"])
    return QuantizerState(
        query=arrays["query"],
        key_blocks=key_blocks,
        value_blocks=value_blocks,
        d_groups=meta["d_groups"],
        shared=meta["shared"],
        bn=bn,
        ema=ema,
    )


def save_kv(path: Union[str, Path], mapping: dict) -> None:
    """Flat UTF-8 key=value file, keys sorted for a canonical form."""
    lines = [f"{key}={mapping[key]}" for key in sorted(mapping)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_kv(path: Union[str, Path]) -> dict:
    """Parse a key=value file; blank lines and '#' comments are skipped."""
    out = {}
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
