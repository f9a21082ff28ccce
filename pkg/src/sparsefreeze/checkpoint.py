"""Binary sparse checkpoints.

Layout (little endian)::

    b"SPFD" | u32 version | u32 blob_len | blob (UTF-8 JSON)
    per layer:
        u32 name_len | name | u8 kind | u32 rank | u32 dims[rank] | u8 frozen
        u64 nnz | u32 indices[nnz] | f32 values[nnz] | f32 bias[n_out]
        u8 has_momentum | (f32 weight_momentum[nnz] | f32 bias_momentum[n_out])?
    u32 crc32 of everything above

The JSON blob holds the architecture, block sizes, sparsity targets and the
training state (epoch, seed, RNG states, free-form extras).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .model import AFFINE, CONV2D, MaskedLayer, build_network, layer_shapes

MAGIC = b"SPFD"
VERSION = 1
_KINDS = {AFFINE: 0, CONV2D: 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


@dataclass
class TrainState:
    """Optimizer and loop state carried alongside the network."""
    epoch: int = 0
    seed: int = 0
    momentum: dict = field(default_factory=dict)   # layer name -> (w_buf, b_buf) or None
    rng_states: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _n_out(kind, shape):
    return shape[0] if kind == CONV2D else shape[1]


def dumps(net, state):
    blob = json.dumps({
        "arch": net.arch,
        "blocks": [len(b.layers) for b in net.blocks],
        "sparsity": net.sparsity,
        "layer_targets": [l.sparsity for l in net.layers],
        "dtype": np.dtype(net.dtype).name,
        "epoch": state.epoch,
        "seed": state.seed,
        "rng_states": state.rng_states,
        "extra": state.extra,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for layer in net.layers:
        name = layer.name.encode("utf-8")
        idx = np.flatnonzero(layer.mask.reshape(-1)).astype("<u4")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BI", _KINDS[layer.kind], layer.weights.ndim))
        parts.append(struct.pack(f"<{layer.weights.ndim}I", *layer.weights.shape))
        parts.append(struct.pack("<BQ", int(layer.frozen), idx.size))
        parts.append(idx.tobytes())
        parts.append(layer.weights.reshape(-1)[idx].astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
        mom = state.momentum.get(layer.name)
        if mom is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01")
            parts.append(np.asarray(mom[0]).reshape(-1)[idx].astype("<f4").tobytes())
            parts.append(np.asarray(mom[1]).astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net, state, path):
    with open(path, "wb") as f:
        f.write(dumps(net, state))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n, what):
        if n < 0 or self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.off}",
                              "sparse-model")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, count, what):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt)


def loads(buf):
    """Parse checkpoint bytes into ``(net, TrainState)``."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0", "sparse-model")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4", "sparse-model")
    (blob_len,) = r.unpack("<I", "blob length")
    blob_off = r.off
    try:
        meta = json.loads(r.take(blob_len, "description blob").decode("utf-8"))
        arch = meta["arch"]
        shapes = layer_shapes(arch)
        dtype = np.dtype(meta["dtype"]).type
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"bad description blob at offset {blob_off}: {exc}", "sparse-model") from None
    layers, momentum = [], {}
    for i, (spec, wshape, in_shape, out_shape) in enumerate(shapes):
        start = r.off
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "name").decode("utf-8", errors="replace")
        kind_b, rank = r.unpack("<BI", "kind/rank")
        if kind_b not in _KIND_NAMES or rank > 8:
            raise FormatError(f"bad layer header at offset {start}", "sparse-model")
        dims = r.unpack(f"<{rank}I", "dims")
        kind = _KIND_NAMES[kind_b]
        if tuple(dims) != tuple(wshape) or kind != spec["kind"]:
            raise FormatError(f"layer {name!r} at offset {start} does not match the description",
                              "sparse-model")
        frozen, nnz = r.unpack("<BQ", "frozen/nnz")
        size = int(np.prod(dims))
        if nnz > size:
            raise FormatError(f"nnz {nnz} exceeds layer size {size} at offset {r.off - 8}", "sparse-model")
        idx_off = r.off
        idx = r.array("<u4", nnz, "indices").astype(np.int64)
        if nnz and (idx.max() >= size or np.any(np.diff(idx) <= 0)):
            raise FormatError(f"indices at offset {idx_off} not sorted/in range", "sparse-model")
        vals = r.array("<f4", nnz, "values")
        nout = _n_out(kind, dims)
        bias = r.array("<f4", nout, "bias")
        (has_mom,) = r.unpack("<B", "momentum flag")
        if has_mom:
            wm = np.zeros(size, dtype=dtype)
            wm[idx] = r.array("<f4", nnz, "weight momentum")
            momentum[name] = (wm.reshape(dims), r.array("<f4", nout, "bias momentum").astype(dtype))
        else:
            momentum[name] = None
        weights = np.zeros(size, dtype=dtype)
        weights[idx] = vals
        mask = np.zeros(size, dtype=bool)
        mask[idx] = True
        layers.append(MaskedLayer(
            name=name, kind=kind, weights=weights.reshape(dims), mask=mask.reshape(dims),
            bias=bias.astype(dtype), sparsity=float(meta["layer_targets"][i]), frozen=bool(frozen),
            stride=spec.get("stride", 1), padding=spec.get("padding", 0),
            in_shape=tuple(in_shape), out_shape=tuple(out_shape)))
    crc_off = r.off
    (crc,) = r.unpack("<I", "crc32")
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes at offset {r.off}", "sparse-model")
    if zlib.crc32(buf[:crc_off]) != crc:
        raise FormatError(f"checksum mismatch (crc stored at offset {crc_off})", "sparse-model")
    net = build_network(arch, float(meta["sparsity"]), layers, meta["blocks"], dtype)
    state = TrainState(epoch=int(meta["epoch"]), seed=int(meta["seed"]), momentum=momentum,
                       rng_states=meta["rng_states"], extra=meta["extra"])
    return net, state


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}", "sparse-model") from None
    return loads(buf)

