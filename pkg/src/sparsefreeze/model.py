"""Masked sparse networks: layers, freezable blocks and architecture parsing."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal

import numpy as np

from . import tensor as T
from .errors import ConfigError

AFFINE, CONV2D = "affine", "conv2d"


def keep_count(size, sparsity):
    """Number of nonzeros a layer of ``size`` weights keeps at ``sparsity``.

    Round-half-up on ``(1 - sparsity) * size``, evaluated in decimal so that
    e.g. ``0.9 - 0.05`` behaves like ``0.85``.
    """
    s = Decimal(repr(round(float(sparsity), 12)))
    return int(((1 - s) * size + Decimal("0.5")).to_integral_value(rounding=ROUND_FLOOR))


def check_sparsity(s, module="sparse-model"):
    if not 0 <= s < 1:
        raise ConfigError(f"sparsity must be in [0, 1), got {s}", module)


# ---------------------------------------------------------------------------
# architecture descriptions


def parse_arch(text):
    """Parse an architecture shorthand into a description dict.

    * ``mlp:784-256-128-10``
    * ``cnn:3x32x32:16,16,32s2,32:gap-10`` -- 3x3 pad-1 convs; ``s2`` marks a
      stride-2 downsampling conv, which uses a 4x4 kernel so even sizes halve exactly,
      then ``gap`` (global average pool) or ``flat`` (the default), then affine widths.
    * ``resnet32:2:100`` -- a 32-layer plain conv stack shaped like a
      width-multiplied CIFAR ResNet-32, one block per residual pair.
    """
    text = text.strip()
    kind, _, rest = text.partition(":")
    try:
        if kind == "mlp":
            dims = [int(v) for v in rest.split("-")]
            if len(dims) < 2:
                raise ValueError
            layers = [{"kind": AFFINE, "out": d} for d in dims[1:]]
            return {"input": [dims[0]], "layers": layers, "head": "flatten", "text": text}
        if kind == "cnn":
            shape, convs, head = rest.split(":")
            inp = [int(v) for v in shape.split("x")]
            layers = []
            for tok in convs.split(","):
                out, _, stride = tok.partition("s")
                layers.append(_conv(int(out), int(stride or 1)))
            fcs = head.split("-")
            pool = "flatten"
            if fcs[0] in ("gap", "flat"):
                pool, fcs = ("gap" if fcs[0] == "gap" else "flatten"), fcs[1:]
            layers += [{"kind": AFFINE, "out": int(v)} for v in fcs]
            return {"input": inp, "layers": layers, "head": pool, "text": text}
        if kind == "resnet32":
            parts = rest.split(":") if rest else []
            width = int(parts[0]) if parts else 1
            classes = int(parts[1]) if len(parts) > 1 else 10
            return _resnet32(width, classes, text)
    except ValueError:
        pass
    raise ConfigError(f"cannot parse architecture {text!r}", "sparse-model")


def _conv(out, stride=1):
    return {"kind": CONV2D, "out": out, "kernel": 3 if stride == 1 else 2 * stride,
            "stride": stride, "padding": 1}


def _resnet32(width, classes, text):
    conv = _conv
    layers = [conv(16 * width)]
    blocks = [1]
    for stage, w in enumerate((16 * width, 32 * width, 64 * width)):
        for unit in range(5):
            layers.append(conv(w, 2 if stage and unit == 0 else 1))
            layers.append(conv(w))
            blocks.append(2)
    layers.append({"kind": AFFINE, "out": classes})
    blocks.append(1)
    return {"input": [3, 32, 32], "layers": layers, "head": "gap", "blocks": blocks, "text": text}


def layer_shapes(arch):
    """Yield ``(layer_dict, weight_shape, in_shape, out_shape)`` per layer (per-sample shapes)."""
    shape = tuple(arch["input"])
    out = []
    for spec in arch["layers"]:
        if spec["kind"] == CONV2D:
            if len(shape) != 3:
                raise ConfigError("conv2d layer needs a CxHxW input", "sparse-model")
            c, h, w = shape
            k, s, p = spec["kernel"], spec["stride"], spec["padding"]
            ho = T.conv_output_size(h, k, s, p)
            wo = T.conv_output_size(w, k, s, p)
            wshape = (spec["out"], c, k, k)
            new = (spec["out"], ho, wo)
        else:
            if len(shape) == 3:
                fan = shape[0] if arch.get("head") == "gap" else int(np.prod(shape))
            else:
                fan = shape[0]
            wshape = (fan, spec["out"])
            new = (spec["out"],)
        out.append((spec, wshape, shape, new))
        shape = new
    return out


def default_blocks(arch):
    """Block sizes (layer counts) partitioning the layers front to back.

    MLPs: one block per layer. CNNs: one block per run of equal-width conv
    layers, then one block per affine layer. ``arch['blocks']`` overrides.
    """
    if arch.get("blocks"):
        return list(arch["blocks"])
    sizes = []
    prev = None
    for spec in arch["layers"]:
        if spec["kind"] == CONV2D and prev is not None and spec["out"] == prev:
            sizes[-1] += 1
        else:
            sizes.append(1)
        prev = spec["out"] if spec["kind"] == CONV2D else None
    return sizes


# ---------------------------------------------------------------------------
# layers and network


@dataclass(eq=False)
class MaskedLayer:
    name: str
    kind: str
    weights: np.ndarray
    mask: np.ndarray
    bias: np.ndarray
    sparsity: float = 0.0
    frozen: bool = False
    paused: bool = False
    stride: int = 1
    padding: int = 0
    in_shape: tuple = ()
    out_shape: tuple = ()

    @property
    def size(self):
        return self.weights.size

    @property
    def nnz(self):
        return int(np.count_nonzero(self.mask))

    @property
    def current_sparsity(self):
        return 1.0 - self.nnz / self.size

    @property
    def dense(self):
        """Layers with zero target sparsity are never masked by the DST engine."""
        return self.sparsity == 0

    @property
    def trainable(self):
        return not (self.frozen or self.paused)

    @property
    def positions(self):
        """Output positions per sample each weight is applied at (1 for affine)."""
        if self.kind == CONV2D:
            return self.out_shape[1] * self.out_shape[2]
        return 1

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.weights, self.mask, self.bias):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def apply_mask(layer):
    """Zero the weights at masked positions."""
    layer.weights[~layer.mask] = 0


@dataclass(eq=False)
class Block:
    index: int
    layers: list
    freeze_epoch: int | None = None

    @property
    def frozen(self):
        return all(l.frozen for l in self.layers)

    @property
    def active(self):
        return all(l.trainable for l in self.layers)


@dataclass(eq=False)
class SparseNetwork:
    arch: dict
    layers: list
    blocks: list
    sparsity: float
    dtype: type = np.float32
    layer_targets: list = field(default_factory=list)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def block_of(self, layer):
        for b in self.blocks:
            if layer in b.layers:
                return b.index
        raise KeyError(layer.name)

    def frozen_prefix(self):
        """Number of leading inactive (frozen or paused) blocks."""
        k = 0
        for b in self.blocks:
            if b.active:
                break
            k += 1
        return k

    def inactive_is_prefix(self):
        k = self.frozen_prefix()
        return all(b.active for b in self.blocks[k:])

    # -- forward -----------------------------------------------------------

    def forward(self, x, collect=False):
        """Forward ``x`` (ndarray ``[B, *input]``).

        Returns ``(logits Tensor, params)`` where ``params`` maps layer name to
        its ``(weight Tensor, bias Tensor)``; with ``collect`` also a list of
        per-layer output arrays (post-activation).
        """
        x = np.asarray(x, dtype=self.dtype)
        inp = tuple(self.arch["input"])
        if x.shape[1:] != inp:
            x = x.reshape((x.shape[0],) + inp)
        h = T.Tensor(x)
        params = {}
        acts = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            train = layer.trainable
            w = T.Tensor(layer.weights, requires_grad=train, name=layer.name)
            b = T.Tensor(layer.bias, requires_grad=train, name=layer.name + ".bias")
            params[layer.name] = (w, b)
            w_eff = w if layer.dense else T.masked(w, layer.mask)
            if layer.kind == CONV2D:
                h = T.conv2d(h, w_eff, b, layer.stride, layer.padding)
            else:
                if h.ndim > 2:
                    h = T.global_avg_pool(h) if self.arch.get("head") == "gap" else T.flatten(h)
                h = T.affine(h, w_eff, b)
            if i < last:
                h = T.relu(h)
            if collect:
                acts.append(h.data)
        if collect:
            return h, params, acts
        return h, params

    def predict(self, x, batch_size=1024):
        out = []
        for i in range(0, len(x), batch_size):
            logits, _ = self.forward(x[i:i + batch_size])
            out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def loss_and_grads(self, x, y):
        """One taped forward/backward pass.

        Returns ``(loss, logits, grads)``; ``grads`` maps the name of every
        trainable layer to ``(weight_grad, bias_grad)``, masked.
        """
        with T.Tape() as tape:
            logits, params = self.forward(x)
            loss = T.softmax_cross_entropy(logits, y)
        raw = tape.backward(loss) if loss.requires_grad else {}
        grads = {}
        for layer in self.layers:
            if not layer.trainable:
                continue
            w, b = params[layer.name]
            gw = raw.get(w)
            gb = raw.get(b)
            grads[layer.name] = (np.zeros_like(layer.weights) if gw is None else gw,
                                 np.zeros_like(layer.bias) if gb is None else gb)
        return float(loss.data), logits.data, grads


def build_network(arch, sparsity, layers, blocks=None, dtype=np.float32):
    sizes = blocks or default_blocks(arch)
    if sum(sizes) != len(layers) or any(s <= 0 for s in sizes):
        raise ConfigError(f"block sizes {sizes} do not partition {len(layers)} layers", "sparse-model")
    out, start = [], 0
    for i, n in enumerate(sizes):
        out.append(Block(i, layers[start:start + n]))
        start += n
    return SparseNetwork(arch=arch, layers=layers, blocks=out, sparsity=sparsity, dtype=dtype,
                         layer_targets=[l.sparsity for l in layers])


def init_random_sparse(arch, s, seed, dtype=np.float32, first_layer_dense=True, blocks=None):
    """Random sparse network at uniform sparsity ``s``.

    Each masked layer keeps exactly ``keep_count(size, s)`` uniformly chosen
    positions. Weights use fan-in scaled uniform init on the dense tensor
    before masking; biases start at zero.
    """
    check_sparsity(s)
    if isinstance(arch, str):
        arch = parse_arch(arch)
    rng = np.random.default_rng(seed)
    layers = []
    for i, (spec, wshape, in_shape, out_shape) in enumerate(layer_shapes(arch)):
        fan_in = wshape[0] if spec["kind"] == AFFINE else int(np.prod(wshape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        weights = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        target = 0.0 if (i == 0 and first_layer_dense) else float(s)
        mask = np.zeros(weights.size, dtype=bool)
        mask[rng.choice(weights.size, keep_count(weights.size, target), replace=False)] = True
        mask = mask.reshape(wshape)
        nbias = wshape[0] if spec["kind"] == CONV2D else wshape[1]
        layer = MaskedLayer(
            name=f"{spec['kind']}{i}", kind=spec["kind"], weights=weights, mask=mask,
            bias=np.zeros(nbias, dtype=dtype), sparsity=target,
            stride=spec.get("stride", 1), padding=spec.get("padding", 0),
            in_shape=tuple(in_shape), out_shape=tuple(out_shape))
        apply_mask(layer)
        layers.append(layer)
    return build_network(arch, float(s), layers, blocks, dtype)
