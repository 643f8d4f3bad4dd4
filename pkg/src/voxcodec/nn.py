"""Generalized sparse convolution engine.

Convolutions are evaluated only at prescribed output coordinates via
offset-indexed gather/scatter (kernel maps).  Stride-1 kernels use centered
offsets; stride-2 kernels use the {0,1}^3 corner convention so downsampled
coordinate sets are exactly the floor-division sets and transposed
convolutions target prescribed coordinate sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ContractViolation
from .sparse import SparseTensor, pack_keys, stride_down_coords


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    transposed: bool = False

    def __post_init__(self):
        if self.kernel_size not in (1, 2, 3):
            raise ContractViolation(f"kernel_size {self.kernel_size} unsupported")
        if self.stride not in (1, 2):
            raise ContractViolation(f"stride {self.stride} unsupported")
        if self.stride == 2 and self.kernel_size != 2:
            raise ContractViolation("stride-2 convolutions use kernel_size 2")
        if self.transposed and (self.stride != 2 or self.kernel_size != 2):
            raise ContractViolation("transposed convolutions are stride-2 kernel-2")

    def offsets(self) -> np.ndarray:
        """Kernel offsets in lexicographic order; defines the weight layout."""
        if self.kernel_size == 1:
            rng = (0,)
        elif self.kernel_size == 2:
            rng = (0, 1)
        else:
            rng = (-1, 0, 1)
        return np.array(list(product(rng, rng, rng)), dtype=np.int64)

    @property
    def weight_shape(self):
        return (len(self.offsets()), self.in_channels, self.out_channels)


class KernelMap:
    """Per-kernel-offset (input_row, output_row) index pair lists."""

    __slots__ = ("pairs", "n_in", "n_out")

    def __init__(self, pairs, n_in, n_out):
        self.pairs = pairs
        self.n_in = n_in
        self.n_out = n_out


def build_kernel_map(in_coords, out_coords, spec: ConvSpec) -> KernelMap:
    """Pair input and output rows for every kernel offset.

    forward stride-1:  (i, j) iff in[i] == out[j] + offset
    forward stride-2:  (i, j) iff in[i] == 2*out[j] + offset, offset in {0,1}^3
    transposed:        (i, j) iff out[j] == 2*in[i] + offset, offset in {0,1}^3
    """
    in_coords = np.asarray(in_coords, dtype=np.int64).reshape(-1, 3)
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    if not spec.transposed and spec.stride == 2:
        expect = stride_down_coords(in_coords)
        if expect.shape != out_coords.shape or not np.array_equal(expect, out_coords):
            raise ContractViolation("stride-2 output coordinates must be the floor-div set")
    offsets = spec.offsets()
    pairs = []
    if spec.transposed:
        out_keys = pack_keys(out_coords)
        base = 2 * in_coords
        src_rows = np.arange(in_coords.shape[0])
        for off in offsets:
            keys = pack_keys(base + off)
            j = np.searchsorted(out_keys, keys)
            j = np.minimum(j, max(out_keys.size - 1, 0))
            hit = (out_keys.size > 0) & (out_keys[j] == keys) if out_keys.size else np.zeros(len(keys), bool)
            pairs.append((src_rows[hit], j[hit]))
    else:
        in_keys = pack_keys(in_coords)
        dst_rows = np.arange(out_coords.shape[0])
        base = out_coords if spec.stride == 1 else 2 * out_coords
        for off in offsets:
            keys = pack_keys(base + off)
            i = np.searchsorted(in_keys, keys)
            i = np.minimum(i, max(in_keys.size - 1, 0))
            hit = (in_keys.size > 0) & (in_keys[i] == keys) if in_keys.size else np.zeros(len(keys), bool)
            pairs.append((i[hit], dst_rows[hit]))
    return KernelMap(pairs, in_coords.shape[0], out_coords.shape[0])


def _out_scale(spec: ConvSpec, in_scale: int) -> int:
    if spec.transposed:
        return in_scale - 1
    if spec.stride == 2:
        return in_scale + 1
    return in_scale


def sparse_conv(
    x: SparseTensor,
    spec: ConvSpec,
    weight: np.ndarray,
    bias=None,
    out_coords=None,
    kmap: KernelMap | None = None,
) -> SparseTensor:
    """Generalized sparse convolution.

    out[j] = bias + sum over offsets o and pairs (i, j) of x[i] @ weight[o].
    Output rows with no contributing pairs equal the bias.
    """
    weight = np.asarray(weight)
    if weight.shape != spec.weight_shape:
        raise ContractViolation(f"weight shape {weight.shape} != {spec.weight_shape}")
    if x.channels != spec.in_channels:
        raise ContractViolation(f"input channels {x.channels} != {spec.in_channels}")
    if out_coords is None:
        if spec.transposed:
            raise ContractViolation("transposed convolution requires target coordinates")
        out_coords = x.coords if spec.stride == 1 else stride_down_coords(x.coords)
    out_coords = np.asarray(out_coords, dtype=np.int32).reshape(-1, 3)
    if kmap is None:
        kmap = build_kernel_map(x.coords, out_coords, spec)
    dtype = x.feats.dtype
    w = weight.astype(dtype, copy=False)
    out = np.zeros((out_coords.shape[0], spec.out_channels), dtype=dtype)
    if bias is not None:
        out += np.asarray(bias, dtype=dtype)
    for o, (i_idx, j_idx) in enumerate(kmap.pairs):
        if i_idx.size:
            # within one offset each output row appears at most once
            out[j_idx] += x.feats[i_idx] @ w[o]
    return SparseTensor(out_coords, out, _out_scale(spec, x.scale), _trusted=True)


def sparse_conv_backward(x: SparseTensor, spec: ConvSpec, weight, kmap: KernelMap, grad_out):
    """Analytic gradients of sparse_conv w.r.t. input features, weight, bias."""
    weight = np.asarray(weight, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    feats = x.feats.astype(np.float64, copy=False)
    grad_in = np.zeros_like(feats)
    grad_w = np.zeros_like(weight)
    for o, (i_idx, j_idx) in enumerate(kmap.pairs):
        if i_idx.size:
            grad_in[i_idx] += grad_out[j_idx] @ weight[o].T
            grad_w[o] = feats[i_idx].T @ grad_out[j_idx]
    grad_b = grad_out.sum(axis=0)
    return grad_in, grad_w, grad_b


class _PrefixView:
    """Dotted-prefix view over any name->tensor mapping."""

    __slots__ = ("_w", "_prefix")

    def __init__(self, w, prefix):
        self._w = w
        self._prefix = prefix

    def __getitem__(self, name):
        return self._w[f"{self._prefix}.{name}"]


def prefixed(w, prefix: str) -> _PrefixView:
    return _PrefixView(w, prefix)


def relu(x: SparseTensor) -> SparseTensor:
    return x.with_feats(np.maximum(x.feats, 0))


def _conv(x, w, name, spec, out_coords=None):
    return sparse_conv(x, spec, w[name + ".weight"], w[name + ".bias"], out_coords)


def irn_block(x: SparseTensor, w) -> SparseTensor:
    """Channel-preserving inception-residual block: x + concat of three branches.

    Branches on O input channels: (1x1 -> O/4, 3x3 -> O/4),
    (3x3 -> O/4, 3x3 -> O/4), (1x1 -> O/2).  Coordinates unchanged.
    """
    o = x.channels
    if o % 4:
        raise ContractViolation(f"IRN channels ({o}) must be divisible by 4")
    q, h = o // 4, o // 2
    b0 = _conv(x, w, "b0c1", ConvSpec(o, q, 1))
    b0 = _conv(b0, w, "b0c2", ConvSpec(q, q, 3))
    b1 = _conv(x, w, "b1c1", ConvSpec(o, q, 3))
    b1 = _conv(b1, w, "b1c2", ConvSpec(q, q, 3))
    b2 = _conv(x, w, "b2c1", ConvSpec(o, h, 1))
    inception = np.concatenate([b0.feats, b1.feats, b2.feats], axis=1)
    return x.with_feats(x.feats + inception)


def rn_block(x: SparseTensor, w) -> SparseTensor:
    """Residual block: x + conv3(relu(conv3(x))).  Coordinates unchanged."""
    c = x.channels
    y = _conv(x, w, "c1", ConvSpec(c, c, 3))
    y = _conv(relu(y), w, "c2", ConvSpec(c, c, 3))
    return x.with_feats(x.feats + y.feats)


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def classify_occupancy(x: SparseTensor, w) -> np.ndarray:
    """Per-voxel occupation probability: logistic of a 1x1 conv to one channel."""
    spec = ConvSpec(x.channels, 1, 1)
    logits = sparse_conv(x, spec, w["weight"], w["bias"]).feats[:, 0]
    return _sigmoid(logits.astype(np.float64))


def adaptive_prune(x: SparseTensor, probs: np.ndarray, keep: int) -> SparseTensor:
    """Retain the min(keep, N) most probable voxels.

    Ties break toward lexicographically smaller coordinates (stable order of
    the sorted input).  Output stays lex-sorted.
    """
    if keep < 0:
        raise ContractViolation("keep must be >= 0")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (x.n,):
        raise ContractViolation("probability vector length mismatch")
    m = min(int(keep), x.n)
    order = np.argsort(-probs, kind="stable")[:m]
    order = np.sort(order)
    return SparseTensor(x.coords[order], x.feats[order], x.scale, _trusted=True)
