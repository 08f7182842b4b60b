"""Binarization primitives: sign with straight-through gradients, Bernoulli
feature sampling, and bit-exact xnor-popcount convolution on packed words.

Packed layout: logical value +1 maps to bit 1, -1 to bit 0; words are 64-bit
and little-endian within the word stream (bit k of word j holds element
64*j + k), with bits past the logical length forced to zero.  Spatial padding
in the bitpacked convolution is therefore all-zero words, i.e. logical -1;
the float path pads binarized layers with -1 so the two agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor

_WORD_BITS = 64


def sign_ste(x: Tensor) -> Tensor:
    """Elementwise sign into {-1,+1} (zero maps to +1) with a clipped
    straight-through backward: upstream gradient passes where |x| <= 1."""
    x = as_tensor(x)
    out_data = np.where(x.data >= 0, 1.0, -1.0).astype(x.dtype)
    window = np.abs(x.data) <= 1.0

    def bw(g):
        if x.requires_grad:
            x._accum(g * window)

    return Tensor._node(out_data, (x,), bw)


@dataclass
class FeatureDistribution:
    """Per-element probability that the corresponding feature bit is +1."""

    p: Tensor

    def __post_init__(self):
        pd = self.p.data if isinstance(self.p, Tensor) else np.asarray(self.p)
        if pd.size and (pd.min() < 0.0 or pd.max() > 1.0):
            raise ValueError("FeatureDistribution: probabilities must lie in [0, 1]")


def bernoulli_st_sample(dist: FeatureDistribution | Tensor,
                        rng: np.random.Generator) -> Tensor:
    """Draw a {-1,+1} sample, +1 with probability p per element.

    The backward rule is the straight-through surrogate for the expectation
    2p - 1: upstream gradient g becomes 2g on p.
    """
    p = dist.p if isinstance(dist, FeatureDistribution) else as_tensor(dist)
    u = rng.random(p.shape)
    out_data = np.where(u < p.data, 1.0, -1.0).astype(p.dtype)

    def bw(g):
        if p.requires_grad:
            p._accum(2.0 * g)

    return Tensor._node(out_data, (p,), bw)


# -- packed-bit containers -----------------------------------------------------


@dataclass
class PackedBits:
    """Sign tensor packed into 64-bit words along one logical axis.

    `words` carries the word stream on its last axis; `n` is the logical
    length of the packed axis; `shape` is the unpacked tensor shape; `axis`
    is the packed axis (None means the whole tensor was flattened).
    Trailing bits beyond `n` in the last word are zero.
    """

    words: np.ndarray
    n: int
    shape: tuple[int, ...]
    axis: int | None = None

    @property
    def n_words(self) -> int:
        return self.words.shape[-1]


def _word_count(n: int) -> int:
    return (n + _WORD_BITS - 1) // _WORD_BITS


def _tail_mask(n: int) -> np.ndarray:
    """uint64 mask per word with exactly the first n bits of the stream set."""
    nw = _word_count(n)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = n % _WORD_BITS
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


def _pack_last_axis(values: np.ndarray) -> np.ndarray:
    """Pack a {-1,+1} array into uint64 words along its last axis."""
    bits = (values > 0).astype(np.uint8)
    n = bits.shape[-1]
    pad = (-n) % (_WORD_BITS)
    if pad:
        bits = np.concatenate(
            [bits, np.zeros(bits.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(np.uint64)


def _unpack_last_axis(words: np.ndarray, n: int) -> np.ndarray:
    bytes_ = np.ascontiguousarray(words).view(np.uint8)
    bits = np.unpackbits(bytes_, axis=-1, bitorder="little")[..., :n]
    return np.where(bits > 0, 1.0, -1.0).astype(np.float32)


def _require_pm1(x: np.ndarray) -> None:
    if not np.all(np.abs(x) == 1.0):
        raise ValueError("bitpack: every entry must be exactly +1 or -1")


def bitpack(x: Tensor | np.ndarray) -> PackedBits:
    """Pack a {-1,+1} tensor row-major into a flat word stream."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    _require_pm1(data)
    flat = data.reshape(1, -1)
    return PackedBits(words=_pack_last_axis(flat)[0], n=data.size,
                      shape=data.shape, axis=None)


def unpack(pb: PackedBits) -> np.ndarray:
    """Inverse of the packing routines; returns a float32 {-1,+1} array."""
    if pb.axis is None:
        return _unpack_last_axis(pb.words.reshape(1, -1), pb.n)[0].reshape(pb.shape)
    values = _unpack_last_axis(pb.words, pb.n)
    return np.moveaxis(values, -1, pb.axis).reshape(pb.shape)


def pack_channels_nchw(x: Tensor | np.ndarray) -> PackedBits:
    """Pack an NCHW sign tensor along C: words indexed (N, H, W, word)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if data.ndim != 4:
        raise ValueError(f"pack_channels_nchw: expected NCHW, got shape {data.shape}")
    _require_pm1(data)
    moved = np.moveaxis(data, 1, -1)
    return PackedBits(words=_pack_last_axis(moved), n=data.shape[1],
                      shape=data.shape, axis=1)


def pack_filters_oihw(w: Tensor | np.ndarray) -> PackedBits:
    """Pack an OIHW sign weight along I: words indexed (O, kh, kw, word)."""
    data = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float32)
    if data.ndim != 4:
        raise ValueError(f"pack_filters_oihw: expected OIHW, got shape {data.shape}")
    _require_pm1(data)
    moved = np.moveaxis(data, 1, -1)
    return PackedBits(words=_pack_last_axis(moved), n=data.shape[1],
                      shape=data.shape, axis=1)


def xnor_popcount_dot(a: PackedBits, b: PackedBits) -> int:
    """Sum a_i * b_i over {-1,+1} vectors as 2*popcount(xnor) - n."""
    if a.axis is not None or b.axis is not None:
        raise ValueError("xnor_popcount_dot expects flat-packed operands")
    if a.n != b.n:
        raise ValueError(f"xnor_popcount_dot: length mismatch {a.n} vs {b.n}")
    mask = _tail_mask(a.n)
    matches = int(np.bitwise_count(~(a.words ^ b.words) & mask).sum())
    return 2 * matches - a.n


def binary_conv2d_bitpacked(inp: PackedBits, weight: PackedBits,
                            stride: int = 1, pad: int = 0) -> np.ndarray:
    """Bitpacked convolution, integer-exact against the float path on the
    unpacked {-1,+1} tensors (spatial padding contributes logical -1).

    Returns int32 NCHW counts in [-C*kh*kw, C*kh*kw].
    """
    if inp.axis != 1 or weight.axis != 1:
        raise ValueError("binary_conv2d_bitpacked expects channel-packed operands")
    n, c, h, w = inp.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ValueError(f"binary_conv2d_bitpacked: input has {c} channels "
                         f"but weight expects {i}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"binary_conv2d_bitpacked: non-positive output extent "
                         f"{ho}x{wo}")

    aw = inp.words  # (N, H, W, nw)
    if pad > 0:
        aw = np.pad(aw, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    mask = _tail_mask(c)
    ww = weight.words  # (O, kh, kw, nw)

    matches = np.zeros((n, ho, wo, o), dtype=np.int64)
    for dy in range(kh):
        for dx in range(kw):
            a = aw[:, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride, :]
            x = a[:, :, :, None, :] ^ ww[None, None, None, :, dy, dx, :]
            matches += np.bitwise_count(~x & mask).sum(axis=-1, dtype=np.int64)
    out = 2 * matches - c * kh * kw
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(np.int32)
