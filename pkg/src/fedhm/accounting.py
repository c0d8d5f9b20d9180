"""Parameter, MAC and communication accounting.

Per-layer closed forms:

=================  ==============  ===================
layer              parameters      MACs
=================  ==============  ===================
dense              m*n (+n bias)   m*n
factorized dense   r*(m+n) (+n)    r*(m+n)
conv               m*n*k^2         m*n*k^2*H*W
factorized conv    r*k*(m+n)       r*k*H*W*(m+n)
batch norm         2*channels      0
=================  ==============  ===================

H and W are the layer's output spatial extents.
"""
from __future__ import annotations

from fractions import Fraction

from . import modelspec as ms

BYTES_PER_PARAM = 4
WIRE_HEADER_BYTES = 0  # no framing overhead is modeled


def dense_params(m: int, n: int) -> int:
    return m * n


def factorized_dense_params(m: int, n: int, r: int) -> int:
    return r * (m + n)


def conv_params(m: int, n: int, k: int) -> int:
    return m * n * k * k


def factorized_conv_params(m: int, n: int, k: int, r: int) -> int:
    return r * k * (m + n)


def conv_macs(m: int, n: int, k: int, H: int, W: int) -> int:
    return m * n * k * k * H * W


def factorized_conv_macs(m: int, n: int, k: int, r: int, H: int, W: int) -> int:
    return r * k * H * W * (m + n)


def layer_params(l: ms.LayerSpec) -> int:
    m, n, k, r = l.in_ch, l.out_ch, l.kernel, l.rank
    bias = n if l.bias else 0
    if l.kind == ms.DENSE:
        return dense_params(m, n) + bias
    if l.kind == ms.FDENSE:
        return factorized_dense_params(m, n, r) + bias
    if l.kind == ms.CONV:
        return conv_params(m, n, k) + bias
    if l.kind == ms.FCONV:
        return factorized_conv_params(m, n, k, r) + bias
    if l.kind == ms.BN:
        return 2 * l.in_ch
    return 0


def count_params(spec_or_model) -> int:
    """Trainable parameter count (batch-norm running statistics excluded)."""
    spec = spec_or_model.spec if isinstance(spec_or_model, ms.Model) else spec_or_model
    return sum(layer_params(l) for l in spec.layers)


def count_macs(spec_or_model, input_shape: tuple | None = None) -> int:
    """Forward multiply-accumulates for a single sample."""
    spec = spec_or_model.spec if isinstance(spec_or_model, ms.Model) else spec_or_model
    if input_shape is not None and tuple(input_shape) != tuple(spec.input_shape):
        spec = ms.ModelSpec(spec.name, tuple(input_shape), spec.classes, spec.layers)
    total = 0
    for l, out in zip(spec.layers, ms.output_shapes(spec)):
        m, n, k, r = l.in_ch, l.out_ch, l.kernel, l.rank
        if l.kind == ms.DENSE:
            total += m * n
        elif l.kind == ms.FDENSE:
            total += r * (m + n)
        elif l.kind == ms.CONV:
            total += conv_macs(m, n, k, out[1], out[2])
        elif l.kind == ms.FCONV:
            total += factorized_conv_macs(m, n, k, r, out[1], out[2])
    return total


def comm_bytes(spec_or_model) -> int:
    """Bytes for one model transfer: 32-bit payload plus WIRE_HEADER_BYTES."""
    return BYTES_PER_PARAM * count_params(spec_or_model) + WIRE_HEADER_BYTES


def comm_ratio(hybrid, full) -> Fraction:
    return Fraction(count_params(hybrid), count_params(full))


def layer_ratio(l: ms.LayerSpec) -> Fraction:
    """Factorized-to-full parameter ratio of one weight layer (bias excluded)."""
    m, n, k, r = l.in_ch, l.out_ch, l.kernel, l.rank
    if l.kind == ms.FCONV:
        return Fraction(factorized_conv_params(m, n, k, r), conv_params(m, n, k))
    if l.kind == ms.FDENSE:
        return Fraction(factorized_dense_params(m, n, r), dense_params(m, n))
    return Fraction(1)
