"""Squeeze-and-excitation fusion of modality feature vectors.

Each modality is squeezed to one scalar by a dense map, the scalars pass
through a bottlenecked ReLU/sigmoid gate to give one weight per modality,
and the concatenated features, reshaped row-major into one row per modality,
are combined as ``s @ X'``.

Features are row vectors (``1 x D``), so a dense layer computes ``x @ W``.
All functions also accept a batch of rows (``N x D``); every row is fused
independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .numerics import (
    Parameter,
    Tensor,
    affine,
    concat_cols,
    constant,
    glorot_uniform,
    matmul,
    mix_rows,
    relu,
    reshape,
    resolve_dtype,
    sigmoid,
)

TEXT_DIM = 768
IMAGE_DIM = 512


def bottleneck_width(n_modalities: int) -> int:
    return math.ceil(n_modalities / 2)


@dataclass
class FusionParams:
    """Squeeze maps (one per modality) and the two excitation maps.

    With two modalities the squeeze maps are ``W1`` (Dt x 1) and ``W2``
    (Di x 1), ``W3`` is 2 x 1 and ``W4`` is 1 x 2.
    """

    dims: tuple[int, ...]
    squeeze_w: list[Parameter]
    squeeze_b: list[Parameter | None]
    W3: Parameter
    b3: Parameter | None
    W4: Parameter
    b4: Parameter | None

    def __post_init__(self):
        m = len(self.dims)
        if m < 1 or any(d < 1 for d in self.dims):
            raise ShapeError(f"modality widths must be positive, got {self.dims}")
        if sum(self.dims) % m:
            raise ShapeError(f"total width {sum(self.dims)} is not divisible by {m} modalities")
        for d, w in zip(self.dims, self.squeeze_w):
            if w.shape != (d, 1):
                raise ShapeError(f"squeeze map {w.name} must be ({d}x1), got {w.shape}")
        h = bottleneck_width(m)
        if self.W3.shape != (m, h) or self.W4.shape != (h, m):
            raise ShapeError(f"excitation maps must be ({m}x{h}) and ({h}x{m}), got {self.W3.shape} and {self.W4.shape}")

    @property
    def n_modalities(self) -> int:
        return len(self.dims)

    @property
    def fused_width(self) -> int:
        return sum(self.dims) // len(self.dims)

    @property
    def biases(self) -> bool:
        return self.b3 is not None

    @property
    def W1(self) -> Parameter:
        return self.squeeze_w[0]

    @property
    def W2(self) -> Parameter:
        return self.squeeze_w[1]

    @property
    def b1(self) -> Parameter | None:
        return self.squeeze_b[0]

    @property
    def b2(self) -> Parameter | None:
        return self.squeeze_b[1]

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.squeeze_w, self.squeeze_b):
            out.append(w)
            if b is not None:
                out.append(b)
        for p in (self.W3, self.b3, self.W4, self.b4):
            if p is not None:
                out.append(p)
        return out


def init_fusion_params(
    dims: Sequence[int] = (TEXT_DIM, IMAGE_DIM),
    *,
    biases: bool = True,
    rng: np.random.Generator | None = None,
    precision="float32",
) -> FusionParams:
    """Glorot-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = resolve_dtype(precision)
    dims = tuple(int(d) for d in dims)
    m = len(dims)
    if m < 1 or sum(dims) % m:
        raise ShapeError(f"total width {sum(dims)} is not divisible by {m} modalities")
    h = bottleneck_width(m)

    def bias(name, width):
        return Parameter(np.zeros((1, width), dtype=dtype), name) if biases else None

    squeeze_w = [Parameter(glorot_uniform(rng, d, 1, dtype), f"fusion.W{k + 1}" if m == 2 else f"fusion.Wsq{k}") for k, d in enumerate(dims)]
    squeeze_b = [bias(f"fusion.b{k + 1}" if m == 2 else f"fusion.bsq{k}", 1) for k in range(m)]
    return FusionParams(
        dims=dims,
        squeeze_w=squeeze_w,
        squeeze_b=squeeze_b,
        W3=Parameter(glorot_uniform(rng, m, h, dtype), "fusion.W3"),
        b3=bias("fusion.b3", h),
        W4=Parameter(glorot_uniform(rng, h, m, dtype), "fusion.W4"),
        b4=bias("fusion.b4", m),
    )


@dataclass
class FusionTrace:
    """Intermediate values of one fusion pass.

    ``z`` holds the squeezed scalars, ``s`` the modality weights, ``concat``
    the joined features and ``fused`` the output. ``reshaped`` is the
    (m x D/m) view and is only materialised for a single sample.
    """

    z: Tensor
    s: Tensor
    concat: Tensor
    reshaped: Tensor | None
    fused: Tensor


def _check_widths(features: Sequence, p: FusionParams) -> list[Tensor]:
    dtype = p.W3.dtype
    xs = [constant(f, dtype) for f in features]
    if len(xs) != p.n_modalities:
        raise ShapeError(f"expected {p.n_modalities} modalities, got {len(xs)}")
    for k, (x, d) in enumerate(zip(xs, p.dims)):
        if x.cols != d:
            raise ShapeError(f"modality {k} has width {x.cols}, expected {d}")
    if len({x.rows for x in xs}) != 1:
        raise ShapeError("modalities disagree on the number of samples")
    return xs


def squeeze_multi(features: Sequence, p: FusionParams) -> Tensor:
    xs = _check_widths(features, p)
    return concat_cols(*(affine(x, w, b) for x, w, b in zip(xs, p.squeeze_w, p.squeeze_b)))


def squeeze(xt, xi, p: FusionParams) -> Tensor:
    """z = [xt @ W1 (+b1), xi @ W2 (+b2)]."""
    return squeeze_multi([xt, xi], p)


def excite(z, p: FusionParams) -> Tensor:
    """s = sigmoid(relu(z @ W3 (+b3)) @ W4 (+b4))."""
    z = constant(z, p.W3.dtype)
    if z.cols != p.n_modalities:
        raise ShapeError(f"excite expects {p.n_modalities} squeezed values per sample, got {z.cols}")
    return sigmoid(affine(relu(affine(z, p.W3, p.b3)), p.W4, p.b4))


def fuse_multi(features: Sequence, s) -> tuple[Tensor, Tensor | None, Tensor]:
    xs = [constant(f) for f in features]
    s = constant(s, xs[0].dtype if xs else None)
    m = s.cols
    x = concat_cols(*xs)
    if x.cols % m:
        raise ShapeError(f"total width {x.cols} cannot be reshaped into {m} rows")
    if x.rows == 1:
        xr = reshape(x, m, x.cols // m)
        return x, xr, matmul(s, xr)
    return x, None, mix_rows(s, x)


def fuse(xt, xi, s) -> Tensor:
    """``s @ reshape(concat(xt, xi), 2, (Dt+Di)/2)``.

    The reshape is row-major, so with 768 + 512 inputs the first row is text
    features 0..639 and the second row is text 640..767 followed by the image.
    """
    return fuse_multi([xt, xi], s)[2]


def sefusion_forward_multi(features: Sequence, p: FusionParams) -> FusionTrace:
    xs = _check_widths(features, p)
    z = squeeze_multi(xs, p)
    s = excite(z, p)
    x, xr, fused = fuse_multi(xs, s)
    return FusionTrace(z=z, s=s, concat=x, reshaped=xr, fused=fused)


def sefusion_forward(xt, xi, p: FusionParams) -> FusionTrace:
    if p.n_modalities != 2:
        raise ShapeError(f"two-modality fusion called with parameters for {p.n_modalities}")
    return sefusion_forward_multi([xt, xi], p)
