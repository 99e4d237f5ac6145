"""Dynamic multi-branch feature fusion with a decoupled large receptive field.

A target receptive field R (odd, >= 3) is reached by stacking (R-1)/2
submanifold k=3 convolutions instead of one monolithic k=R kernel; stacking
grows the receptive field linearly while costing far fewer multiply-adds per
site. Each stage output F_n is kept as a branch. Channel-pooled statistics of
the concatenated branches feed a small attention conv whose sigmoid output
gates each branch per site; the gated sum passes through a 1x1x1 conv and a
residual connection back to the input:

    F_1 = act(C_1(X)),  F_n = act(C_n(F_{n-1}))
    W    = sigmoid(C_attn([mean_c(F); max_c(F)]))
    Y    = C_out(sum_n W_n * F_n) + X

All convolutions are submanifold, so the active set never changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .convs import ConvParams, init_conv
from .errors import (
    EmptySpecError,
    InvalidReceptiveFieldError,
    NonSubmanifoldStageError,
    ShapeMismatchError,
)
from .sparse import Rulebook, SparseTensor, build_rulebook

# A kernel spec is a sequence of (kernel_size, dilation, stride) stages.
KernelSpec = tuple[int, int, int]


def receptive_field(spec: list[KernelSpec]) -> int:
    """Receptive field of a stacked conv sequence.

    RF_1 = k_1 and RF_i = RF_{i-1} + d_i * s_i * (k_i - 1); plain k=3 stages
    therefore add 2 each.
    """
    if not spec:
        raise EmptySpecError("kernel spec must contain at least one stage")
    rf = 0
    for i, (k, d, s) in enumerate(spec):
        if k < 1 or d < 1 or s < 1:
            raise InvalidReceptiveFieldError(f"invalid stage (k={k}, d={d}, s={s})")
        rf = k if i == 0 else rf + d * s * (k - 1)
    return rf


def decouple_kernel(target_rf: int) -> list[KernelSpec]:
    """Equivalent-receptive-field stack of k=3 stages for an odd target >= 3."""
    if target_rf < 3 or target_rf % 2 == 0:
        raise InvalidReceptiveFieldError(
            f"target receptive field must be odd and >= 3, got {target_rf}"
        )
    return [(3, 1, 1)] * ((target_rf - 1) // 2)


def channel_pool(tensor: SparseTensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-site channel mean and max of a sparse tensor: two (N,) vectors."""
    if tensor.channels == 0:
        raise ShapeMismatchError("channel pooling requires at least one channel")
    if tensor.num_active == 0:
        return np.zeros(0), np.zeros(0)
    return tensor.features.mean(axis=1), tensor.features.max(axis=1)


@dataclass
class DffmParams:
    """Stage convs (k=3 submanifold, c->c), the 2->n attention conv, and the
    1x1x1 output conv. Stage convs are bias-free; attention and output convs
    carry biases (zero-initialized)."""

    stage_convs: list[ConvParams]
    attention_conv: ConvParams
    out_conv: ConvParams
    activation: str = "silu"

    @property
    def num_stages(self) -> int:
        return len(self.stage_convs)

    @property
    def channels(self) -> int:
        return self.stage_convs[0].c_in

    def validate(self, channels: int) -> None:
        if not self.stage_convs:
            raise EmptySpecError("fusion requires at least one stage conv")
        for conv in self.stage_convs + [self.attention_conv]:
            if conv.mode != "submanifold" or conv.stride != 1:
                raise NonSubmanifoldStageError(
                    "fusion stages must be stride-1 submanifold convolutions"
                )
        for conv in self.stage_convs:
            if conv.c_in != channels or conv.c_out != channels:
                raise ShapeMismatchError(
                    f"stage conv is {conv.c_in}->{conv.c_out}, expected {channels}->{channels}"
                )
        n = self.num_stages
        if self.attention_conv.c_in != 2 or self.attention_conv.c_out != n:
            raise ShapeMismatchError(
                f"attention conv is {self.attention_conv.c_in}->"
                f"{self.attention_conv.c_out}, expected 2->{n}"
            )
        if self.out_conv.kernel_size != 1 or self.out_conv.c_in != channels:
            raise ShapeMismatchError("output conv must be 1x1x1 over the stage channels")
        if self.attention_conv.bias is None or self.out_conv.bias is None:
            raise ShapeMismatchError("attention and output convs must carry biases")


def init_dffm(
    rng: np.random.Generator, channels: int, target_rf: int, activation: str = "silu"
) -> DffmParams:
    """Initialize fusion parameters for `channels` with the decoupled stack."""
    spec = decouple_kernel(target_rf)
    stages = [init_conv(rng, k, channels, channels) for (k, _, _) in spec]
    attention = init_conv(rng, 3, 2, len(spec), bias=True)
    out = init_conv(rng, 1, channels, channels, bias=True)
    return DffmParams(stages, attention, out, activation)


def dffm_nodes(
    tape: Tape,
    feats: Node,
    rulebook: Rulebook,
    params: DffmParams,
    prefix: str = "dffm",
) -> Node:
    """Tape-level fusion forward over a shared k=3 submanifold rulebook."""
    branches: list[Node] = []
    h = feats
    for i, conv in enumerate(params.stage_convs):
        w = tape.param(f"{prefix}.stage{i}.w", conv.weights)
        h = ad.activation(params.activation, ad.sparse_conv(h, w, None, rulebook))
        branches.append(h)
    stacked = ad.concat_cols(branches)
    pooled = ad.concat_cols([ad.mean_cols(stacked), ad.max_cols(stacked)])
    attn_w = tape.param(f"{prefix}.attn.w", params.attention_conv.weights)
    attn_b = tape.param(f"{prefix}.attn.b", params.attention_conv.bias)
    gates = ad.sigmoid(ad.sparse_conv(pooled, attn_w, attn_b, rulebook))
    fused = None
    for i, branch in enumerate(branches):
        term = ad.mul(ad.col_slice(gates, i, i + 1), branch)
        fused = term if fused is None else ad.add(fused, term)
    out_w = tape.param(f"{prefix}.out.w", params.out_conv.weights)
    out_b = tape.param(f"{prefix}.out.b", params.out_conv.bias)
    c = params.channels
    # The 1x1x1 output conv is a per-site matmul by its single (c, c) tap.
    projected = ad.add(ad.matmul(fused, ad.reshape(out_w, (c, c))), out_b)
    return ad.add(projected, feats)


def dffm_forward(tensor: SparseTensor, params: DffmParams) -> SparseTensor:
    """Apply the fusion block; the active set is preserved."""
    params.validate(tensor.channels)
    if tensor.num_active == 0:
        return tensor.with_features(tensor.features.copy())
    rulebook = build_rulebook(tensor, 3)
    tape = Tape()
    out = dffm_nodes(tape, tape.const(tensor.features), rulebook, params)
    return tensor.with_features(out.value)


def dffm_param_arrays(params: DffmParams, prefix: str = "dffm") -> dict[str, np.ndarray]:
    """The named arrays `dffm_nodes` registers, for checkpointing/optimizers."""
    out = {}
    for i, conv in enumerate(params.stage_convs):
        out[f"{prefix}.stage{i}.w"] = conv.weights
    out[f"{prefix}.attn.w"] = params.attention_conv.weights
    out[f"{prefix}.attn.b"] = params.attention_conv.bias
    out[f"{prefix}.out.w"] = params.out_conv.weights
    out[f"{prefix}.out.b"] = params.out_conv.bias
    return out


def impulse_support_radius(
    num_stages: int, rng: np.random.Generator, channels: int = 2
) -> int:
    """Chebyshev radius of the block's impulse response on a full grid.

    Feeds a single nonzero voxel at the center of an otherwise zero, fully
    active cube and measures how far the output differs from the all-zero
    response. The zero response cancels any constant offsets, so the result
    is the genuine spatial reach of the branches (attention gates multiply
    zero features outside it and cannot extend it).
    """
    n = 2 * num_stages + 3  # room for one ring beyond the expected radius
    center = n // 2
    grid = np.indices((n, n, n)).reshape(3, -1).T
    params = init_dffm(rng, channels, target_rf=2 * num_stages + 1)
    zero = SparseTensor.create((n, n, n), grid, np.zeros((n**3, channels)))
    impulse_feats = np.zeros((n**3, channels))
    row = int(
        np.flatnonzero((zero.coords == center).all(axis=1))[0]
    )
    impulse_feats[row] = rng.normal(size=channels)
    impulse = zero.with_features(impulse_feats)
    diff = np.abs(
        dffm_forward(impulse, params).features - dffm_forward(zero, params).features
    ).max(axis=1)
    touched = zero.coords[diff > 1e-12]
    if touched.shape[0] == 0:
        return -1
    return int(np.abs(touched - center).max())


