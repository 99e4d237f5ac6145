"""Sparse 3D convolution kernels, a small dense 2D conv, and FLOP accounting.

The sparse kernels are pure gather/matmul/scatter loops over a Rulebook, one
matmul per kernel offset. For a fixed offset the output rows are distinct
(the offset map is injective), so fancy-index accumulation is deterministic
and bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidKernelError, ShapeMismatchError
from .sparse import Rulebook, SparseTensor, build_rulebook


@dataclass
class ConvParams:
    """Weights for one sparse 3D convolution.

    weights has shape (k^3, c_in, c_out) with offsets in lexicographic order;
    bias is (c_out,) or None.
    """

    kernel_size: int
    weights: np.ndarray
    bias: np.ndarray | None = None
    dilation: int = 1
    stride: int = 1
    mode: str = "submanifold"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        k3 = self.kernel_size**3
        if self.weights.ndim != 3 or self.weights.shape[0] != k3:
            raise ShapeMismatchError(
                f"weights {self.weights.shape} do not match kernel {self.kernel_size}"
            )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[2],):
                raise ShapeMismatchError(
                    f"bias {self.bias.shape} does not match c_out {self.weights.shape[2]}"
                )
        if self.mode == "submanifold" and self.stride != 1:
            raise InvalidKernelError("submanifold convolutions require stride 1")

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]


def init_conv(
    rng: np.random.Generator,
    kernel_size: int,
    c_in: int,
    c_out: int,
    bias: bool = False,
    dilation: int = 1,
    stride: int = 1,
    mode: str = "submanifold",
) -> ConvParams:
    fan_in = kernel_size**3 * c_in
    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel_size**3, c_in, c_out))
    return ConvParams(
        kernel_size=kernel_size,
        weights=weights,
        bias=np.zeros(c_out) if bias else None,
        dilation=dilation,
        stride=stride,
        mode=mode,
    )


def sparse_conv_forward(
    features: np.ndarray,
    rulebook: Rulebook,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Accumulate out[o] += W[delta] . f[i] over the rulebook pairs."""
    if features.shape[0] != rulebook.num_in:
        raise ShapeMismatchError(
            f"{features.shape[0]} feature rows vs rulebook num_in {rulebook.num_in}"
        )
    if weights.shape[0] != len(rulebook.pairs) or weights.shape[1] != features.shape[1]:
        raise ShapeMismatchError(
            f"weights {weights.shape} do not fit rulebook K={len(rulebook.pairs)} "
            f"c_in={features.shape[1]}"
        )
    out = np.zeros((rulebook.num_out, weights.shape[2]), dtype=np.float64)
    for ki, (in_rows, out_rows) in enumerate(rulebook.pairs):
        if len(in_rows):
            out[out_rows] += features[in_rows] @ weights[ki]
    if bias is not None and out.shape[0]:
        out += bias
    return out


def sparse_conv_backward(
    grad_out: np.ndarray,
    features: np.ndarray,
    rulebook: Rulebook,
    weights: np.ndarray,
    has_bias: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients w.r.t. input features, weights, and bias."""
    grad_in = np.zeros_like(features)
    grad_w = np.zeros_like(weights)
    for ki, (in_rows, out_rows) in enumerate(rulebook.pairs):
        if len(in_rows):
            go = grad_out[out_rows]
            # in_rows are distinct for a fixed offset, so += is safe.
            grad_in[in_rows] += go @ weights[ki].T
            grad_w[ki] = features[in_rows].T @ go
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_in, grad_w, grad_b


def sparse_conv(
    tensor: SparseTensor, params: ConvParams, rulebook: Rulebook | None = None
) -> SparseTensor:
    """Apply one sparse convolution, building the rulebook if not supplied."""
    if params.c_in != tensor.channels:
        raise ShapeMismatchError(
            f"conv expects {params.c_in} channels, tensor has {tensor.channels}"
        )
    if rulebook is None:
        rulebook = build_rulebook(
            tensor, params.kernel_size, params.dilation, params.stride, params.mode
        )
    out = sparse_conv_forward(tensor.features, rulebook, params.weights, params.bias)
    return SparseTensor(rulebook.out_grid_dims, rulebook.out_coords, out)


# ---------------------------------------------------------------------------
# Dense 2D convolution on BEV maps, evaluated at an explicit cell list.


@dataclass
class Conv2dParams:
    """(k^2, c_in, c_out) weights for a stride-1, same-padding 2D conv."""

    kernel_size: int
    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[0] != self.kernel_size**2:
            raise ShapeMismatchError(
                f"weights {self.weights.shape} do not match kernel {self.kernel_size}"
            )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]


def init_conv2d(
    rng: np.random.Generator, kernel_size: int, c_in: int, c_out: int, bias: bool = True
) -> Conv2dParams:
    fan_in = kernel_size**2 * c_in
    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel_size**2, c_in, c_out))
    return Conv2dParams(kernel_size, weights, np.zeros(c_out) if bias else None)


def offsets2d(k: int) -> np.ndarray:
    r = (k - 1) // 2
    axis = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 2)


def conv2d_at_forward(
    bev: np.ndarray, cells: np.ndarray, weights: np.ndarray, bias: np.ndarray | None
) -> np.ndarray:
    """Evaluate the conv at the given (M, 2) cells; out-of-map taps read zero."""
    k2 = weights.shape[0]
    k = int(round(np.sqrt(k2)))
    if k % 2 == 0:
        raise InvalidKernelError(f"2D kernels must be odd, got k^2={k2}")
    r = (k - 1) // 2
    padded = np.pad(bev, ((r, r), (r, r), (0, 0)))
    out = np.zeros((cells.shape[0], weights.shape[2]), dtype=np.float64)
    if cells.shape[0] == 0:
        return out
    offs = offsets2d(k)
    for ki in range(k2):
        taps = padded[cells[:, 0] + offs[ki, 0] + r, cells[:, 1] + offs[ki, 1] + r]
        out += taps @ weights[ki]
    if bias is not None:
        out += bias
    return out


def conv2d_at_backward(
    grad_out: np.ndarray,
    bev: np.ndarray,
    cells: np.ndarray,
    weights: np.ndarray,
    has_bias: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    k2 = weights.shape[0]
    k = int(round(np.sqrt(k2)))
    r = (k - 1) // 2
    h, w, _ = bev.shape
    padded = np.pad(bev, ((r, r), (r, r), (0, 0)))
    grad_padded = np.zeros_like(padded)
    grad_w = np.zeros_like(weights)
    offs = offsets2d(k)
    for ki in range(k2):
        ys = cells[:, 0] + offs[ki, 0] + r
        xs = cells[:, 1] + offs[ki, 1] + r
        taps = padded[ys, xs]
        grad_w[ki] = taps.T @ grad_out
        np.add.at(grad_padded, (ys, xs), grad_out @ weights[ki].T)
    grad_bev = grad_padded[r : r + h, r : r + w] if r else grad_padded
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_bev, grad_w, grad_b


def all_cells(shape: tuple[int, int]) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.int64)


def dilate_cells(cells: np.ndarray, radius: int, shape: tuple[int, int]) -> np.ndarray:
    """Cells plus their Chebyshev-`radius` neighborhood, clipped to the map."""
    if cells.shape[0] == 0:
        return cells.reshape(0, 2).astype(np.int64)
    offs = offsets2d(2 * radius + 1)
    grown = (cells[:, None, :] + offs[None, :, :]).reshape(-1, 2)
    keep = (
        (grown[:, 0] >= 0)
        & (grown[:, 0] < shape[0])
        & (grown[:, 1] >= 0)
        & (grown[:, 1] < shape[1])
    )
    grown = grown[keep]
    ids = np.unique(grown[:, 0] * shape[1] + grown[:, 1])
    return np.stack([ids // shape[1], ids % shape[1]], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# FLOP accounting.


@dataclass
class LayerFlops:
    name: str
    pair_count: int
    c_in: int
    c_out: int
    bias_adds: int
    macs: int = field(init=False)
    flops: int = field(init=False)

    def __post_init__(self) -> None:
        self.macs = self.pair_count * self.c_in * self.c_out
        self.flops = 2 * self.macs + self.bias_adds


@dataclass
class FlopsReport:
    layers: list[LayerFlops]

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    def to_json_dict(self) -> dict:
        return {
            "layers": [
                {
                    "name": l.name,
                    "pair_count": l.pair_count,
                    "c_in": l.c_in,
                    "c_out": l.c_out,
                    "macs": l.macs,
                    "flops": l.flops,
                }
                for l in self.layers
            ],
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
        }


def count_flops(
    layers: list[tuple[ConvParams, Rulebook]], names: list[str] | None = None
) -> FlopsReport:
    """MAC/FLOP totals for a conv stack: macs = pairs * c_in * c_out.

    flops counts 2 per MAC plus one add per biased active output channel.
    """
    if names is None:
        names = [f"conv{i}" for i in range(len(layers))]
    report = []
    for name, (params, rulebook) in zip(names, layers):
        bias_adds = rulebook.num_out * params.c_out if params.bias is not None else 0
        report.append(
            LayerFlops(
                name=name,
                pair_count=rulebook.pair_count,
                c_in=params.c_in,
                c_out=params.c_out,
                bias_adds=bias_adds,
            )
        )
    return FlopsReport(report)


def stack_flops_for_tensor(
    tensor: SparseTensor, kernel_sizes: list[int], c: int, names: list[str] | None = None
) -> FlopsReport:
    """FLOPs of a submanifold stack with equal channels on a given active set."""
    rng = np.random.default_rng(0)
    layers = []
    for k in kernel_sizes:
        params = init_conv(rng, k, c, c)
        layers.append((params, build_rulebook(tensor, k)))
    return count_flops(layers, names)


def per_interior_site_macs(kernel_sizes: list[int], c_in: int, c_out: int) -> int:
    """MACs per fully-covered site for a stack of equal-channel kernels."""
    return sum(k**3 for k in kernel_sizes) * c_in * c_out
