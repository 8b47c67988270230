"""Dense and masked feed-forward networks.

A network is a stack of fully-connected (``FC``) and 2-D convolutional
(``Conv2D``) layers.  Every layer except the last is followed by a ReLU; the
last layer is linear.  Convolutions use stride 1 and "same" zero padding.
When a convolution is followed by a fully-connected layer the feature map is
flattened in channel-major order (``C, H, W``).

All arithmetic is float64.  Arrays held by :class:`MaskedNetwork` and
:class:`Mask` are read-only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NumericError, StructuralError

FLATTEN_ORDER = "channel-major"


@dataclass(frozen=True)
class FC:
    in_width: int
    out_width: int

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_width, self.in_width)

    @property
    def in_units(self) -> int:
        return self.in_width

    @property
    def out_units(self) -> int:
        return self.out_width


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def kernel_size(self) -> int:
        return self.kernel_h * self.kernel_w

    @property
    def in_units(self) -> int:
        return self.in_channels

    @property
    def out_units(self) -> int:
        return self.out_channels


LayerSpec = Union[FC, Conv2D]


@dataclass(frozen=True)
class Architecture:
    """Layer-by-layer shape description of a network.

    ``spatial`` is the ``(H, W)`` size of the feature maps and is required as
    soon as any layer is convolutional.  ``input_domain`` is the interval
    ``[a1, b1]`` that every input component is drawn from.
    """

    layers: tuple[LayerSpec, ...]
    input_domain: tuple[float, float] = (-1.0, 1.0)
    spatial: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        a1, b1 = (float(v) for v in self.input_domain)
        object.__setattr__(self, "input_domain", (a1, b1))
        if self.spatial is not None:
            object.__setattr__(self, "spatial", tuple(int(s) for s in self.spatial))
        if not self.layers:
            raise StructuralError("architecture needs at least one layer")
        if not a1 < b1:
            raise DomainError(f"input domain needs a1 < b1, got [{a1}, {b1}]")
        for layer in self.layers:
            if not isinstance(layer, (FC, Conv2D)):
                raise StructuralError(f"unknown layer spec {layer!r}")
            if min(layer.weight_shape) < 1:
                raise StructuralError(f"all widths, channels and kernels must be >= 1: {layer}")
        has_conv = any(isinstance(layer, Conv2D) for layer in self.layers)
        if has_conv:
            if self.spatial is None or min(self.spatial) < 1:
                raise StructuralError("convolutional architectures need a spatial (H, W) size")
        for l, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if isinstance(prev, FC) and isinstance(nxt, Conv2D):
                raise StructuralError(f"layer {l + 1}: conv after fully-connected is not supported")
            if isinstance(prev, Conv2D) and isinstance(nxt, FC):
                expected = prev.out_channels * self.spatial[0] * self.spatial[1]
                if nxt.in_width != expected:
                    raise StructuralError(
                        f"layer {l + 1}: flatten size {expected} != in_width {nxt.in_width}"
                    )
            elif prev.out_units != nxt.in_units:
                raise StructuralError(
                    f"layer {l} outputs {prev.out_units} units but layer {l + 1} takes {nxt.in_units}"
                )

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        """Number of input units (features for FC, channels for conv)."""
        return self.layers[0].in_units

    @property
    def is_conv(self) -> bool:
        return isinstance(self.layers[0], Conv2D)

    @property
    def input_shape(self) -> tuple[int, ...]:
        first = self.layers[0]
        if isinstance(first, Conv2D):
            return (first.in_channels, *self.spatial)
        return (first.in_width,)

    @property
    def output_shape(self) -> tuple[int, ...]:
        last = self.layers[-1]
        if isinstance(last, Conv2D):
            return (last.out_channels, *self.spatial)
        return (last.out_width,)

    def widths(self) -> list[int]:
        """Unit counts ``n_0, n_1, ..., n_L`` (channels for conv layers)."""
        return [self.layers[0].in_units] + [layer.out_units for layer in self.layers]

    def weight_counts(self) -> list[int]:
        return [int(np.prod(layer.weight_shape)) for layer in self.layers]

    def col_unit_size(self, l: int) -> int:
        """How many weight columns of layer ``l`` belong to one input unit."""
        layer = self.layers[l]
        if isinstance(layer, FC) and l > 0 and isinstance(self.layers[l - 1], Conv2D):
            return self.spatial[0] * self.spatial[1]
        return 1


@dataclass(frozen=True)
class ParamCount:
    m: tuple[int, ...]
    nnz: tuple[int, ...]

    def __post_init__(self):
        if any(n > m for n, m in zip(self.nnz, self.m)):
            raise StructuralError("nnz cannot exceed the number of weight entries")

    @property
    def total(self) -> int:
        return sum(self.m)

    @property
    def total_nnz(self) -> int:
        return sum(self.nnz)


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Mask:
    """Per-layer binary tensors shaped like the weights of an architecture."""

    layers: tuple[np.ndarray, ...]
    seed: int | None = None
    plan_ref: str | None = None

    def __post_init__(self):
        frozen = []
        for s in self.layers:
            s = np.asarray(s)
            if s.dtype != bool and not np.isin(s, (0, 1)).all():
                raise DomainError("mask entries must be 0 or 1")
            frozen.append(_frozen(s, bool))
        object.__setattr__(self, "layers", tuple(frozen))

    @classmethod
    def ones(cls, arch: Architecture) -> Mask:
        return cls(tuple(np.ones(layer.weight_shape, dtype=bool) for layer in arch.layers))

    @property
    def nnz(self) -> list[int]:
        return [int(s.sum()) for s in self.layers]

    @property
    def total_nnz(self) -> int:
        return sum(self.nnz)

    def density(self) -> list[float]:
        return [float(s.mean()) for s in self.layers]

    def is_subset_of(self, other: Mask) -> bool:
        """True if every unmasked entry here is also unmasked in ``other``."""
        if len(self.layers) != len(other.layers):
            return False
        return all(a.shape == b.shape and not (a & ~b).any() for a, b in zip(self.layers, other.layers))

    def check_matches(self, arch: Architecture):
        if len(self.layers) != arch.depth:
            raise StructuralError(f"mask has {len(self.layers)} layers, architecture has {arch.depth}")
        for l, (s, layer) in enumerate(zip(self.layers, arch.layers)):
            if s.shape != layer.weight_shape:
                raise StructuralError(f"mask layer {l} has shape {s.shape}, expected {layer.weight_shape}")


@dataclass(frozen=True)
class MaskedNetwork:
    """Weights, biases and a mask over an architecture.

    Evaluation always uses the effective weights ``W * S``.
    """

    arch: Architecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    mask: Mask = field(default=None)

    def __post_init__(self):
        arch = self.arch
        if len(self.weights) != arch.depth or len(self.biases) != arch.depth:
            raise StructuralError("need one weight tensor and one bias vector per layer")
        weights, biases = [], []
        for l, layer in enumerate(arch.layers):
            w = _frozen(self.weights[l], np.float64)
            b = _frozen(self.biases[l], np.float64)
            if w.shape != layer.weight_shape:
                raise StructuralError(f"layer {l} weights have shape {w.shape}, expected {layer.weight_shape}")
            if b.shape != (layer.out_units,):
                raise StructuralError(f"layer {l} biases have shape {b.shape}, expected ({layer.out_units},)")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"layer {l} has non-finite parameters")
            weights.append(w)
            biases.append(b)
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))
        mask = self.mask if self.mask is not None else Mask.ones(arch)
        if not isinstance(mask, Mask):
            mask = Mask(tuple(mask))
        mask.check_matches(arch)
        object.__setattr__(self, "mask", mask)

    def effective_weights(self) -> list[np.ndarray]:
        return [w * s for w, s in zip(self.weights, self.mask.layers)]

    def param_count(self) -> ParamCount:
        return ParamCount(tuple(self.arch.weight_counts()), tuple(self.mask.nnz))

    def with_mask(self, mask: Mask) -> MaskedNetwork:
        return MaskedNetwork(self.arch, self.weights, self.biases, mask)

    def with_params(self, weights=None, biases=None) -> MaskedNetwork:
        return MaskedNetwork(
            self.arch,
            self.weights if weights is None else tuple(weights),
            self.biases if biases is None else tuple(biases),
            self.mask,
        )

    def premultiplied(self) -> MaskedNetwork:
        """Equivalent network with ``W * S`` folded into dense weights."""
        return MaskedNetwork(self.arch, tuple(self.effective_weights()), self.biases, None)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def same_padding(kernel_h: int, kernel_w: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Zero padding (before, after) per spatial axis that keeps H and W fixed."""
    top = (kernel_h - 1) // 2
    left = (kernel_w - 1) // 2
    return (top, kernel_h - 1 - top), (left, kernel_w - 1 - left)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched cross-correlation with same padding.  ``x`` is ``(N, C, H, W)``."""
    kh, kw = w.shape[2:]
    (pt, pb), (pl, pr) = same_padding(kh, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise StructuralError("kernel larger than padded input")
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, H, W, kh, kw
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, O
    return np.moveaxis(out, 3, 1) + b[None, :, None, None]


def _as_batch(arch: Architecture, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    shape = arch.input_shape
    if x.shape == shape:
        return x[None], True
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, False
    raise StructuralError(f"input shape {x.shape} does not match {shape} (or a batch of it)")


def layer_outputs(net: MaskedNetwork, x, check_domain: bool = False) -> list[np.ndarray]:
    """All activations ``[x^(0), x^(1), ..., x^(L)]`` for a batch of inputs.

    Hidden activations are post-ReLU; the last entry is the linear output.
    """
    arch = net.arch
    batch, _ = _as_batch(arch, x)
    if not np.isfinite(batch).all():
        raise NumericError("non-finite network input")
    if check_domain:
        a1, b1 = arch.input_domain
        if batch.min() < a1 or batch.max() > b1:
            raise DomainError(f"input outside the domain [{a1}, {b1}]")
    outs = [batch]
    h = batch
    weights = net.effective_weights()
    for l, layer in enumerate(arch.layers):
        if isinstance(layer, Conv2D):
            h = conv2d(h, weights[l], net.biases[l])
        else:
            if h.ndim > 2:
                h = h.reshape(h.shape[0], -1)
            h = h @ weights[l].T + net.biases[l]
        if l < arch.depth - 1:
            h = relu(h)
        outs.append(h)
    return outs


def forward(net: MaskedNetwork, x, check_domain: bool = False) -> np.ndarray:
    """Evaluate the network on one input or a batch of inputs."""
    _, single = _as_batch(net.arch, x)
    out = layer_outputs(net, x, check_domain)[-1]
    return out[0] if single else out


def conv2d_forward(net: MaskedNetwork, x, check_domain: bool = False) -> np.ndarray:
    """Evaluate a network whose first layer is convolutional on ``C x H x W`` input."""
    if not net.arch.is_conv:
        raise StructuralError("conv2d_forward needs a convolutional first layer")
    first = net.arch.layers[0]
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3] != first.in_channels:
        raise StructuralError(f"expected {first.in_channels} input channels, got {x.shape[-3]}")
    return forward(net, x, check_domain)


def sample_domain(arch: Architecture, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` inputs drawn uniformly from the input domain."""
    a1, b1 = arch.input_domain
    return rng.uniform(a1, b1, size=(n, *arch.input_shape))


def random_target(arch: Architecture, seed, weight_scale: float = 1.0) -> MaskedNetwork:
    """Dense network with i.i.d. U([-s, s]) weights and biases."""
    if weight_scale < 0:
        raise DomainError("weight_scale must be non-negative")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in arch.layers:
        weights.append(rng.uniform(-weight_scale, weight_scale, size=layer.weight_shape))
        biases.append(rng.uniform(-weight_scale, weight_scale, size=layer.out_units))
    return MaskedNetwork(arch, tuple(weights), tuple(biases))


def fc_arch(widths: Sequence[int], input_domain=(-1.0, 1.0)) -> Architecture:
    """Fully-connected architecture ``n_0 -> n_1 -> ... -> n_L``."""
    return Architecture(
        tuple(FC(a, b) for a, b in zip(widths, widths[1:])), input_domain=tuple(input_domain)
    )


def conv_arch(channels: Sequence[int], kernel, spatial, input_domain=(0.0, 1.0)) -> Architecture:
    """All-convolutional architecture with one kernel size for every layer."""
    kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
    layers = tuple(Conv2D(a, b, kh, kw) for a, b in zip(channels, channels[1:]))
    return Architecture(layers, input_domain=tuple(input_domain), spatial=tuple(spatial))


# --- serialization ---------------------------------------------------------


def layer_to_dict(layer: LayerSpec) -> dict:
    if isinstance(layer, FC):
        return {"type": "fc", "in_width": layer.in_width, "out_width": layer.out_width}
    return {
        "type": "conv2d",
        "in_channels": layer.in_channels,
        "out_channels": layer.out_channels,
        "kernel_h": layer.kernel_h,
        "kernel_w": layer.kernel_w,
    }


def layer_from_dict(d: dict) -> LayerSpec:
    kind = d.get("type")
    try:
        if kind == "fc":
            return FC(int(d["in_width"]), int(d["out_width"]))
        if kind == "conv2d":
            return Conv2D(int(d["in_channels"]), int(d["out_channels"]), int(d["kernel_h"]), int(d["kernel_w"]))
    except KeyError as exc:
        raise StructuralError(f"layer spec {d} is missing {exc}") from None
    raise StructuralError(f"unknown layer type {kind!r}")


def arch_to_dict(arch: Architecture) -> dict:
    d = {"arch": [layer_to_dict(layer) for layer in arch.layers], "input_domain": list(arch.input_domain)}
    if arch.spatial is not None:
        d["spatial"] = list(arch.spatial)
        d["flatten"] = FLATTEN_ORDER
    return d


def arch_from_dict(d: dict) -> Architecture:
    if "arch" not in d:
        raise StructuralError("document has no 'arch' key")
    if d.get("flatten", FLATTEN_ORDER) != FLATTEN_ORDER:
        raise StructuralError(f"unsupported flatten order {d['flatten']!r}")
    return Architecture(
        tuple(layer_from_dict(x) for x in d["arch"]),
        input_domain=tuple(d.get("input_domain", (-1.0, 1.0))),
        spatial=tuple(d["spatial"]) if d.get("spatial") is not None else None,
    )


def network_to_dict(net: MaskedNetwork, include_mask: bool = True) -> dict:
    d = arch_to_dict(net.arch)
    d["weights"] = [w.tolist() for w in net.weights]
    d["biases"] = [b.tolist() for b in net.biases]
    dense = all(s.all() for s in net.mask.layers)
    if include_mask and not dense:
        d["mask"] = [s.astype(np.int8).tolist() for s in net.mask.layers]
    return d


def network_from_dict(d: dict) -> MaskedNetwork:
    arch = arch_from_dict(d)
    try:
        weights = tuple(np.asarray(w, dtype=np.float64) for w in d["weights"])
        biases = tuple(np.asarray(b, dtype=np.float64) for b in d["biases"])
    except KeyError as exc:
        raise StructuralError(f"network document is missing {exc}") from None
    mask = None
    if d.get("mask") is not None:
        mask = Mask(tuple(np.asarray(s, dtype=np.int8) for s in d["mask"]))
    return MaskedNetwork(arch, weights, biases, mask)


def save_network(net: MaskedNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net)))


def load_network(path) -> MaskedNetwork:
    return network_from_dict(json.loads(Path(path).read_text()))


def load_arch(path) -> Architecture:
    return arch_from_dict(json.loads(Path(path).read_text()))
