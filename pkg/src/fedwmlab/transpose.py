"""Transposed model construction.

The transposed model reverses the classifier layer by layer: linear layers
invert to y = (x - b)W, conv and maxpool layers become transposed
convolutions whose stride/padding/output_padding exactly undo the forward
spatial map, BN layers reuse the shared gamma/beta with the watermark-mode
running statistics, activations pass through, and flatten becomes a reshape
to the recorded feature-map shape. It owns no learnable parameters: every
weight resolves through the source model's ParameterStore.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from fedwmlab.model import BnModeError, LayerSpec, ModelGraph


class TranspositionError(ValueError):
    """Raised when a layer cannot be inverted."""


@dataclass
class TransposedConvSpec:
    """Transposed-convolution descriptor produced from a conv/maxpool spec."""

    kernel: int
    stride: int
    padding: int
    output_padding: tuple  # (h, w)
    in_channels: int       # channels entering the transposed conv
    out_channels: int
    weight_param: Optional[str]  # shared forward kernel, None for fixed uniform
    bias_param: Optional[str]    # forward bias subtracted from the input
    input_size: tuple            # spatial size entering (= forward output size)
    output_size: tuple           # spatial size produced (= forward input size)


@dataclass
class TransposedLayer:
    kind: str  # tlinear | tconv | batchnorm | relu | identity | reshape
    source: LayerSpec
    conv: Optional[TransposedConvSpec] = None
    target_shape: tuple = ()  # reshape target, channel-first


def transpose_linear_forward(x: torch.Tensor, W: torch.Tensor,
                             b: torch.Tensor) -> torch.Tensor:
    """Invert y = x W^T + b as (x - b) W."""
    x = torch.as_tensor(x)
    W = torch.as_tensor(W, dtype=x.dtype)
    b = torch.as_tensor(b, dtype=x.dtype)
    if x.shape[-1] != b.shape[0] or W.shape[0] != b.shape[0]:
        raise ValueError(
            f"dimension mismatch: x last dim {x.shape[-1]}, W rows {W.shape[0]}, "
            f"b {b.shape[0]}")
    return (x - b) @ W


def _inverse_output_padding(in_fwd: int, out_fwd: int, kernel: int, stride: int,
                            padding: int, layer: str) -> int:
    base = (out_fwd - 1) * stride - 2 * padding + kernel
    op = in_fwd - base
    if op < 0 or op >= stride:
        raise TranspositionError(
            f"layer {layer}: spatial inversion needs output_padding {op} "
            f"(must lie in [0, {stride})) to map {out_fwd} back to {in_fwd}")
    return op


def transpose_conv_spec(spec: LayerSpec) -> TransposedConvSpec:
    """Invert a conv or maxpool spec into a transposed-convolution spec.

    The returned spec maps the forward layer's output size back to its input
    size; conv reuses the shared forward kernel, maxpool gets a fixed
    (non-learnable) uniform kernel.
    """
    if spec.kind not in ("conv", "maxpool"):
        raise TranspositionError(f"cannot invert layer kind {spec.kind!r} as conv")
    c_in, h_in, w_in = spec.input_shape
    c_out, h_out, w_out = spec.output_shape
    padding = spec.padding if spec.kind == "conv" else 0
    op_h = _inverse_output_padding(h_in, h_out, spec.kernel, spec.stride,
                                   padding, spec.name)
    op_w = _inverse_output_padding(w_in, w_out, spec.kernel, spec.stride,
                                   padding, spec.name)
    return TransposedConvSpec(
        kernel=spec.kernel,
        stride=spec.stride,
        padding=padding,
        output_padding=(op_h, op_w),
        in_channels=c_out,
        out_channels=c_in,
        weight_param=spec.params.get("weight"),
        bias_param=spec.params.get("bias"),
        input_size=(h_out, w_out),
        output_size=(h_in, w_in),
    )


class TransposedModel:
    """Reverse mapping from class-score vectors to input-sized images.

    Shares the source model's ParameterStore and its watermark-mode BN
    statistics; contains zero learnable parameters of its own. The pair
    must stay in one execution context while training.
    """

    def __init__(self, model: ModelGraph, layers: list):
        self.model = model
        self.layers = layers
        self.input_dim = model.num_classes
        self.output_shape = model.input_shape  # (H, W, C)
        self._fixed_kernels: dict[str, torch.Tensor] = {}

    def _uniform_kernel(self, name: str, channels: int, kernel: int) -> torch.Tensor:
        key = f"{name}:{channels}:{kernel}"
        if key not in self._fixed_kernels:
            k = torch.ones(channels, 1, kernel, kernel, dtype=self.model.dtype)
            k.requires_grad_(False)
            self._fixed_kernels[key] = k
        return self._fixed_kernels[key]

    def forward(self, v) -> torch.Tensor:
        """Map (N, num_classes) vectors to raw (N, H, W, C) images.

        Values are unclamped; clamp to [0, 1] when emitting images. In
        training mode the pass updates watermark-mode BN statistics only.
        """
        model = self.model
        if model.bn_mode != "watermark":
            raise BnModeError(
                f"forward_watermark requires BN mode 'watermark', active mode "
                f"is '{model.bn_mode}'")
        x = torch.as_tensor(v, dtype=model.dtype)
        if x.dim() != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"vector batch shape {tuple(x.shape)} does not match "
                f"(N, {self.input_dim})")
        for layer in self.layers:
            x = self._apply(layer, x)
        return x.permute(0, 2, 3, 1)

    def _apply(self, layer: TransposedLayer, x: torch.Tensor) -> torch.Tensor:
        model = self.model
        kind = layer.kind
        if kind == "tlinear":
            src = layer.source
            return transpose_linear_forward(
                x, model.store[src.params["weight"]],
                model.store[src.params["bias"]])
        if kind == "tconv":
            spec = layer.conv
            if spec.weight_param is not None:
                weight = model.store[spec.weight_param]
                bias = model.store[spec.bias_param]
                x = x - bias.view(1, -1, 1, 1)
                return F.conv_transpose2d(
                    x, weight, stride=spec.stride, padding=spec.padding,
                    output_padding=spec.output_padding)
            kernel = self._uniform_kernel(layer.source.name, spec.in_channels,
                                          spec.kernel)
            return F.conv_transpose2d(
                x, kernel, stride=spec.stride, padding=spec.padding,
                output_padding=spec.output_padding, groups=spec.in_channels)
        if kind == "batchnorm":
            src = layer.source
            return model.batch_norm(src.name, src.params, x)
        if kind == "relu":
            return F.relu(x)
        if kind == "identity":
            return x
        if kind == "reshape":
            return x.reshape(x.shape[0], *layer.target_shape)
        raise TranspositionError(f"unsupported transposed layer kind {kind!r}")


def build_transposed(model: ModelGraph) -> TransposedModel:
    """Build the reverse-mapping model over the classifier's parameters."""
    layers: list[TransposedLayer] = []
    for spec in reversed(model.layers):
        if spec.kind == "linear":
            layers.append(TransposedLayer("tlinear", spec))
        elif spec.kind in ("conv", "maxpool"):
            layers.append(TransposedLayer("tconv", spec, conv=transpose_conv_spec(spec)))
        elif spec.kind == "batchnorm":
            layers.append(TransposedLayer("batchnorm", spec))
        elif spec.kind == "relu":
            layers.append(TransposedLayer("relu", spec))
        elif spec.kind == "dropout":
            layers.append(TransposedLayer("identity", spec))
        elif spec.kind == "flatten":
            layers.append(TransposedLayer("reshape", spec,
                                          target_shape=tuple(spec.input_shape)))
        else:
            raise TranspositionError(f"unsupported layer kind {spec.kind!r}")
    return TransposedModel(model, layers)
