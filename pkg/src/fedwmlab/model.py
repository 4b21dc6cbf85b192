"""Main-task classifier as layer descriptors over a named parameter store.

The model is a plain sequential conv/BN/ReLU/maxpool/dropout/flatten/linear
network. All learnable parameters live in a ParameterStore keyed by name, so
the transposed counterpart (see fedwmlab.transpose) resolves the very same
tensors. Batch-norm layers keep two independent sets of running statistics,
one per task, selected by the model's bn_mode flag; gamma/beta are shared.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

SUPPORTED_KINDS = ("conv", "batchnorm", "relu", "maxpool", "dropout", "flatten", "linear")
BN_MODES = ("main", "watermark")


class ModelBuildError(ValueError):
    """Raised when an architecture config does not compose."""


class BnModeError(RuntimeError):
    """Raised when a forward pass runs under the wrong batch-norm mode."""


@dataclass
class LayerSpec:
    """One layer descriptor; shape fields are per-sample, channel-first."""

    kind: str
    name: str
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: int = 0
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    num_features: Optional[int] = None
    p: Optional[float] = None
    params: dict = field(default_factory=dict)
    input_shape: tuple = ()
    output_shape: tuple = ()

    def to_config(self) -> dict:
        cfg = {"kind": self.kind, "name": self.name}
        for key in ("out_channels", "kernel", "stride", "in_channels",
                    "in_features", "out_features", "p"):
            value = getattr(self, key)
            if value is not None:
                cfg[key] = value
        if self.kind == "conv":
            cfg["padding"] = self.padding
        return cfg


class ParameterStore:
    """Named map of learnable tensors; each tensor carries its .grad slot."""

    def __init__(self):
        self._tensors: dict[str, torch.Tensor] = {}

    def add(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if name in self._tensors:
            raise ModelBuildError(f"duplicate parameter name: {name}")
        tensor.requires_grad_(True)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def tensors(self):
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def parameter_count(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def export(self) -> dict:
        return {k: v.detach().cpu().numpy().copy() for k, v in self._tensors.items()}

    def load(self, arrays: dict):
        for name, tensor in self._tensors.items():
            if name not in arrays:
                raise KeyError(f"missing parameter in state: {name}")
            arr = np.asarray(arrays[name])
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"shape mismatch for {name}: store {tuple(tensor.shape)}, "
                    f"state {tuple(arr.shape)}")
            with torch.no_grad():
                tensor.copy_(torch.as_tensor(arr, dtype=tensor.dtype))


class DualBatchNormState:
    """Per-BN-layer running statistics, kept separately for each task."""

    def __init__(self, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        if eps <= 0.0:
            raise ValueError("eps must be positive")
        self.momentum = momentum
        self.eps = eps
        self._stats: dict[str, dict[str, tuple[torch.Tensor, torch.Tensor]]] = {}

    def register(self, layer_name: str, num_features: int, dtype=torch.float32):
        self._stats[layer_name] = {
            mode: (torch.zeros(num_features, dtype=dtype),
                   torch.ones(num_features, dtype=dtype))
            for mode in BN_MODES
        }

    def get(self, layer_name: str, mode: str) -> tuple[torch.Tensor, torch.Tensor]:
        return self._stats[layer_name][mode]

    def layer_names(self):
        return list(self._stats)

    def export(self, mode: str) -> dict:
        out = {}
        for layer, stats in self._stats.items():
            mean, var = stats[mode]
            out[f"{layer}.running_mean"] = mean.detach().cpu().numpy().copy()
            out[f"{layer}.running_var"] = var.detach().cpu().numpy().copy()
        return out

    def load(self, mode: str, arrays: dict):
        for layer, stats in self._stats.items():
            mean, var = stats[mode]
            for tensor, stat in ((mean, "running_mean"), (var, "running_var")):
                key = f"{layer}.{stat}"
                if key not in arrays:
                    raise KeyError(f"missing BN statistic in state: {key}")
                arr = np.asarray(arrays[key])
                if tuple(arr.shape) != tuple(tensor.shape):
                    raise ValueError(f"shape mismatch for BN statistic {key}")
                with torch.no_grad():
                    tensor.copy_(torch.as_tensor(arr, dtype=tensor.dtype))


@dataclass
class ArchConfig:
    """Architecture descriptor: input geometry, class count, layer list."""

    input_shape: tuple  # (H, W, C)
    num_classes: int
    layers: list

    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [dict(l) for l in self.layers],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ArchConfig":
        return cls(
            input_shape=tuple(data["input_shape"]),
            num_classes=int(data["num_classes"]),
            layers=[dict(l) for l in data["layers"]],
        )


def tiny_vgg(input_shape=(28, 28, 1), num_classes: int = 10) -> ArchConfig:
    """Three conv/BN/pool blocks + a BN'd two-layer FC head (~50k params
    at 28x28x1). Conv-heavy on purpose: a single fat FC matrix soaks up
    global magnitude pruning and masks its effect on the main task."""
    return ArchConfig(
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        layers=[
            {"kind": "conv", "out_channels": 16, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "maxpool", "kernel": 2, "stride": 2},
            {"kind": "conv", "out_channels": 32, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "maxpool", "kernel": 2, "stride": 2},
            {"kind": "conv", "out_channels": 48, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "maxpool", "kernel": 2, "stride": 2},
            {"kind": "flatten"},
            {"kind": "linear", "out_features": 64},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "linear", "out_features": num_classes},
        ],
    )


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class ModelGraph:
    """Sequential classifier with shared parameter store and dual BN stats.

    Public image tensors are channels-last (N, H, W, C); class scores are
    (N, num_classes). Not safe for concurrent mutation; clone per client.
    """

    def __init__(self, arch: ArchConfig, layers, store, bn_state,
                 dtype=torch.float32, seed: int = 0):
        self.arch = arch
        self.layers = layers
        self.store = store
        self.bn = bn_state
        self.dtype = dtype
        self.bn_mode = "main"
        self.training = True
        self.input_shape = tuple(arch.input_shape)
        self.num_classes = arch.num_classes
        self._dropout_gen = torch.Generator().manual_seed(seed & 0xFFFF_FFFF)

    # -- mode / phase -----------------------------------------------------

    def set_bn_mode(self, mode: str):
        if mode not in BN_MODES:
            raise ValueError(f"unknown BN mode: {mode!r}")
        self.bn_mode = mode

    def train(self, flag: bool = True):
        self.training = flag
        return self

    def eval(self):
        return self.train(False)

    # -- forward ----------------------------------------------------------

    def forward_main(self, batch) -> torch.Tensor:
        """Classify a (N, H, W, C) batch; returns (N, num_classes) scores."""
        if self.bn_mode != "main":
            raise BnModeError(
                f"forward_main requires BN mode 'main', active mode is "
                f"'{self.bn_mode}'")
        x = torch.as_tensor(batch, dtype=self.dtype)
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(
                f"batch shape {tuple(x.shape)} does not match input shape "
                f"(N, {', '.join(map(str, self.input_shape))})")
        x = x.permute(0, 3, 1, 2)
        for spec in self.layers:
            x = self.apply_layer(spec, x)
        return x

    def apply_layer(self, spec: LayerSpec, x: torch.Tensor) -> torch.Tensor:
        kind = spec.kind
        if kind == "conv":
            return F.conv2d(x, self.store[spec.params["weight"]],
                            self.store[spec.params["bias"]],
                            stride=spec.stride, padding=spec.padding)
        if kind == "batchnorm":
            return self.batch_norm(spec.name, spec.params, x)
        if kind == "relu":
            return F.relu(x)
        if kind == "maxpool":
            return F.max_pool2d(x, spec.kernel, spec.stride)
        if kind == "dropout":
            if not self.training:
                return x
            keep = 1.0 - spec.p
            mask = torch.rand(x.shape, generator=self._dropout_gen,
                              dtype=x.dtype) < keep
            return x * mask / keep
        if kind == "flatten":
            return x.reshape(x.shape[0], -1)
        if kind == "linear":
            return F.linear(x, self.store[spec.params["weight"]],
                            self.store[spec.params["bias"]])
        raise ModelBuildError(f"unsupported layer kind: {kind}")

    def batch_norm(self, layer_name: str, params: dict, x: torch.Tensor) -> torch.Tensor:
        mean, var = self.bn.get(layer_name, self.bn_mode)
        return F.batch_norm(
            x, mean, var,
            weight=self.store[params["gamma"]],
            bias=self.store[params["beta"]],
            training=self.training,
            momentum=self.bn.momentum,
            eps=self.bn.eps)

    # -- state ------------------------------------------------------------

    def export_state(self, include_watermark_bn: bool = False) -> dict:
        """Flat name->array state: learnables plus main-mode BN statistics."""
        state = self.store.export()
        for key, arr in self.bn.export("main").items():
            state[f"{key}@main"] = arr
        if include_watermark_bn:
            for key, arr in self.bn.export("watermark").items():
                state[f"{key}@watermark"] = arr
        return state

    def load_state(self, state: dict, load_watermark_bn: bool = False):
        """Load learnables + main BN stats; watermark stats only on request."""
        params = {k: v for k, v in state.items() if "@" not in k}
        self.store.load(params)
        main = {k[:-len("@main")]: v for k, v in state.items() if k.endswith("@main")}
        self.bn.load("main", main)
        if load_watermark_bn:
            wm = {k[:-len("@watermark")]: v for k, v in state.items()
                  if k.endswith("@watermark")}
            self.bn.load("watermark", wm)

    def parameter_count(self) -> int:
        return self.store.parameter_count()


def _init_weight(shape, fan_in: int, gen: torch.Generator, dtype) -> torch.Tensor:
    # Kaiming-uniform, fan-in, ReLU gain
    bound = math.sqrt(6.0 / fan_in)
    w = torch.empty(*shape, dtype=dtype)
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=gen)
    return w


def build_model(arch: ArchConfig, seed: int = 0, dtype=torch.float32) -> ModelGraph:
    """Build a ModelGraph from an architecture config.

    Infers in_channels/in_features where omitted and validates that
    consecutive layer shapes compose; raises ModelBuildError naming the
    offending layer pair otherwise. Fresh parameters are Kaiming-uniform
    (zero biases, gamma=1, beta=0); BN statistics start at mean 0 / var 1
    in both modes.
    """
    if len(arch.input_shape) != 3:
        raise ModelBuildError("input_shape must be (H, W, C)")
    gen = torch.Generator().manual_seed(seed & 0xFFFF_FFFF)
    store = ParameterStore()
    bn_state = DualBatchNormState()

    h, w, c = arch.input_shape
    shape: tuple = (c, h, w)  # channel-first per-sample shape
    specs: list[LayerSpec] = []
    counts: dict[str, int] = {}
    prev_desc = "input"

    for i, cfg in enumerate(arch.layers):
        cfg = dict(cfg)
        kind = cfg.pop("kind", None)
        if kind not in SUPPORTED_KINDS:
            raise ModelBuildError(f"layer {i}: unsupported layer kind {kind!r}")
        counts[kind] = counts.get(kind, 0) + 1
        name = cfg.pop("name", f"{kind}{counts[kind]}")
        spec = LayerSpec(kind=kind, name=name, input_shape=shape)
        pair = f"{prev_desc} -> layer {i} ({name})"

        if kind == "conv":
            if len(shape) != 3:
                raise ModelBuildError(f"{pair}: conv needs a spatial input, got {shape}")
            in_c = cfg.pop("in_channels", None)
            if in_c is not None and in_c != shape[0]:
                raise ModelBuildError(
                    f"{pair}: conv expects in_channels {in_c}, "
                    f"previous layer produces {shape[0]}")
            spec.in_channels = shape[0]
            spec.out_channels = int(cfg.pop("out_channels"))
            spec.kernel = int(cfg.pop("kernel"))
            spec.stride = int(cfg.pop("stride", 1))
            spec.padding = int(cfg.pop("padding", 0))
            oh = _conv_out(shape[1], spec.kernel, spec.stride, spec.padding)
            ow = _conv_out(shape[2], spec.kernel, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise ModelBuildError(f"{pair}: conv output collapses to {oh}x{ow}")
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            spec.params["weight"] = f"{name}.weight"
            spec.params["bias"] = f"{name}.bias"
            store.add(spec.params["weight"], _init_weight(
                (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
                fan_in, gen, dtype))
            store.add(spec.params["bias"],
                      torch.zeros(spec.out_channels, dtype=dtype))
            shape = (spec.out_channels, oh, ow)
        elif kind == "batchnorm":
            spec.num_features = shape[0]
            spec.params["gamma"] = f"{name}.gamma"
            spec.params["beta"] = f"{name}.beta"
            store.add(spec.params["gamma"], torch.ones(spec.num_features, dtype=dtype))
            store.add(spec.params["beta"], torch.zeros(spec.num_features, dtype=dtype))
            bn_state.register(name, spec.num_features, dtype=dtype)
        elif kind == "relu":
            pass
        elif kind == "maxpool":
            if len(shape) != 3:
                raise ModelBuildError(f"{pair}: maxpool needs a spatial input")
            spec.kernel = int(cfg.pop("kernel"))
            spec.stride = int(cfg.pop("stride", spec.kernel))
            oh = _conv_out(shape[1], spec.kernel, spec.stride, 0)
            ow = _conv_out(shape[2], spec.kernel, spec.stride, 0)
            if oh < 1 or ow < 1:
                raise ModelBuildError(f"{pair}: pool output collapses to {oh}x{ow}")
            shape = (shape[0], oh, ow)
        elif kind == "dropout":
            spec.p = float(cfg.pop("p", 0.5))
            if not 0.0 <= spec.p < 1.0:
                raise ModelBuildError(f"{pair}: dropout p must be in [0, 1)")
        elif kind == "flatten":
            if len(shape) != 3:
                raise ModelBuildError(f"{pair}: flatten needs a spatial input")
            shape = (shape[0] * shape[1] * shape[2],)
        elif kind == "linear":
            if len(shape) != 1:
                raise ModelBuildError(
                    f"{pair}: linear needs a flat input, got {shape} "
                    f"(insert a flatten layer)")
            in_f = cfg.pop("in_features", None)
            if in_f is not None and in_f != shape[0]:
                raise ModelBuildError(
                    f"{pair}: linear expects in_features {in_f}, "
                    f"previous layer produces {shape[0]}")
            spec.in_features = shape[0]
            spec.out_features = int(cfg.pop("out_features"))
            spec.params["weight"] = f"{name}.weight"
            spec.params["bias"] = f"{name}.bias"
            store.add(spec.params["weight"], _init_weight(
                (spec.out_features, spec.in_features), spec.in_features, gen, dtype))
            store.add(spec.params["bias"],
                      torch.zeros(spec.out_features, dtype=dtype))
            shape = (spec.out_features,)

        cfg.pop("padding", None)
        if cfg:
            raise ModelBuildError(f"layer {i} ({name}): unknown fields {sorted(cfg)}")
        spec.output_shape = shape
        specs.append(spec)
        prev_desc = f"layer {i} ({name})"

    if shape != (arch.num_classes,):
        raise ModelBuildError(
            f"{prev_desc} -> output: model produces shape {shape}, dataset "
            f"expects ({arch.num_classes},)")
    return ModelGraph(arch, specs, store, bn_state, dtype=dtype, seed=seed)
