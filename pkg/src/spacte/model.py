"""Declarative multi-head networks: a shared backbone feeding L identical heads.

An :class:`ArchitectureSpec` is a linear chain of layer descriptors plus a
split point. Layers before ``split_index`` form the shared backbone, the rest
is replicated once per head. The same descriptor drives module construction,
parameter counting and the analytic FLOPs estimate, so the three never drift
apart.

FLOPs convention: one multiply-accumulate counts as 2 operations. Inference
batch-norm is 2 ops per element (scale and shift), ReLU and residual additions
1 op per element, global average pooling 1 add per input element, input
normalization 2 ops per element, linear bias 1 add per output.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError
from .seeding import numpy_rng

LAYER_KINDS = ("normalize", "conv", "stage", "pool", "flatten", "linear", "relu")

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2023, 0.1994, 0.2010)

FLOPS_CONVENTION = "multiply-accumulate = 2 FLOPs; BN 2/elem, ReLU 1/elem, residual add 1/elem, pooling adds"


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor.

    ``conv`` is conv(bias-free) + batch-norm + ReLU. ``stage`` is a residual
    group of ``blocks`` basic blocks; the first block applies ``stride`` and a
    1x1 projection shortcut when the shape changes. ``linear`` with
    ``width=0`` means "num_classes".
    """

    kind: str
    width: int = 0
    kernel: int = 3
    stride: int = 1
    blocks: int = 1
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[LayerSpec, ...]
    split_index: int
    num_heads: int
    num_classes: int
    input_shape: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        validate_spec(self)

    def with_heads(self, num_heads: int, split_index: int | None = None) -> "ArchitectureSpec":
        return ArchitectureSpec(
            self.layers,
            self.split_index if split_index is None else split_index,
            num_heads,
            self.num_classes,
            self.input_shape,
            self.name,
        )

    def single(self) -> "ArchitectureSpec":
        """The plain one-network version of this architecture."""
        return self.with_heads(1, 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        layers = tuple(
            LayerSpec(**{**layer, "mean": tuple(layer.get("mean", ())), "std": tuple(layer.get("std", ()))})
            for layer in d["layers"]
        )
        return cls(
            layers,
            int(d["split_index"]),
            int(d["num_heads"]),
            int(d["num_classes"]),
            tuple(d["input_shape"]),
            d.get("name", "custom"),
        )


# ---------------------------------------------------------------- shapes


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def _layer_out_shape(layer: LayerSpec, shape: tuple[int, ...], num_classes: int) -> tuple[int, ...]:
    kind = layer.kind
    if kind in ("normalize", "relu"):
        return shape
    if kind in ("conv", "stage"):
        if len(shape) != 3:
            raise ConfigError(f"{kind} layer needs a (C, H, W) input, got {shape}")
        _, h, w = shape
        kernel = layer.kernel if kind == "conv" else 3
        return (layer.width, _conv_out(h, kernel, layer.stride), _conv_out(w, kernel, layer.stride))
    if kind == "pool":
        if len(shape) != 3:
            raise ConfigError(f"pool layer needs a (C, H, W) input, got {shape}")
        return (shape[0],)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "linear":
        if len(shape) != 1:
            raise ConfigError(f"linear layer needs a flat input, got {shape}; add flatten or pool")
        return (layer.width or num_classes,)
    raise ConfigError(f"unknown layer kind {kind!r}")


def layer_shapes(spec: ArchitectureSpec) -> list[tuple[int, ...]]:
    """Input shape followed by the output shape of every layer."""
    shapes = [tuple(spec.input_shape)]
    for layer in spec.layers:
        shapes.append(_layer_out_shape(layer, shapes[-1], spec.num_classes))
    return shapes


def validate_spec(spec: ArchitectureSpec) -> None:
    if spec.num_heads < 1:
        raise ConfigError(f"num_heads must be positive, got {spec.num_heads}", "model.num_heads")
    if spec.num_classes < 1:
        raise ConfigError(f"num_classes must be positive, got {spec.num_classes}", "model.num_classes")
    if not spec.layers:
        raise ConfigError("architecture has no layers")
    if not 0 <= spec.split_index < len(spec.layers):
        raise ConfigError(
            f"split_index must lie in [0, {len(spec.layers) - 1}] so every head keeps at least one layer, "
            f"got {spec.split_index}",
            "model.split_index",
        )
    for layer in spec.layers:
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {layer.kind!r}")
        if layer.kind in ("conv", "stage") and (layer.width < 1 or layer.stride < 1 or layer.blocks < 1):
            raise ConfigError(f"bad {layer.kind} layer {layer}")
        if layer.kind == "normalize" and len(layer.mean) != len(layer.std):
            raise ConfigError("normalize layer needs matching mean and std")
    out = layer_shapes(spec)[-1]
    if out != (spec.num_classes,):
        raise ConfigError(f"network output shape {out} does not match num_classes={spec.num_classes}")


# ---------------------------------------------------------------- modules


class Normalize(nn.Module):
    """Frozen per-channel standardization; inputs stay in [0, 1] outside the network."""

    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32))

    def forward(self, x):
        view = (1, -1) + (1,) * (x.dim() - 2)
        return (x - self.mean.view(view)) / self.std.view(view)


class ConvBNReLU(nn.Module):
    def __init__(self, cin, cout, kernel=3, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride, kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return torch.relu(self.bn(self.conv(x)))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False),
                nn.BatchNorm2d(cout),
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


def _make_layer(layer: LayerSpec, in_shape: tuple[int, ...], num_classes: int) -> nn.Module:
    kind = layer.kind
    if kind == "normalize":
        return Normalize(layer.mean, layer.std)
    if kind == "conv":
        return ConvBNReLU(in_shape[0], layer.width, layer.kernel, layer.stride)
    if kind == "stage":
        blocks = [BasicBlock(in_shape[0], layer.width, layer.stride)]
        blocks += [BasicBlock(layer.width, layer.width) for _ in range(layer.blocks - 1)]
        return nn.Sequential(*blocks)
    if kind == "pool":
        return GlobalAvgPool()
    if kind == "flatten":
        return nn.Flatten()
    if kind == "linear":
        return nn.Linear(in_shape[0], layer.width or num_classes)
    if kind == "relu":
        return nn.ReLU()
    raise ConfigError(f"unknown layer kind {kind!r}")


def _init_module(module: nn.Module, rng: np.random.Generator) -> None:
    # He fan-in init from a numpy stream, so weights do not depend on torch's RNG
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            w = rng.standard_normal(tuple(m.weight.shape)) * math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.from_numpy(w))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class MultiHeadNetwork(nn.Module):
    """Shared backbone plus ``num_heads`` heads; ``forward`` returns (batch, L, K) logits."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        shapes = layer_shapes(spec)
        k = spec.num_classes
        self.backbone = nn.Sequential(
            *[_make_layer(layer, shapes[i], k) for i, layer in enumerate(spec.layers[: spec.split_index])]
        )
        self.heads = nn.ModuleList(
            nn.Sequential(
                *[
                    _make_layer(layer, shapes[spec.split_index + i], k)
                    for i, layer in enumerate(spec.layers[spec.split_index:])
                ]
            )
            for _ in range(spec.num_heads)
        )

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def _check_input(self, x):
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise InputError(f"expected inputs of shape (batch, {self.spec.input_shape}), got {tuple(x.shape)}")

    def forward(self, x):
        self._check_input(x)
        z = self.backbone(x)
        return torch.stack([head(z) for head in self.heads], dim=1)

    def forward_head(self, x, k: int):
        """Logits of head ``k`` (0-based) alone, recomputing the backbone."""
        self._check_input(x)
        return self.heads[k](self.backbone(x))


def build_network(spec: ArchitectureSpec, seed: int) -> MultiHeadNetwork:
    validate_spec(spec)
    net = MultiHeadNetwork(spec)
    _init_module(net.backbone, numpy_rng(seed, "init-backbone"))
    for k, head in enumerate(net.heads):
        _init_module(head, numpy_rng(seed, "init-head", k))
    return net


def forward_all_heads(net: MultiHeadNetwork, batch) -> torch.Tensor:
    return net(torch.as_tensor(batch, dtype=torch.float32))


def ensemble_logits(head_logits):
    """Mean over the head axis (second to last); works on numpy arrays and tensors."""
    if head_logits.shape[-2] == 0:
        raise InputError("ensemble of zero heads")
    return head_logits.mean(-2) if isinstance(head_logits, torch.Tensor) else np.mean(head_logits, axis=-2)


def head_parameters(net: MultiHeadNetwork, k: int) -> list[nn.Parameter]:
    """Trainable parameters of head ``k`` (1-based) in layer order, weight before bias."""
    if not 1 <= k <= net.num_heads:
        raise InputError(f"head index {k} outside 1..{net.num_heads}")
    return [p for p in net.heads[k - 1].parameters() if p.requires_grad]


def head_param_vector(net: MultiHeadNetwork, k: int) -> torch.Tensor:
    """Flattened trainable parameters of head ``k`` (1-based). Running BN statistics are excluded."""
    return torch.cat([p.reshape(-1) for p in head_parameters(net, k)])


def parameter_vector(net: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


# ---------------------------------------------------------------- costs


def _layer_cost(layer: LayerSpec, in_shape, out_shape) -> tuple[int, int]:
    """(trainable params, FLOPs per single input) of one layer."""
    kind = layer.kind
    n_in = int(np.prod(in_shape))
    n_out = int(np.prod(out_shape))
    if kind == "normalize":
        return 0, 2 * n_in
    if kind == "relu":
        return 0, n_in
    if kind == "flatten":
        return 0, 0
    if kind == "pool":
        return 0, n_in
    if kind == "linear":
        return n_in * n_out + n_out, 2 * n_in * n_out + n_out
    if kind == "conv":
        cin, cout = in_shape[0], out_shape[0]
        w = layer.kernel * layer.kernel * cin * cout
        hw = out_shape[1] * out_shape[2]
        return w + 2 * cout, 2 * w * hw + 2 * n_out + n_out
    if kind == "stage":
        params = flops = 0
        cin = in_shape[0]
        cout, h, w_ = out_shape
        hw = h * w_
        for b in range(layer.blocks):
            c_in_b = cin if b == 0 else cout
            w1, w2 = 9 * c_in_b * cout, 9 * cout * cout
            params += w1 + w2 + 4 * cout
            # two convs, two BNs, add, two ReLUs
            flops += 2 * (w1 + w2) * hw + 2 * 2 * n_out + n_out + 2 * n_out
            if b == 0 and (layer.stride != 1 or cin != cout):
                params += cin * cout + 2 * cout
                flops += 2 * cin * cout * hw + 2 * n_out
        return params, flops
    raise ConfigError(f"unknown layer kind {kind!r}")


def _chain_cost(spec: ArchitectureSpec, start: int, stop: int) -> tuple[int, int]:
    shapes = layer_shapes(spec)
    params = flops = 0
    for i in range(start, stop):
        p, f = _layer_cost(spec.layers[i], shapes[i], shapes[i + 1])
        params += p
        flops += f
    return params, flops


@dataclass(frozen=True)
class CostReport:
    num_heads: int
    params_backbone: int
    params_per_head: int
    params_total_multihead: int
    params_total_single: int
    params_total_k_dnns: int
    flops_single: int
    flops_multihead: int
    convention: str = field(default=FLOPS_CONVENTION)

    @property
    def flops_ratio(self) -> float:
        return self.flops_multihead / self.flops_single

    def _rows(self):
        return [
            ("num_heads", self.num_heads),
            ("params_backbone", self.params_backbone),
            ("params_per_head", self.params_per_head),
            ("params_total_multihead", self.params_total_multihead),
            ("params_total_single", self.params_total_single),
            ("params_total_k_dnns", self.params_total_k_dnns),
            ("flops_single", self.flops_single),
            ("flops_multihead", self.flops_multihead),
        ]

    def as_text(self) -> str:
        width = max(len(k) for k, _ in self._rows())
        lines = [f"{k:<{width}}  {v:>15,}" for k, v in self._rows()]
        lines.append(f"{'gflops_single':<{width}}  {self.flops_single / 1e9:>15.3f}")
        lines.append(f"{'gflops_multihead':<{width}}  {self.flops_multihead / 1e9:>15.3f}")
        lines.append(f"{'flops_ratio':<{width}}  {self.flops_ratio:>15.3f}")
        lines.append(f"convention: {self.convention}")
        return "\n".join(lines)

    def as_kv(self) -> str:
        lines = [f"{k}={v}" for k, v in self._rows()]
        lines.append(f"flops_ratio={self.flops_ratio:.6f}")
        lines.append(f"convention={self.convention}")
        return "\n".join(lines)


def count_params(spec: ArchitectureSpec) -> dict[str, int]:
    backbone, _ = _chain_cost(spec, 0, spec.split_index)
    head, _ = _chain_cost(spec, spec.split_index, len(spec.layers))
    single, _ = _chain_cost(spec, 0, len(spec.layers))
    return {
        "params_backbone": backbone,
        "params_per_head": head,
        "params_total_multihead": backbone + spec.num_heads * head,
        "params_total_single": single,
        "params_total_k_dnns": spec.num_heads * single,
    }


def estimate_flops(spec: ArchitectureSpec) -> dict[str, int]:
    _, backbone = _chain_cost(spec, 0, spec.split_index)
    _, head = _chain_cost(spec, spec.split_index, len(spec.layers))
    _, single = _chain_cost(spec, 0, len(spec.layers))
    return {"flops_single": single, "flops_multihead": backbone + spec.num_heads * head}


def cost_report(spec: ArchitectureSpec) -> CostReport:
    return CostReport(num_heads=spec.num_heads, **count_params(spec), **estimate_flops(spec))


# ---------------------------------------------------------------- presets


def resnet_cifar(depth: int = 110, num_heads: int = 5, split_stage: int = 2, num_classes: int = 10) -> ArchitectureSpec:
    """CIFAR residual network of ``depth`` = 6n+2 with basic blocks, widths 16/32/64.

    ``split_stage`` is the number of residual groups kept in the backbone
    (0 gives fully independent networks).
    """
    if (depth - 2) % 6:
        raise ConfigError(f"CIFAR ResNet depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    layers = (
        LayerSpec("normalize", mean=CIFAR10_MEAN, std=CIFAR10_STD),
        LayerSpec("conv", 16, kernel=3),
        LayerSpec("stage", 16, stride=1, blocks=n),
        LayerSpec("stage", 32, stride=2, blocks=n),
        LayerSpec("stage", 64, stride=2, blocks=n),
        LayerSpec("pool"),
        LayerSpec("linear"),
    )
    if not 0 <= split_stage <= 3:
        raise ConfigError(f"split_stage must be in 0..3, got {split_stage}")
    split = 0 if split_stage == 0 else 2 + split_stage
    return ArchitectureSpec(layers, split, num_heads, num_classes, (3, 32, 32), f"resnet{depth}")


def resnet110(num_heads: int = 5, split_stage: int = 2, num_classes: int = 10) -> ArchitectureSpec:
    return resnet_cifar(110, num_heads, split_stage, num_classes)


def desk_cnn(num_heads: int = 3, num_classes: int = 10, input_shape=(3, 32, 32), split_index: int = 4) -> ArchitectureSpec:
    """Small residual CNN: stem conv plus one block per stage, heads split after stage 2."""
    c = input_shape[0]
    layers = (
        LayerSpec("normalize", mean=(0.5,) * c, std=(0.25,) * c),
        LayerSpec("conv", 16),
        LayerSpec("stage", 16, blocks=1),
        LayerSpec("stage", 32, stride=2, blocks=1),
        LayerSpec("stage", 64, stride=2, blocks=1),
        LayerSpec("pool"),
        LayerSpec("linear"),
    )
    return ArchitectureSpec(layers, split_index, num_heads, num_classes, tuple(input_shape), "desk_cnn")


def mlp(dim: int, num_classes: int = 2, num_heads: int = 3, hidden: int = 32, split_index: int = 5) -> ArchitectureSpec:
    """Three hidden ReLU layers on flat inputs; default split after the second one."""
    layers = (
        LayerSpec("normalize", mean=(0.5,), std=(0.25,)),
        LayerSpec("flatten"),
        LayerSpec("linear", hidden),
        LayerSpec("relu"),
        LayerSpec("linear", hidden),
        LayerSpec("relu"),
        LayerSpec("linear", hidden),
        LayerSpec("relu"),
        LayerSpec("linear"),
    )
    return ArchitectureSpec(layers, split_index, num_heads, num_classes, (dim,), "mlp")


def linear_classifier(dim: int, num_classes: int = 2, num_heads: int = 1) -> ArchitectureSpec:
    layers = (LayerSpec("flatten"), LayerSpec("linear"))
    return ArchitectureSpec(layers, 0, num_heads, num_classes, (dim,), "linear")


def linear_separator_network(w, b: float) -> MultiHeadNetwork:
    """Two-class network whose logits are (-(w.x + b), w.x + b), i.e. class 1 iff w.x + b > 0."""
    w = np.asarray(w, dtype=np.float64)
    net = build_network(linear_classifier(w.size, 2), seed=0)
    lin = net.heads[0][1]
    with torch.no_grad():
        lin.weight.copy_(torch.from_numpy(np.stack([-w, w])))
        lin.bias.copy_(torch.tensor([-b, b]))
    return net.eval()
