"""Run configuration: a flat ``key = value`` text format with ``[section]`` headers.

Keys are addressed as ``section.key``. Lines starting with ``#`` are
comments, and a dotted key may also appear outside any section. Every key
except ``noise.sigma`` has a default. An environment variable
``SPACTE_<SECTION>__<KEY>`` (e.g. ``SPACTE_NOISE__SIGMA=0.5``) overrides the
file.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from .certify import CertifyConfig
from .errors import ConfigError
from .losses import VARIANTS, VariantConfig
from .model import ArchitectureSpec, desk_cnn, linear_classifier, mlp, resnet_cifar
from .schedule import LrSchedule
from .trainer import TrainConfig

ENV_PREFIX = "SPACTE_"
REQUIRED = object()
ARCHS = ("resnet110", "resnet", "desk_cnn", "mlp", "linear")
DATA_KINDS = ("cifar10", "blobs")


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: Any
    doc: str
    check: Callable[[Any], bool] | None = None
    constraint: str = ""
    choices: tuple = ()


def _k(name, kind, default, doc, check=None, constraint="", choices=()):
    return Key(name, kind, default, doc, check, constraint, choices)


_pos = (lambda v: v > 0, "> 0")
_nonneg = (lambda v: v >= 0, ">= 0")
_unit_open = (lambda v: 0 < v < 1, "in (0, 1)")
_ge1 = (lambda v: v >= 1, ">= 1")

KEYS: tuple[Key, ...] = (
    _k("model.arch", str, "resnet110", "architecture preset", choices=ARCHS),
    _k("model.depth", int, 110, "depth of the 'resnet' preset (6n+2)", *_ge1),
    _k("model.num_classes", int, 10, "number of classes K", *_ge1),
    _k("model.input_shape", str, "3,32,32", "comma-separated input shape"),
    _k("model.split_index", str, "auto", "layers in the shared backbone; 'auto' = preset default (0 = independent networks)"),
    _k("model.hidden", int, 32, "hidden width of the 'mlp' preset", *_ge1),
    _k("heads.num_heads", int, 5, "number of heads L", *_ge1),
    _k("heads.epsilon", float, 0.8, "head-weight epsilon", *_unit_open),
    _k("heads.circular_teaching", bool, True, "self-paced weights passed around the head ring (off: all weights 1)"),
    _k("heads.cosine", bool, True, "include the head diversity loss"),
    _k("heads.normalized_cosine", bool, False, "use squared cosines instead of the unnormalized diversity loss"),
    _k("noise.sigma", float, REQUIRED, "Gaussian noise level for training and certification", *_nonneg),
    _k("noise.draws", int, 2, "noise draws m per sample per iteration", *_ge1),
    _k("train.epochs", int, 150, "training epochs", *_nonneg),
    _k("train.batch_size", int, 256, "mini-batch size", *_ge1),
    _k("train.lr", float, 0.1, "initial learning rate", *_pos),
    _k("train.lr_decay", float, 0.1, "learning-rate decay factor", *_pos),
    _k("train.lr_period", int, 50, "epochs between learning-rate decays", *_ge1),
    _k("train.momentum", float, 0.9, "SGD momentum", *_nonneg),
    _k("train.nesterov", bool, True, "Nesterov momentum"),
    _k("train.weight_decay", float, 1e-4, "weight decay (not applied to BN parameters or biases)", *_nonneg),
    _k("train.checkpoint_every", int, 10, "checkpoint cadence in epochs (0 = only final)", *_nonneg),
    _k("train.augment", bool, False, "random crop and flip for image data"),
    _k("schedule.lambda_ini", str, "lnK", "self-paced threshold at epoch 1; 'lnK' = ln(num_classes)"),
    _k("schedule.lambda_lst", float, 1.0, "self-paced threshold at the last epoch (tunable; 1.0 suits desk runs)"),
    _k("variant.kind", str, "gaussian", "base training method", choices=VARIANTS),
    _k("variant.c1", float, 10.0, "consistency KL weight", *_nonneg),
    _k("variant.c2", float, 0.5, "consistency entropy weight", *_nonneg),
    _k("variant.c3", float, 5.0, "smoothmix mixing-loss weight", *_nonneg),
    _k("variant.steps", int, 4, "smoothmix ascent steps T", *_nonneg),
    _k("variant.step_size", float, 0.5, "smoothmix ascent step size", *_nonneg),
    _k("certify.n0", int, 100, "selection draws", *_ge1),
    _k("certify.n", int, 100_000, "estimation draws", *_ge1),
    _k("certify.alpha", float, 0.001, "failure probability", *_unit_open),
    _k("certify.batch_size", int, 1000, "noise draws per forward pass (performance only)", *_ge1),
    _k("certify.stride", int, 20, "certify every stride-th test example", *_ge1),
    _k("certify.max_examples", int, 0, "cap on certified examples after subsampling (0 = no cap)", *_nonneg),
    _k("certify.workers", int, 1, "parallel certification workers", *_ge1),
    _k("data.kind", str, "cifar10", "dataset", choices=DATA_KINDS),
    _k("data.path", str, "", "CIFAR-10 binary directory"),
    _k("data.dim", int, 8, "blobs: input dimension", *_ge1),
    _k("data.separation", float, 0.6, "blobs: distance between cluster centers", *_pos),
    _k("data.spread", float, 0.08, "blobs: per-coordinate standard deviation", *_pos),
    _k("data.train_count", int, 1000, "blobs: training examples", *_ge1),
    _k("data.test_count", int, 2000, "blobs: test examples", *_ge1),
    _k("run.seed", int, 0, "global seed; every random stream is derived from it"),
    _k("run.output_dir", str, "runs/spacte", "directory for checkpoints, logs and results"),
)
KEY_BY_NAME = {k.name: k for k in KEYS}


def _parse_value(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if key.kind is int:
            return int(raw.replace("_", ""))
        if key.kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key.name}: expected {key.kind.__name__}, got {raw!r}", key.name) from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    def __getitem__(self, name: str):
        return self.values[name]

    # ----------------------------------------------------------- views

    def input_shape(self) -> tuple[int, ...]:
        if self["data.kind"] == "blobs":
            return (self["data.dim"],)
        return tuple(int(s) for s in self["model.input_shape"].split(","))

    def num_classes(self) -> int:
        return 2 if self["data.kind"] == "blobs" else self["model.num_classes"]

    def architecture(self) -> ArchitectureSpec:
        arch, heads, k = self["model.arch"], self["heads.num_heads"], self.num_classes()
        split = self["model.split_index"]
        shape = self.input_shape()
        if arch in ("resnet110", "resnet"):
            spec = resnet_cifar(110 if arch == "resnet110" else self["model.depth"], heads, 2, k)
        elif arch == "desk_cnn":
            spec = desk_cnn(heads, k, shape)
        elif arch == "mlp":
            spec = mlp(int(shape[0]) if len(shape) == 1 else int(math.prod(shape)), k, heads, self["model.hidden"])
            spec = ArchitectureSpec(spec.layers, spec.split_index, heads, k, shape, "mlp")
        else:
            spec = linear_classifier(int(math.prod(shape)), k, heads)
            spec = ArchitectureSpec(spec.layers, 0, heads, k, shape, "linear")
        if split != "auto":
            spec = spec.with_heads(heads, int(split))
        return spec

    def lambda_ini(self) -> float | None:
        v = self["schedule.lambda_ini"]
        return None if v.lower() == "lnk" else float(v)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            sigma=self["noise.sigma"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            draws=self["noise.draws"],
            epsilon=self["heads.epsilon"],
            lambda_ini=self.lambda_ini(),
            lambda_lst=self["schedule.lambda_lst"],
            circular_teaching=self["heads.circular_teaching"],
            cosine=self["heads.cosine"],
            normalized_cosine=self["heads.normalized_cosine"],
            variant=VariantConfig(self["variant.kind"], self["variant.c1"], self["variant.c2"], self["variant.c3"],
                                  self["variant.steps"], self["variant.step_size"]),
            lr=LrSchedule(self["train.lr"], self["train.lr_decay"], self["train.lr_period"], self["train.momentum"],
                          self["train.weight_decay"], self["train.nesterov"]),
            augment=self["train.augment"],
            seed=self["run.seed"],
            checkpoint_every=self["train.checkpoint_every"],
        )

    def certify_config(self) -> CertifyConfig:
        return CertifyConfig(self["noise.sigma"], self["certify.n0"], self["certify.n"], self["certify.alpha"],
                             self["certify.batch_size"], self["run.seed"])


def _split_lines(text: str):
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        full = key if "." in key else f"{section}.{key}" if section else key
        yield lineno, full, value


def parse_and_validate(text: str, env: Mapping[str, str] | None = None) -> RunConfig:
    raw: dict[str, str] = {}
    for lineno, name, value in _split_lines(text):
        if name not in KEY_BY_NAME:
            raise ConfigError(f"line {lineno}: unknown key {name!r}", name)
        raw[name] = value
    for var, value in (env or {}).items():
        if not var.startswith(ENV_PREFIX):
            continue
        name = var[len(ENV_PREFIX):].lower().replace("__", ".")
        if name not in KEY_BY_NAME:
            raise ConfigError(f"environment variable {var} names unknown key {name!r}", name)
        raw[name] = value
    values = {}
    for key in KEYS:
        if key.name in raw:
            v = _parse_value(key, raw[key.name])
        elif key.default is REQUIRED:
            raise ConfigError(f"{key.name} required", key.name)
        else:
            v = key.default
        if key.choices and v not in key.choices:
            raise ConfigError(f"{key.name}: must be one of {', '.join(key.choices)}, got {v!r}", key.name)
        if key.check is not None and not key.check(v):
            raise ConfigError(f"{key.name}: must be {key.constraint}, got {v!r}", key.name)
        values[key.name] = v
    _cross_validate(values)
    cfg = RunConfig(values)
    cfg.architecture()  # shape errors surface before any work starts
    return cfg


def _cross_validate(v: dict) -> None:
    split = v["model.split_index"]
    if split != "auto":
        try:
            if int(split) < 0:
                raise ValueError
        except ValueError:
            raise ConfigError(f"model.split_index: must be 'auto' or an integer >= 0, got {split!r}",
                              "model.split_index") from None
    if v["schedule.lambda_ini"].lower() != "lnk":
        try:
            float(v["schedule.lambda_ini"])
        except ValueError:
            raise ConfigError("schedule.lambda_ini: must be 'lnK' or a number", "schedule.lambda_ini") from None
    try:
        shape = tuple(int(s) for s in v["model.input_shape"].split(","))
        if not shape or min(shape) < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"model.input_shape: expected positive comma-separated integers, got {v['model.input_shape']!r}",
                          "model.input_shape") from None
    if v["variant.kind"] == "consistency" and v["noise.draws"] < 2:
        raise ConfigError("noise.draws: consistency needs at least 2 draws", "noise.draws")
    if v["data.kind"] == "blobs" and v["model.arch"] in ("resnet110", "resnet", "desk_cnn"):
        raise ConfigError("model.arch: blobs are flat vectors; use 'mlp' or 'linear'", "model.arch")


def load_config(path, env: Mapping[str, str] | None = None) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_and_validate(text, os.environ if env is None else env)


def render(cfg: RunConfig | None = None, comments: bool = True) -> str:
    """Full config text; with ``cfg=None`` the defaults, leaving ``noise.sigma`` commented out."""
    lines, section = [], None
    for key in KEYS:
        sec, name = key.name.split(".", 1)
        if sec != section:
            if lines:
                lines.append("")
            lines.append(f"[{sec}]")
            section = sec
        if comments:
            lines.append(f"# {key.doc}")
        if cfg is None and key.default is REQUIRED:
            lines.append(f"# {name} = <required>")
            continue
        value = cfg[key.name] if cfg is not None else key.default
        lines.append(f"{name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def describe_keys() -> str:
    """One line per key with its default, for ``--help``."""
    out = []
    for key in KEYS:
        default = "(required)" if key.default is REQUIRED else _format_value(key.default)
        out.append(f"  {key.name:<26} {default:<12} {key.doc}")
    return "\n".join(out)
