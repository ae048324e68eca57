"""Training loop: noisy forward passes, self-paced weights taught around the head ring, weighted update.

One iteration:

1. draw m noise tensors per sample (shared by all heads);
2. per-head smoothed loss = mean cross-entropy over the m draws;
3. self-paced weights nu from the smoothed losses and the epoch's lambda;
4. head weights omega from per-head mean loss on the noisy batch;
5. rotate nu one head forward so head k is weighted by head k-1;
6. variant objective plus diversity term;
7. one SGD step.

nu and omega are plain data (no gradient path). All randomness comes from
sub-seeds of ``(seed, epoch, iteration)``, which makes resuming from a
checkpoint reproduce the uninterrupted run bit for bit.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import losses
from .data import Dataset
from .errors import ConfigError, TrainingError
from .losses import VariantConfig
from .model import ArchitectureSpec, MultiHeadNetwork, build_network, head_param_vector
from .schedule import LambdaSchedule, LrSchedule, lambda_at_epoch, lr_at_epoch
from .seeding import numpy_rng, torch_generator

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPACTE-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    sigma: float
    epochs: int = 150
    batch_size: int = 256
    draws: int = 2
    epsilon: float = 0.8
    lambda_ini: float | None = None  # None -> ln K
    lambda_lst: float = 1.0
    circular_teaching: bool = True
    cosine: bool = True
    normalized_cosine: bool = False
    variant: VariantConfig = field(default_factory=VariantConfig)
    lr: LrSchedule = field(default_factory=LrSchedule)
    augment: bool = False
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1", "train.batch_size")
        if self.draws < 1:
            raise ConfigError("noise.draws must be >= 1", "noise.draws")
        if self.sigma < 0:
            raise ConfigError("noise.sigma must be non-negative", "noise.sigma")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"heads.epsilon must lie in (0, 1), got {self.epsilon}", "heads.epsilon")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0", "train.epochs")

    def lambda_schedule(self, num_classes: int) -> LambdaSchedule:
        ini = math.log(num_classes) if self.lambda_ini is None else self.lambda_ini
        return LambdaSchedule(ini, self.lambda_lst, self.epochs)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class IterationLog:
    smoothed_loss: np.ndarray  # per head, mean over the batch
    easy_fraction: np.ndarray  # per head, fraction with nu == 1
    cosine_loss: float
    omega_argmin: int
    objective: float
    nu: torch.Tensor  # (N, L) as computed from each head's smoothed losses
    nu_shifted: torch.Tensor  # (N, L) as used in the update


@dataclass
class TrainState:
    network: MultiHeadNetwork
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    iterations: int = 0
    history: list = field(default_factory=list)  # one dict per finished epoch


def make_optimizer(net: nn.Module, lr: LrSchedule) -> torch.optim.SGD:
    # no weight decay on batch-norm scale/shift or biases
    decay, no_decay = [], []
    for module in net.modules():
        for name, p in module.named_parameters(recurse=False):
            if isinstance(module, nn.BatchNorm2d) or name == "bias":
                no_decay.append(p)
            else:
                decay.append(p)
    groups = [{"params": decay, "weight_decay": lr.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.SGD(groups, lr=lr.initial, momentum=lr.momentum, dampening=0.0, nesterov=lr.nesterov)


def init_state(spec: ArchitectureSpec, cfg: TrainConfig) -> TrainState:
    net = build_network(spec, cfg.seed)
    return TrainState(net, make_optimizer(net, cfg.lr))


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random horizontal flip and 4-pixel-padded random crop, images only."""
    if x.dim() != 4:
        return x
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip.view(-1, 1, 1, 1), x.flip(3), x)
    padded = torch.nn.functional.pad(x, (4, 4, 4, 4))
    dy = torch.randint(0, 9, (n,), generator=gen)
    dx = torch.randint(0, 9, (n,), generator=gen)
    return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def diversity_loss(net: MultiHeadNetwork, cfg: TrainConfig) -> torch.Tensor:
    if not cfg.cosine or net.num_heads < 2:
        return torch.zeros(())
    vectors = [head_param_vector(net, k) for k in range(1, net.num_heads + 1)]
    return losses.cosine_diversity_loss(vectors, normalized=cfg.normalized_cosine)


def iteration_objective(net: MultiHeadNetwork, x: torch.Tensor, y: torch.Tensor, deltas: torch.Tensor,
                        lam: float, cfg: TrainConfig, gen: torch.Generator, nu_override=None):
    """Objective of one iteration on fixed noise ``deltas`` (m, N, ...); returns (objective, IterationLog)."""
    m, n = deltas.shape[:2]
    noisy = (x.unsqueeze(0) + deltas).reshape(m * n, *x.shape[1:])
    logits = net(noisy).view(m, n, net.num_heads, -1)
    bad = (~torch.isfinite(logits)).any(-1).nonzero()
    if len(bad):
        _, sample, head = bad[0].tolist()
        raise TrainingError(f"non-finite loss at head {head + 1}, sample {sample}")
    ce = losses.cross_entropy(logits, y.view(1, n, 1).expand(m, n, net.num_heads))
    smoothed = losses.smoothed_loss(ce.detach())  # (N, L)
    if nu_override is not None:
        nu = torch.as_tensor(nu_override, dtype=smoothed.dtype).expand_as(smoothed).clone()
    elif cfg.circular_teaching:
        nu = losses.spl_weight(smoothed, lam)
    else:
        nu = torch.ones_like(smoothed)
    nu_shifted = losses.circular_shift(nu)
    omega = losses.head_weights(smoothed.mean(0), cfg.epsilon)

    extra = None
    if cfg.variant.kind == "consistency":
        extra = losses.consistency_terms(logits, cfg.variant.c1, cfg.variant.c2)
    elif cfg.variant.kind == "smoothmix":
        extra = losses.smoothmix_terms(net, x, y, logits, deltas, cfg.variant, gen)
    cos = diversity_loss(net, cfg)
    objective = losses.weighted_loss(ce.mean(0) + (0 if extra is None else extra), nu_shifted, omega) + cos
    record = IterationLog(
        smoothed_loss=smoothed.mean(0).numpy(),
        easy_fraction=(nu == 1).to(torch.float64).mean(0).numpy(),
        cosine_loss=float(cos.detach()),
        omega_argmin=int(torch.argmin(smoothed.mean(0))),
        objective=float(objective.detach()),
        nu=nu,
        nu_shifted=nu_shifted,
    )
    return objective, record


def sample_deltas(x: torch.Tensor, m: int, sigma: float, gen: torch.Generator) -> torch.Tensor:
    return sigma * torch.randn((m, *x.shape), generator=gen, dtype=x.dtype)


def train_iteration(state: TrainState, x: torch.Tensor, y: torch.Tensor, lam: float, cfg: TrainConfig,
                    gen: torch.Generator, nu_override=None) -> IterationLog:
    if len(x) == 0:
        raise TrainingError("empty batch")
    net = state.network
    net.train()
    if cfg.augment:
        x = _augment(x, gen)
    deltas = sample_deltas(x, cfg.draws, cfg.sigma, gen)
    objective, record = iteration_objective(net, x, y, deltas, lam, cfg, gen, nu_override)
    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    for name, p in net.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {name} at iteration {state.iterations}")
    state.optimizer.step()
    state.iterations += 1
    return record


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState, spec: ArchitectureSpec, cfg: TrainConfig, extra_header: dict | None = None) -> None:
    """Magic line, 8-byte header length, JSON header, then a torch payload."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": spec.to_dict(),
        "train_config_sha256": cfg.digest(),
        "sigma": cfg.sigma,
        "epoch": state.epoch,
        "iterations": state.iterations,
        **(extra_header or {}),
    }
    buf = io.BytesIO()
    torch.save({"model": state.network.state_dict(), "optimizer": state.optimizer.state_dict(),
                "history": state.history}, buf)
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(len(head).to_bytes(8, "little"))
            fh.write(head)
            fh.write(buf.getvalue())
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"could not read checkpoint {path}: {exc}") from exc
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    size = int.from_bytes(raw[pos:pos + 8], "little")
    header = json.loads(raw[pos + 8:pos + 8 + size])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header, raw[pos + 8 + size:]


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[TrainState, ArchitectureSpec, dict]:
    header, payload = read_checkpoint_header(path)
    spec = ArchitectureSpec.from_dict(header["architecture"])
    blob = torch.load(io.BytesIO(payload), weights_only=False)
    net = MultiHeadNetwork(spec)
    net.load_state_dict(blob["model"])
    opt = make_optimizer(net, cfg.lr if cfg is not None else LrSchedule())
    opt.load_state_dict(blob["optimizer"])
    state = TrainState(net, opt, header["epoch"], header["iterations"], blob["history"])
    return state, spec, header


# ---------------------------------------------------------------- loop


@dataclass
class TrainReport:
    epochs_run: int
    iterations: int
    history: list
    seconds_per_epoch: list


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = numpy_rng(seed, "shuffle", epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(spec: ArchitectureSpec, cfg: TrainConfig, dataset: Dataset, checkpoint_dir=None, resume_from=None,
          stop_after: int | None = None, on_epoch=None, extra_header: dict | None = None) -> tuple[TrainState, TrainReport]:
    """Run epochs ``state.epoch + 1 .. cfg.epochs`` (or up to ``stop_after``)."""
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    if resume_from is not None:
        state, saved_spec, header = load_checkpoint(resume_from, cfg)
        if saved_spec != spec:
            raise ConfigError("checkpoint architecture does not match the configured one", "model")
        if header["train_config_sha256"] != cfg.digest():
            log.warning("resuming with a different training config than the checkpoint's")
    else:
        state = init_state(spec, cfg)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    lam_sched = cfg.lambda_schedule(spec.num_classes)
    x_all = torch.from_numpy(dataset.x)
    y_all = torch.from_numpy(dataset.y)
    seconds = []
    for epoch in range(state.epoch + 1, last + 1):
        start = time.perf_counter()
        # a one-epoch run has no schedule to interpolate; it stays at lambda_ini
        lam = lambda_at_epoch(lam_sched, epoch) if cfg.epochs >= 2 else lam_sched.b
        if lam < 0:
            log.warning("epoch %d: lambda %.4f < 0, self-paced weights can exceed 1", epoch, lam)
        lr = lr_at_epoch(cfg.lr, epoch)
        _set_lr(state.optimizer, lr)
        logs = []
        for it, idx in enumerate(_epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch)):
            gen = torch_generator(cfg.seed, "iteration", epoch, it)
            idx_t = torch.from_numpy(idx)
            logs.append(train_iteration(state, x_all[idx_t], y_all[idx_t], lam, cfg, gen))
        state.epoch = epoch
        weights = np.array([len(b) for b in _epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch)], float)
        summary = {
            "epoch": epoch,
            "lambda": lam,
            "lr": lr,
            "smoothed_loss": (np.stack([r.smoothed_loss for r in logs]) * weights[:, None]).sum(0) / weights.sum(),
            "easy_fraction": (np.stack([r.easy_fraction for r in logs]) * weights[:, None]).sum(0) / weights.sum(),
            "cosine_loss": logs[-1].cosine_loss,
        }
        summary = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in summary.items()}
        state.history.append(summary)
        seconds.append(time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(summary)
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:04d}.ckpt", state, spec, cfg, extra_header)
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "final.ckpt", state, spec, cfg, extra_header)
    return state, TrainReport(state.epoch, state.iterations, state.history, seconds)


def initial_smoothed_loss(state_or_net, dataset: Dataset, cfg: TrainConfig) -> float:
    """Mean per-head smoothed loss over a dataset, in eval mode, on fixed noise."""
    net = state_or_net.network if isinstance(state_or_net, TrainState) else state_or_net
    was = net.training
    net.eval()
    gen = torch_generator(cfg.seed, "eval-loss")
    x = torch.from_numpy(dataset.x)
    y = torch.from_numpy(dataset.y)
    with torch.no_grad():
        deltas = sample_deltas(x, cfg.draws, cfg.sigma, gen)
        m, n = deltas.shape[:2]
        logits = net((x.unsqueeze(0) + deltas).reshape(m * n, *x.shape[1:])).view(m, n, net.num_heads, -1)
        ce = losses.cross_entropy(logits, y.view(1, n, 1).expand(m, n, net.num_heads))
    net.train(was)
    return float(ce.mean())

