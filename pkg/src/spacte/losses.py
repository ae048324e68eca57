"""Loss components for multi-head training under Gaussian noise.

All functions are pure. Tensor inputs keep their autograd graph; numpy or
plain-float inputs are converted to float64 tensors. Shapes follow the
convention ``(m draws, N samples, L heads, K classes)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError

VARIANTS = ("gaussian", "consistency", "smoothmix")


@dataclass(frozen=True)
class VariantConfig:
    kind: str = "gaussian"
    c1: float = 10.0  # consistency KL weight
    c2: float = 0.5  # consistency entropy weight
    c3: float = 5.0  # smoothmix mixing-loss weight
    steps: int = 4  # smoothmix ascent steps T
    step_size: float = 0.5

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.kind!r}", "variant.kind")
        for name in ("c1", "c2", "c3", "step_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"variant.{name} must be non-negative", f"variant.{name}")
        if self.steps < 0:
            raise ConfigError("variant.steps must be non-negative", "variant.steps")


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def cross_entropy(logits, labels) -> torch.Tensor:
    """-log softmax(logits)[label] along the last axis, via log-sum-exp."""
    logits = _t(logits)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits in cross_entropy")
    labels = torch.as_tensor(labels, dtype=torch.long)
    picked = logits.gather(-1, labels.unsqueeze(-1).expand(*logits.shape[:-1], 1)).squeeze(-1)
    return torch.logsumexp(logits, dim=-1) - picked


def _stack_heads(head_vectors) -> torch.Tensor:
    if isinstance(head_vectors, torch.Tensor):
        return head_vectors
    return torch.stack([_t(v) for v in head_vectors])


def cosine_diversity_loss(head_vectors, normalized: bool = False) -> torch.Tensor:
    """Sum over ordered pairs i != j of <h_i, h_j>^2 / (|h_i| |h_j|).

    With ``normalized=True`` the denominator is squared, giving a sum of
    squared cosines that is scale-free.
    """
    v = _stack_heads(head_vectors)
    if v.shape[0] < 2:
        raise InputError("cosine diversity needs at least two heads")
    norms = v.norm(dim=1)
    zero = (norms == 0).nonzero()
    if len(zero):
        raise NumericError(f"head {int(zero[0]) + 1} has a zero parameter vector")
    gram = v @ v.T
    denom = torch.outer(norms, norms)
    if normalized:
        denom = denom * denom
    terms = gram * gram / denom
    off = ~torch.eye(len(v), dtype=torch.bool)
    return terms[off].sum()


def cosine_diversity_grad(head_vectors: np.ndarray) -> np.ndarray:
    """Closed-form gradient of the unnormalized diversity loss w.r.t. each head vector."""
    v = np.asarray(head_vectors, dtype=np.float64)
    n = np.linalg.norm(v, axis=1)
    s = v @ v.T
    np.fill_diagonal(s, 0.0)
    # d/dh_i of s_ij^2/(n_i n_j) = 2 s_ij h_j/(n_i n_j) - s_ij^2 h_i/(n_i^3 n_j); each pair appears twice
    inv = 1.0 / np.outer(n, n)
    cross = (s * inv) @ v
    self_coef = ((s * s) * inv).sum(axis=1) / n**2
    return 2.0 * (2.0 * cross - self_coef[:, None] * v)


def head_weights(per_head_losses, epsilon: float) -> np.ndarray:
    """1-epsilon for the lowest-loss head (lowest index on ties), epsilon/(L-1) for the rest."""
    losses = np.asarray(per_head_losses.detach() if isinstance(per_head_losses, torch.Tensor) else per_head_losses,
                        dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise NumericError(f"non-finite head loss in {losses}")
    num_heads = losses.size
    if num_heads == 1:
        return np.ones(1)
    w = np.full(num_heads, epsilon / (num_heads - 1))
    w[int(np.argmin(losses))] = 1.0 - epsilon
    return w


def smoothed_loss(per_draw_losses):
    """Mean loss over the draw axis (axis 0)."""
    x = _t(per_draw_losses)
    if x.shape[0] == 0:
        raise InputError("smoothed loss over zero draws")
    return x.mean(0)


def spl_weight(smoothed, lam):
    """Self-paced weight: 1 when the loss is at most lambda, else (1+e^-lam)/(1+e^(loss-lam)).

    Not clamped: for lambda < 0 the soft branch may exceed 1.
    """
    s = _t(smoothed)
    lam = torch.as_tensor(lam, dtype=s.dtype)
    zero = torch.zeros((), dtype=s.dtype)
    soft = torch.exp(torch.logaddexp(zero, -lam) - torch.logaddexp(zero, s - lam))
    return torch.where(s <= lam, torch.ones_like(s), soft)


def circular_shift(nu):
    """Column k of the result is column k-1 of ``nu``; head 1 gets head L's column."""
    if isinstance(nu, torch.Tensor):
        return torch.roll(nu, shifts=1, dims=-1)
    return np.roll(nu, 1, axis=-1)


def weighted_loss(per_sample_loss, nu_shifted, omega) -> torch.Tensor:
    """(1/(N L)) sum_k omega_k sum_n nu_shifted[n, k] * per_sample_loss[n, k]."""
    loss = _t(per_sample_loss)
    nu_shifted = torch.as_tensor(nu_shifted, dtype=loss.dtype).detach()
    omega = torch.as_tensor(omega, dtype=loss.dtype).detach()
    if loss.shape != nu_shifted.shape or loss.shape[-1] != omega.shape[0]:
        raise InputError(f"shape mismatch: loss {tuple(loss.shape)}, nu {tuple(nu_shifted.shape)}, omega {tuple(omega.shape)}")
    n, num_heads = loss.shape
    return (loss * nu_shifted * omega).sum() / (n * num_heads)


def spacte_objective(logits, labels, nu_shifted, omega, cos_loss=0.0, extra=None) -> torch.Tensor:
    """Sample- and head-weighted cross-entropy over all draws plus the diversity term.

    ``logits`` has shape (m, N, L, K). ``extra`` is an optional (N, L)
    per-sample, per-head term weighted alongside the cross-entropy.
    """
    logits = _t(logits)
    if logits.dim() != 4:
        raise InputError(f"logits must be (m, N, L, K), got {tuple(logits.shape)}")
    m, n, num_heads, _ = logits.shape
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (n,):
        raise InputError(f"labels must have shape ({n},), got {tuple(labels.shape)}")
    ce = cross_entropy(logits, labels.view(1, n, 1).expand(m, n, num_heads))
    per_sample = ce.mean(0)
    if extra is not None:
        per_sample = per_sample + extra
    return weighted_loss(per_sample, nu_shifted, omega) + cos_loss


def _kl(log_p, log_q) -> torch.Tensor:
    return (log_p.exp() * (log_p - log_q)).sum(-1)


def consistency_terms(logits, c1: float, c2: float) -> torch.Tensor:
    """Per-sample, per-head consistency regularizer of shape (N, L).

    c1 * mean_i KL(p_i || p_hat) + c2 * H(p_hat), where p_i is the softmax of
    draw i and p_hat the mean of those softmaxes.
    """
    logits = _t(logits)
    if logits.shape[0] < 2:
        raise ConfigError("consistency regularization needs at least 2 noise draws", "noise.draws")
    log_p = F.log_softmax(logits, dim=-1)
    p_hat = log_p.exp().mean(0)
    log_p_hat = torch.log(p_hat.clamp_min(1e-30))
    kl = _kl(log_p, log_p_hat.unsqueeze(0)).mean(0)
    entropy = -(p_hat * log_p_hat).sum(-1)
    return c1 * kl + c2 * entropy


def mix_targets(x, x_adv, f_tilde, c4):
    """Mixed inputs and soft targets; ``c4`` is per sample, ``f_tilde`` (N, K) probabilities."""
    c4 = torch.as_tensor(c4, dtype=x.dtype)
    shape = (-1,) + (1,) * (x.dim() - 1)
    x_mix = (1 - c4.view(shape)) * x + c4.view(shape) * x_adv
    num_classes = f_tilde.shape[-1]
    c4 = c4.to(f_tilde.dtype).view(-1, 1)
    y_mix = (1 - c4) * f_tilde + c4 / num_classes
    return x_mix, y_mix


def smoothed_ensemble_adversary(net, x, labels, deltas, steps: int, step_size: float) -> torch.Tensor:
    """``steps`` normalized-gradient ascent steps on the noise-averaged ensemble cross-entropy.

    ``deltas`` (m, N, ...) are reused at every step. Runs the network in eval
    mode so batch-norm statistics are untouched.
    """
    x_adv = x.detach().clone()
    if steps == 0 or step_size == 0:
        return x_adv
    was_training = net.training
    net.eval()
    m, n = deltas.shape[:2]
    try:
        for _ in range(steps):
            x_adv.requires_grad_(True)
            noisy = (x_adv.unsqueeze(0) + deltas).reshape(m * n, *x.shape[1:])
            ens = net(noisy).mean(1).view(m, n, -1)
            loss = cross_entropy(ens, labels.unsqueeze(0).expand(m, n)).mean(0).sum()
            (grad,) = torch.autograd.grad(loss, x_adv)
            norm = grad.reshape(n, -1).norm(dim=1).clamp_min(1e-12).view(-1, *([1] * (x.dim() - 1)))
            x_adv = (x_adv + step_size * grad / norm).detach()
    finally:
        net.train(was_training)
    return x_adv


def smoothmix_terms(net, x, labels, logits, deltas, variant: VariantConfig, generator: torch.Generator,
                    c4=None) -> torch.Tensor:
    """Per-sample, per-head mixing loss c3 * KL(softmax f^k(x_mix) || y_mix), shape (N, L).

    ``logits`` (m, N, L, K) are the network outputs on ``x + deltas`` from the
    main forward pass; their noise-averaged ensemble gives the clean soft target.
    """
    n = x.shape[0]
    if variant.c3 == 0:
        return torch.zeros(n, net.num_heads, dtype=logits.dtype)
    if c4 is None:
        c4 = 0.5 * torch.rand(n, generator=generator, dtype=torch.float64)
    f_tilde = F.softmax(logits.detach().mean(dim=(0, 2)), dim=-1)
    x_adv = smoothed_ensemble_adversary(net, x, labels, deltas, variant.steps, variant.step_size)
    x_mix, y_mix = mix_targets(x, x_adv, f_tilde, c4)
    log_p = F.log_softmax(net(x_mix.detach()), dim=-1)
    log_y = torch.log(y_mix.detach().clamp_min(1e-30)).to(log_p.dtype).unsqueeze(1)
    return variant.c3 * _kl(log_p, log_y)

