"""Evaluation: ACR, certified-accuracy curves, log-probability gaps, easy/hard analysis, runtime reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError
from .seeding import numpy_rng

DEFAULT_GRID = tuple(np.round(np.arange(0.0, 2.26, 0.25), 2))


def _radii_correct(records):
    if len(records) == 0:
        raise InputError("no certification records")
    radius = np.array([r.radius for r in records], dtype=np.float64)
    correct = np.array([bool(r.correct) for r in records])
    return radius, correct


def acr(records) -> float:
    """Average certified radius over all records; wrong or abstained ones count as 0."""
    radius, correct = _radii_correct(records)
    return float(np.mean(np.where(correct, radius, 0.0)))


def certified_accuracy(records, r: float) -> float:
    """Fraction of records that are correct with radius >= r."""
    if r < 0:
        raise InputError("radius must be non-negative")
    radius, correct = _radii_correct(records)
    return float(np.mean(correct & (radius >= r)))


@dataclass
class CertifiedCurve:
    radii: np.ndarray
    accuracy: np.ndarray
    acr: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["radius", "accuracy"])
            for r, a in zip(self.radii, self.accuracy):
                w.writerow([f"{r:.3f}", f"{a:.4f}"])


def certified_curve(records, grid=DEFAULT_GRID) -> CertifiedCurve:
    grid = np.asarray(grid, dtype=np.float64)
    return CertifiedCurve(grid, np.array([certified_accuracy(records, r) for r in grid]), acr(records))


def acr_by_quadrature(records, points: int = 20001) -> float:
    """Trapezoid integral of the certified-accuracy curve from 0 to the largest radius."""
    radius, _ = _radii_correct(records)
    top = float(radius.max())
    if top == 0:
        return 0.0
    grid = np.linspace(0.0, top, points)
    acc = np.array([certified_accuracy(records, r) for r in grid])
    return float(np.trapezoid(acc, grid))


# ---------------------------------------------------------------- gaps


def log_prob_gap_samples(network, x, y: int, sigma: float, draws: int, rng: np.random.Generator,
                         batch_size: int = 1000) -> np.ndarray:
    """Per-draw log f_y - max_{c != y} log f_c of the softmaxed ensemble logits at x + noise."""
    if draws < 1:
        raise InputError("draws must be >= 1")
    network.eval()
    x64 = np.asarray(x, dtype=np.float64)
    out = []
    with torch.no_grad():
        for start in range(0, draws, batch_size):
            this = min(batch_size, draws - start)
            noisy = x64[None] + sigma * rng.standard_normal((this, *x64.shape))
            logp = F.log_softmax(network(torch.from_numpy(noisy.astype(np.float32))).mean(1).double(), dim=-1)
            out.append(gap_from_log_probs(logp, y))
    return np.concatenate(out)


def gap_from_log_probs(logp, y: int) -> np.ndarray:
    logp = torch.as_tensor(logp, dtype=torch.float64)
    others = logp.clone()
    others[..., y] = -torch.inf
    return (logp[..., y] - others.max(-1).values).numpy()


def write_histogram_csv(path, counts, edges) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])


# ---------------------------------------------------------------- easy / hard


def per_sample_noise_stats(network, x, y: int, sigma: float, m: int, draws: int,
                           rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Smoothed ensemble loss over ``m`` draws, and top-1 correctness on each of ``draws`` further draws."""
    network.eval()
    x64 = np.asarray(x, dtype=np.float64)
    noisy = x64[None] + sigma * rng.standard_normal((m + draws, *x64.shape))
    with torch.no_grad():
        logits = network(torch.from_numpy(noisy.astype(np.float32))).mean(1).double()
    ce = torch.logsumexp(logits, -1) - logits[:, y]
    return float(ce[:m].mean()), (logits[m:].argmax(-1) == y).numpy()


@dataclass
class GroupStats:
    name: str
    count: int
    mean_loss: float = float("nan")
    var_loss: float = float("nan")
    mean_accuracy: float = float("nan")
    var_accuracy: float = float("nan")

    @property
    def empty(self) -> bool:
        return self.count == 0


def summarize_groups(radii, smoothed_losses, draw_accuracy, threshold: float) -> dict[str, GroupStats]:
    """Split at ``threshold``: easy means radius > threshold, hard means radius <= threshold."""
    radii = np.asarray(radii, dtype=np.float64)
    losses = np.asarray(smoothed_losses, dtype=np.float64)
    acc = np.asarray(draw_accuracy, dtype=np.float64)
    out = {}
    for name, mask in (("easy", radii > threshold), ("hard", radii <= threshold)):
        if not mask.any():
            out[name] = GroupStats(name, 0)
            continue
        out[name] = GroupStats(name, int(mask.sum()), float(losses[mask].mean()), float(losses[mask].var()),
                               float(acc[mask].mean()), float(acc[mask].var()))
    return out


def easy_hard_report(network, records, dataset, threshold: float, sigma: float, m: int = 2, draws: int = 10,
                     seed: int = 0, correct_only: bool = False) -> dict[str, GroupStats]:
    """Group certified examples into easy/hard by radius and compare their smoothed losses.

    ``dataset`` must contain the examples named by the records' ``idx``.
    """
    pos_of = {int(i): p for p, i in enumerate(dataset.indices)}
    chosen = [r for r in records if not correct_only or r.correct]
    radii, sm, acc = [], [], []
    for r in chosen:
        p = pos_of[r.idx]
        loss, hits = per_sample_noise_stats(network, dataset.x[p], int(dataset.y[p]), sigma, m, draws,
                                            numpy_rng(seed, "easy-hard", r.idx))
        radii.append(r.radius)
        sm.append(loss)
        acc.append(hits.mean())
    return summarize_groups(radii, sm, acc, threshold)


def write_groups_csv(path, groups: dict[str, GroupStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "count", "mean_smoothed_loss", "var_smoothed_loss", "mean_draw_accuracy", "var_draw_accuracy"])
        for g in groups.values():
            w.writerow([g.name, g.count] + ["" if g.empty else f"{v:.6f}"
                                            for v in (g.mean_loss, g.var_loss, g.mean_accuracy, g.var_accuracy)])


# ---------------------------------------------------------------- runtime


def runtime_report(timings: dict, cost_report=None) -> str:
    """Plain-text timing summary.

    ``timings`` may hold ``certify_seconds`` (per-sample list) and
    ``epoch_seconds`` (per-epoch list).
    """
    lines = []
    cert = list(timings.get("certify_seconds", []))
    if cert:
        total = float(np.sum(cert))
        lines += [f"certified samples        {len(cert)}",
                  f"certify s/sample         {total / len(cert):.4f}",
                  f"certify total s          {total:.2f}"]
    ep = list(timings.get("epoch_seconds", []))
    if ep:
        lines += [f"epochs                   {len(ep)}",
                  f"train s/epoch            {float(np.mean(ep)):.4f}",
                  f"train total s            {float(np.sum(ep)):.2f}"]
    if cost_report is not None:
        lines.append(cost_report.as_text())
    return "\n".join(lines)

