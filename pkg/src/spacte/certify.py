"""Randomized-smoothing prediction and certification of the head ensemble.

The base classifier is argmax of the head-averaged logits. Every example owns
a noise stream derived from ``(seed, example index)``, drawn sequentially in
float64 and cast to float32, so counts do not depend on the sampling batch
size, the evaluation order, or the number of workers.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import betainc
from scipy.stats import binomtest

from .errors import ConfigError
from .seeding import numpy_rng

ABSTAIN = -1


@dataclass(frozen=True)
class CertifyConfig:
    sigma: float
    n0: int = 100
    n: int = 100_000
    alpha: float = 0.001
    batch_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n0 < 1:
            raise ConfigError("certify.n0 must be >= 1", "certify.n0")
        if self.n < 1:
            raise ConfigError("certify.n must be >= 1", "certify.n")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"certify.alpha must lie in (0, 1), got {self.alpha}", "certify.alpha")
        if self.sigma < 0:
            raise ConfigError("noise.sigma must be non-negative", "noise.sigma")
        if self.batch_size < 1:
            raise ConfigError("certify.batch_size must be >= 1", "certify.batch_size")


@dataclass(frozen=True)
class CertificationRecord:
    idx: int
    label: int
    predict: int
    radius: float
    correct: bool
    seconds: float = 0.0

    def tsv_line(self) -> str:
        return f"{self.idx}\t{self.label}\t{self.predict}\t{self.radius:.3f}\t{int(self.correct)}\t{self.seconds:.4f}"


TSV_HEADER = "idx\tlabel\tpredict\tradius\tcorrect\ttime"


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        fh.write(TSV_HEADER + "\n")
        for r in records:
            fh.write(r.tsv_line() + "\n")


def read_records(path) -> list[CertificationRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("idx"):
                continue
            idx, label, predict, radius, correct, seconds = line.split("\t")
            out.append(CertificationRecord(int(idx), int(label), int(predict), float(radius),
                                           correct == "1", float(seconds)))
    return out


# ---------------------------------------------------------------- statistics


def lower_conf_bound(k: int, n: int, alpha: float, tol: float = 1e-12) -> float:
    """One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial proportion.

    This is the alpha-quantile of Beta(k, n - k + 1), found by bisection on the
    regularized incomplete beta function.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}", "certify.alpha")
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if k == 0:
        return 0.0
    if k == n:
        return alpha ** (1.0 / n)
    a, b = float(k), float(n - k + 1)
    lo, hi = 0.0, k / n
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if betainc(a, b, mid) < alpha:
            lo = mid
        else:
            hi = mid
    return lo


_ACKLAM_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
             1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_ACKLAM_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
             6.680131188771972e01, -1.328068155288572e01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
             -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)


def _poly(coef, x):
    acc = 0.0
    for c in coef:
        acc = acc * x + c
    return acc


def normal_quantile(p: float) -> float:
    """Standard normal inverse CDF: Acklam's rational approximation plus one Halley step on erfc."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile needs 0 < p < 1, got {p}")
    if p > 0.5:
        return -normal_quantile(1.0 - p)
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = _poly(_ACKLAM_C, q) / (_poly(_ACKLAM_D, q) * q + 1.0)
    else:
        q = p - 0.5
        r = q * q
        x = _poly(_ACKLAM_A, r) * q / (_poly(_ACKLAM_B, r) * r + 1.0)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


# ---------------------------------------------------------------- sampling


def base_classifier(network):
    """argmax of the ensemble logits, as a batch -> class-index function."""

    def classify(batch: torch.Tensor) -> torch.Tensor:
        return network(batch).mean(1).argmax(1)

    return classify


def sample_counts(classify, x, count: int, sigma: float, rng: np.random.Generator, num_classes: int,
                  batch_size: int = 1000) -> np.ndarray:
    """Class counts of ``classify`` over ``count`` draws of x + N(0, sigma^2 I)."""
    x64 = np.asarray(x, dtype=np.float64)
    counts = np.zeros(num_classes, dtype=np.int64)
    remaining = count
    with torch.no_grad():
        while remaining > 0:
            this = min(batch_size, remaining)
            remaining -= this
            noise = rng.standard_normal((this, *x64.shape)) * sigma
            batch = torch.from_numpy((x64[None] + noise).astype(np.float32))
            pred = classify(batch).numpy()
            counts += np.bincount(pred, minlength=num_classes)
    return counts


def _example_rng(cfg: CertifyConfig, idx: int) -> np.random.Generator:
    return numpy_rng(cfg.seed, "certify", idx)


def certify(network, x, label: int, cfg: CertifyConfig, idx: int = 0) -> CertificationRecord:
    """Guess the top class from n0 draws, lower-bound its probability from n fresh draws, return the radius."""
    start = time.perf_counter()
    network.eval()
    classify = base_classifier(network)
    num_classes = network.spec.num_classes
    rng = _example_rng(cfg, idx)
    counts0 = sample_counts(classify, x, cfg.n0, cfg.sigma, rng, num_classes, cfg.batch_size)
    c_hat = int(np.argmax(counts0))
    counts = sample_counts(classify, x, cfg.n, cfg.sigma, rng, num_classes, cfg.batch_size)
    p_lower = lower_conf_bound(int(counts[c_hat]), cfg.n, cfg.alpha)
    if p_lower <= 0.5:
        prediction, radius = ABSTAIN, 0.0
    else:
        prediction, radius = c_hat, cfg.sigma * normal_quantile(p_lower)
    return CertificationRecord(idx, int(label), prediction, radius, prediction == int(label),
                               time.perf_counter() - start)


def radius_from_bound(p_lower: float, sigma: float) -> float:
    return sigma * normal_quantile(p_lower) if p_lower > 0.5 else 0.0


def predict(network, x, cfg: CertifyConfig, idx: int = 0) -> int:
    """Top class if a two-sided binomial test separates it from the runner-up at level alpha, else ABSTAIN."""
    network.eval()
    counts = sample_counts(base_classifier(network), x, cfg.n, cfg.sigma, numpy_rng(cfg.seed, "predict", idx),
                           network.spec.num_classes, cfg.batch_size)
    return predict_from_counts(counts, cfg.alpha)


def predict_from_counts(counts, alpha: float) -> int:
    order = np.argsort(-np.asarray(counts), kind="stable")
    n_a, n_b = int(counts[order[0]]), int(counts[order[1]]) if len(counts) > 1 else 0
    if n_a + n_b == 0 or binomtest(n_a, n_a + n_b, 0.5).pvalue > alpha:
        return ABSTAIN
    return int(order[0])


def certify_dataset(network, dataset, cfg: CertifyConfig, workers: int = 1, progress=None) -> list[CertificationRecord]:
    """Certify every example; records come back in dataset order whatever ``workers`` is."""
    network.eval()

    def one(pos: int) -> CertificationRecord:
        rec = certify(network, dataset.x[pos], int(dataset.y[pos]), cfg, int(dataset.indices[pos]))
        if progress is not None:
            progress(rec)
        return rec

    positions = range(len(dataset))
    if workers <= 1:
        return [one(p) for p in positions]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, positions))
