"""Multi-head randomized smoothing with self-paced circular teaching."""
from .certify import ABSTAIN, CertificationRecord, CertifyConfig, certify, lower_conf_bound, normal_quantile, predict
from .model import ArchitectureSpec, LayerSpec, MultiHeadNetwork, build_network, cost_report
from .trainer import TrainConfig, train

__all__ = [
    "ABSTAIN",
    "ArchitectureSpec",
    "CertificationRecord",
    "CertifyConfig",
    "LayerSpec",
    "MultiHeadNetwork",
    "TrainConfig",
    "build_network",
    "certify",
    "cost_report",
    "lower_conf_bound",
    "normal_quantile",
    "predict",
    "train",
]
