"""Adversarially robust out-of-distribution detection: scores, attacks, training and evaluation."""

from .attacks import AttackConfig, attack_classifier, attack_detector, fgsm, pgd
from .atd import AtdBundle, AtdConfig, train_atd
from .evaluation import EvalReport, EvalSetting, auroc, evaluate
from .scores import DiscriminatorScore, MahalanobisScore, MSPScore, OpenMaxScore, build_score

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "attack_classifier", "attack_detector", "fgsm", "pgd",
    "AtdBundle", "AtdConfig", "train_atd",
    "EvalReport", "EvalSetting", "auroc", "evaluate",
    "DiscriminatorScore", "MahalanobisScore", "MSPScore", "OpenMaxScore", "build_score",
]
