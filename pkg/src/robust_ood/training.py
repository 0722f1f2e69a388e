"""Classifier training: standard, adversarial (AT), and outlier exposure with clean (AOE) or attacked (ALOE) outliers."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .attacks import AttackConfig, attack_classifier, pgd, uniform_ce, uniform_label_loss
from .data import SampleBatch
from .errors import ConfigurationError, TrainingError
from .models import Classifier, build_classifier, eval_mode, freeze, load_checkpoint, param_hash, strip_head

log = logging.getLogger(__name__)

OBJECTIVES = ("standard", "AT", "AOE", "ALOE")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    attack: AttackConfig | None = None
    aloe_lambda: float = 0.5
    objective: str = "standard"
    seed: int = 0
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay: float = 0.1

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}", "objective")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0", "epochs")
        if self.aloe_lambda < 0:
            raise ConfigurationError("aloe_lambda must be >= 0", "aloe_lambda")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}", "optimizer")
        self.betas = tuple(self.betas)
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = None if self.attack is None else self.attack.to_dict()
        d["betas"] = list(self.betas)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


def uniform_label(k: int) -> torch.Tensor:
    return torch.full((k,), 1.0 / k)


@dataclass
class TrainResult:
    model: Classifier
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    attack_calls: int = 0
    trajectory: list[str] = field(default_factory=list)

    def write_history(self, path):
        write_history_csv(self.history, path)


def write_history_csv(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for row in history for k in row}, key=lambda k: (k != "epoch", k))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def make_optimizer(params, cfg):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _role(data, role):
    if isinstance(data, SampleBatch):
        return data if role == "in-train" else None
    return data.get(role)


def _cycle(batch: SampleBatch, size, generator):
    while True:
        yield from batch.batches(size, generator)


def fit_classifier(model: Classifier, data, cfg: TrainConfig, record_trajectory: bool = False) -> TrainResult:
    """Shared loop behind all four objectives.

    In-batch attacks, outlier shuffling and outlier attacks draw from
    separate generators, so switching off a term (epsilon=0, lambda=0)
    leaves the rest of the run bit-identical.
    """
    train = _role(data, "in-train")
    if train is None or train.labels is None:
        raise ConfigurationError("training needs a labelled in-train split", "data")
    kind = cfg.objective
    adversarial_in = kind in ("AT", "AOE", "ALOE")
    use_outliers = kind in ("AOE", "ALOE")
    if adversarial_in and cfg.attack is None:
        raise ConfigurationError(f"{kind} training needs an attack config", "attack")
    outliers = _role(data, "out-exposure") if use_outliers else None
    if use_outliers and outliers is None:
        raise ConfigurationError(f"{kind} training needs an out-exposure split", "out-exposure")

    g_shuffle = torch.Generator().manual_seed(cfg.seed)
    g_out = torch.Generator().manual_seed(cfg.seed + 1)
    g_att_in = torch.Generator().manual_seed(cfg.seed + 2)
    g_att_out = torch.Generator().manual_seed(cfg.seed + 3)
    opt = make_optimizer(model.parameters(), cfg)
    sched = None
    if cfg.lr_decay_epochs:
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.lr_decay_epochs), cfg.lr_decay)
    out_iter = _cycle(outliers, cfg.batch_size, g_out) if use_outliers else None
    result = TrainResult(model)
    dtype = next(model.parameters()).dtype

    for epoch in range(cfg.epochs):
        model.train()
        tot_loss, tot_correct, tot_n = 0.0, 0, 0
        for batch in train.batches(cfg.batch_size, g_shuffle):
            x, y = batch.inputs.to(dtype), batch.labels
            if adversarial_in:
                x = attack_classifier(x, y, model, cfg.attack, generator=g_att_in)
                result.attack_calls += 1
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if use_outliers:
                xo = next(out_iter).inputs.to(dtype)
                if kind == "ALOE":
                    with eval_mode(model):
                        xo = pgd(xo, uniform_label_loss(model), cfg.attack, generator=g_att_out)
                loss = loss + cfg.aloe_lambda * uniform_ce(model(xo)).mean()
            if not torch.isfinite(loss):
                raise TrainingError("non-finite training loss", step=result.steps, term=kind)
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.steps += 1
            if record_trajectory:
                result.trajectory.append(param_hash(model))
            tot_loss += loss.item() * len(y)
            tot_correct += int((logits.argmax(1) == y).sum())
            tot_n += len(y)
        if sched is not None:
            sched.step()
        result.history.append({"epoch": epoch + 1, "loss": tot_loss / tot_n, "train_acc": tot_correct / tot_n,
                               "steps": result.steps, "attack_calls": result.attack_calls})
        log.debug("epoch %d %s", epoch + 1, result.history[-1])
    model.eval()
    return result


def train_standard(model, data, cfg: TrainConfig, **kw) -> TrainResult:
    return fit_classifier(model, data, _with(cfg, "standard"), **kw)


def train_at(model, data, cfg: TrainConfig, **kw) -> TrainResult:
    return fit_classifier(model, data, _with(cfg, "AT"), **kw)


def train_aloe(model, data, cfg: TrainConfig, clean_outliers: bool = False, **kw) -> TrainResult:
    """ALOE; with ``clean_outliers=True`` the outliers are not attacked (AOE)."""
    return fit_classifier(model, data, _with(cfg, "AOE" if clean_outliers else "ALOE"), **kw)


def _with(cfg: TrainConfig, objective: str) -> TrainConfig:
    if cfg.objective == objective:
        return cfg
    d = asdict(cfg)
    d["objective"] = objective
    d["attack"] = cfg.attack
    return TrainConfig(**d)


def pretrain_feature_extractor(data=None, cfg: TrainConfig | None = None, arch="mlp[2,64,64]",
                               num_classes: int | None = None, checkpoint=None, input_shape=None,
                               adversarial: bool = True):
    """Robust feature extractor: adversarially train a classifier and drop its head, or load one.

    Returns ``(extractor, training_result_or_None)``.  The extractor is frozen.
    """
    if checkpoint is not None:
        model = load_checkpoint(checkpoint)
        if not isinstance(model, Classifier):
            raise ConfigurationError("extractor checkpoint must hold a classifier", "checkpoint")
        if input_shape is not None and tuple(model.input_shape) != tuple(input_shape):
            raise ConfigurationError(
                f"checkpoint expects inputs of shape {tuple(model.input_shape)}, data has {tuple(input_shape)}",
                "checkpoint")
        return freeze(strip_head(model)), None
    train = _role(data, "in-train")
    if train is None or cfg is None:
        raise ConfigurationError("pretraining needs an in-train split and a train config", "data")
    k = num_classes or int(train.labels.max()) + 1
    model = build_classifier(arch, k, seed=cfg.seed)
    result = (train_at if adversarial else train_standard)(model, data, cfg)
    return freeze(strip_head(model)), result
