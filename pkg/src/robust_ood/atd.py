"""Adversarially trained discriminator (ATD).

A binary discriminator D sits on top of a frozen feature extractor and is
trained as a GAN discriminator against a generator G, while the real
in-distribution and real outlier inputs it sees are adversarially perturbed
against D itself.  Generated samples are never attacked unless the
``attack_generated`` ablation is switched on.

Labels: in-distribution is 1, real outliers and generated samples are 0.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .attacks import AttackConfig, AttackObjective, attack_detector, pgd
from .data import SampleBatch
from .errors import ConfigurationError, TrainingError
from .evaluation import auroc
from .models import (FeatureExtractor, build_discriminator, build_generator, eval_mode, freeze,
                     load_checkpoint, param_hash, save_checkpoint, strip_head)
from .scores import DiscriminatorScore

log = logging.getLogger(__name__)

MODES = ("feature", "pixel")


@dataclass
class AtdConfig:
    alpha_mix: float = 0.5          # weight of the real-outlier term; 1 - alpha_mix goes to generated samples
    latent_dim: int = 16
    epochs: int = 20
    batch_size: int = 128
    lr_d: float = 1e-4
    lr_g: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    attack: AttackConfig | None = field(default_factory=lambda: AttackConfig(8 / 255, steps=10))
    mode: str = "feature"
    use_robust_extractor: bool = True
    adversarial_train_d: bool = True
    attack_generated: bool = False
    generated_epsilon: float | None = None   # feature-space budget for the attack_generated ablation
    val_every: int = 1
    d_hidden: tuple[int, ...] = (64, 64)
    g_hidden: tuple[int, ...] = (64, 64)
    g_activation: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise ConfigurationError(f"alpha_mix must lie in [0, 1], got {self.alpha_mix}", "alpha_mix")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}", "mode")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1", "latent_dim")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0", "epochs")
        if self.val_every < 1:
            raise ConfigurationError("val_every must be >= 1", "val_every")
        if (self.adversarial_train_d or self.attack_generated) and self.attack is None:
            raise ConfigurationError("adversarial training of D needs an attack config", "attack")
        self.betas = tuple(self.betas)
        self.d_hidden = tuple(self.d_hidden)
        self.g_hidden = tuple(self.g_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = None if self.attack is None else self.attack.to_dict()
        for k in ("betas", "d_hidden", "g_hidden"):
            d[k] = list(d[k])
        return d


@dataclass
class BestRecord:
    auroc: float = float("-inf")
    epoch: int = -1
    step: int = -1
    d_state: dict | None = None
    g_state: dict | None = None


class BestTracker:
    """Running maximum of validation AUROC.

    Ties move the record to the later checkpoint: once validation AUROC
    saturates, the longer-trained discriminator is kept.
    """

    def __init__(self):
        self.best = BestRecord()
        self.seen: list[float] = []

    def update(self, value: float, epoch: int = -1, step: int = -1, discriminator=None, generator=None) -> bool:
        self.seen.append(float(value))
        if value >= self.best.auroc:
            self.best = BestRecord(float(value), epoch, step,
                                   None if discriminator is None else copy.deepcopy(discriminator.state_dict()),
                                   None if generator is None else copy.deepcopy(generator.state_dict()))
            return True
        return False

    @property
    def running_max(self) -> list[float]:
        out, m = [], float("-inf")
        for v in self.seen:
            m = max(m, v)
            out.append(m)
        return out


@dataclass
class AtdBundle:
    extractor: FeatureExtractor | None
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    config: AtdConfig
    best: BestRecord = field(default_factory=BestRecord)
    history: list[dict] = field(default_factory=list)
    extractor_hash: str = ""
    steps: int = 0
    generated_attack_calls: int = 0

    @property
    def score(self) -> DiscriminatorScore:
        return DiscriminatorScore(self.discriminator, self.extractor)

    def features(self, x):
        return x if self.extractor is None else self.extractor(x)

    def load_best(self) -> "AtdBundle":
        if self.best.d_state is not None:
            self.discriminator.load_state_dict(self.best.d_state)
            self.generator.load_state_dict(self.best.g_state)
        return self

    def save(self, directory, extractor_source: str | None = None) -> Path:
        """Write discriminator, generator and (if any) extractor checkpoints plus a manifest linking them."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cfg = self.config.to_dict()
        metrics = {"val_auroc": self.best.auroc}
        save_checkpoint(self.discriminator, directory / "discriminator.pt", metrics, self.best.step, cfg)
        save_checkpoint(self.generator, directory / "generator.pt", metrics, self.best.step, cfg)
        files = {"discriminator": "discriminator.pt", "generator": "generator.pt", "extractor": None}
        if self.extractor is not None:
            save_checkpoint(self.extractor.classifier, directory / "extractor.pt",
                            extra={"role": "feature-extractor", "head": "dropped"})
            files["extractor"] = "extractor.pt"
        manifest = {
            "kind": "atd-bundle",
            "files": files,
            "extractor": {"source": extractor_source, "param_hash": self.extractor_hash,
                          "robust": self.config.use_robust_extractor},
            "ablation": {"mode": self.config.mode, "use_robust_extractor": self.config.use_robust_extractor,
                         "adversarial_train_d": self.config.adversarial_train_d,
                         "attack_generated": self.config.attack_generated},
            "best": {"val_auroc": self.best.auroc, "epoch": self.best.epoch, "step": self.best.step},
            "config": cfg,
        }
        path = directory / "atd_manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "AtdBundle":
        directory = Path(directory)
        manifest = json.loads((directory / "atd_manifest.json").read_text())
        files = manifest["files"]
        d = load_checkpoint(directory / files["discriminator"])
        g = load_checkpoint(directory / files["generator"])
        ext = None
        if files.get("extractor"):
            ext = freeze(strip_head(load_checkpoint(directory / files["extractor"])))
        cfg = AtdConfig(**manifest["config"])
        best = BestRecord(manifest["best"]["val_auroc"], manifest["best"]["epoch"], manifest["best"]["step"])
        return cls(ext, g, d, cfg, best, extractor_hash=manifest["extractor"]["param_hash"])


def build_bundle(extractor, cfg: AtdConfig, input_shape=None) -> AtdBundle:
    """Fresh G and D sized for feature mode (extractor output) or pixel mode (raw inputs)."""
    if cfg.mode == "feature":
        if extractor is None:
            raise ConfigurationError("feature mode needs a bound feature extractor", "extractor")
        if any(p.requires_grad for p in extractor.parameters()):
            raise ConfigurationError("the feature extractor must be frozen", "extractor")
        shape = (extractor.output_dim,)
        act = "relu" if cfg.g_activation == "auto" else cfg.g_activation
    else:
        extractor = None
        if input_shape is None:
            raise ConfigurationError("pixel mode needs the input shape", "input_shape")
        shape = tuple(input_shape)
        bounded = cfg.attack is not None and cfg.attack.clamp == (0.0, 1.0)
        act = ("sigmoid" if bounded else "identity") if cfg.g_activation == "auto" else cfg.g_activation
    g = build_generator(cfg.latent_dim, shape, cfg.g_hidden, act, seed=cfg.seed + 11)
    d = build_discriminator(shape, cfg.d_hidden, seed=cfg.seed + 10)
    return AtdBundle(extractor, g, d, cfg, extractor_hash="" if extractor is None else param_hash(extractor))


class _Generators:
    """One RNG stream per random purpose, so ablations do not shift the others."""

    def __init__(self, seed: int):
        self.shuffle = torch.Generator().manual_seed(seed)
        self.out = torch.Generator().manual_seed(seed + 1)
        self.latent = torch.Generator().manual_seed(seed + 2)
        self.attack_in = torch.Generator().manual_seed(seed + 3)
        self.attack_out = torch.Generator().manual_seed(seed + 4)
        self.attack_gen = torch.Generator().manual_seed(seed + 5)


def _bce(logits, target: float):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def _check(loss, step, term):
    if not torch.isfinite(loss):
        raise TrainingError("non-finite loss", step=step, term=term)


def _generated_attack(bundle: AtdBundle, x_in_clean) -> AttackConfig:
    """Attack budget for generated samples.

    Pixel mode reuses the input attack.  In feature mode the budget is
    ``generated_epsilon`` or, when unset, the mean L-inf feature shift that
    the input attack causes on the current in-batch.
    """
    cfg = bundle.config
    if cfg.mode == "pixel":
        return cfg.attack
    eps = cfg.generated_epsilon
    if eps is None:
        with torch.no_grad():
            x_adv = attack_detector(x_in_clean, bundle.score, cfg.attack, "in",
                                    generator=torch.Generator().manual_seed(cfg.seed + bundle.steps))
            shift = (bundle.extractor(x_adv) - bundle.extractor(x_in_clean)).flatten(1).abs().amax(1)
        eps = float(shift.mean())
    return cfg.attack.replace(epsilon=eps, step_size=None, clamp=None)


def atd_step(bundle: AtdBundle, x_in, x_out, optimizers, gens: _Generators, latent=None) -> dict:
    """One discriminator update on attacked real data and generated samples, then one generator update."""
    cfg = bundle.config
    d, g = bundle.discriminator, bundle.generator
    opt_d, opt_g = optimizers
    score = bundle.score
    step = bundle.steps
    x_in_clean = x_in
    if cfg.adversarial_train_d and cfg.attack.epsilon > 0:
        try:
            x_in = attack_detector(x_in, score, cfg.attack, "in", generator=gens.attack_in)
            if x_out is not None:
                x_out = attack_detector(x_out, score, cfg.attack, "out", generator=gens.attack_out)
        except RuntimeError as exc:
            raise TrainingError(f"attack failed: {exc}", step=step, term="attack") from exc

    n = len(x_in)
    z = g.sample_latent(n, gens.latent) if latent is None else latent
    with torch.no_grad():
        fake = g(z)
    if cfg.attack_generated:
        # ablation: push generated samples towards the in-class of D before it sees them
        fake = pgd(fake, AttackObjective(d, True, "discriminator-logit:generated"),
                   _generated_attack(bundle, x_in_clean), generator=gens.attack_gen)
        bundle.generated_attack_calls += 1

    d.train()
    opt_d.zero_grad()
    f_in = bundle.features(x_in)
    logit_in = d(f_in)
    loss_in = _bce(logit_in, 1.0)
    _check(loss_in, step, "in")
    loss_d = loss_in
    loss_out = torch.zeros(())
    logit_out = None
    if x_out is not None and cfg.alpha_mix > 0:
        logit_out = d(bundle.features(x_out))
        loss_out = _bce(logit_out, 0.0)
        _check(loss_out, step, "out")
        loss_d = loss_d + cfg.alpha_mix * loss_out
    logit_gen = d(fake.detach())
    loss_gen = _bce(logit_gen, 0.0)
    _check(loss_gen, step, "generated")
    if cfg.alpha_mix < 1:
        loss_d = loss_d + (1 - cfg.alpha_mix) * loss_gen
    loss_d.backward()
    opt_d.step()

    # non-saturating generator update: ascend log D(G(z))
    opt_g.zero_grad()
    for p in d.parameters():
        p.requires_grad_(False)
    try:
        loss_g = _bce(d(g(z)), 1.0)
        _check(loss_g, step, "generator")
        loss_g.backward()
    finally:
        for p in d.parameters():
            p.requires_grad_(True)
    opt_g.step()
    bundle.steps += 1
    return {
        "d_loss": loss_d.item(), "g_loss": loss_g.item(), "d_loss_in": loss_in.item(),
        "d_loss_out": loss_out.item(), "d_loss_gen": loss_gen.item(),
        "d_in": torch.sigmoid(logit_in).mean().item(),
        "d_out": float("nan") if logit_out is None else torch.sigmoid(logit_out).mean().item(),
        "d_gen": torch.sigmoid(logit_gen).mean().item(),
    }


def validation_auroc(bundle: AtdBundle, val_in, val_out) -> float:
    """Clean AUROC of the discriminator score, computed in evaluation mode."""
    score = bundle.score
    return auroc(score.score(val_in), score.score(val_out))


def _inputs(batch):
    return batch.inputs if isinstance(batch, SampleBatch) else batch


def train_atd(data: dict, extractor, cfg: AtdConfig, restore_best: bool = True,
              bundle: AtdBundle | None = None) -> AtdBundle:
    """Alternate D and G updates for ``cfg.epochs`` epochs and keep the best validated discriminator.

    ``data`` maps roles to batches and must contain in-train, out-val and
    in-test (plus out-exposure unless ``alpha_mix`` is 0).  Validation
    compares clean in-test scores with clean out-val scores once every
    ``val_every`` epochs.
    """
    for role in ("in-train", "in-test", "out-val"):
        if data.get(role) is None or len(data[role]) == 0:
            raise ConfigurationError(f"ATD training needs a non-empty {role} split", role)
    outliers = data.get("out-exposure")
    if cfg.alpha_mix > 0 and (outliers is None or len(outliers) == 0):
        raise ConfigurationError("ATD training with alpha_mix > 0 needs an out-exposure split", "out-exposure")
    train = data["in-train"]
    if bundle is None:
        bundle = build_bundle(extractor, cfg, input_shape=tuple(train.inputs.shape[1:]))
    h0 = bundle.extractor_hash
    gens = _Generators(cfg.seed)
    opt_d = torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.lr_d, betas=cfg.betas)
    opt_g = torch.optim.Adam(bundle.generator.parameters(), lr=cfg.lr_g, betas=cfg.betas)
    tracker = BestTracker()
    val_in, val_out = _inputs(data["in-test"]), _inputs(data["out-val"])

    def out_stream():
        while True:
            yield from outliers.batches(cfg.batch_size, gens.out)

    outs = out_stream() if outliers is not None and cfg.alpha_mix > 0 else None
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        count = 0
        for batch in train.batches(cfg.batch_size, gens.shuffle):
            x_out = next(outs).inputs if outs is not None else None
            m = atd_step(bundle, batch.inputs, x_out, (opt_d, opt_g), gens)
            for k, v in m.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        row = {"epoch": epoch + 1, "steps": bundle.steps, **{k: v / count for k, v in sums.items()}}
        with torch.no_grad(), eval_mode(bundle.discriminator, bundle.generator):
            row["clean_d_in"] = float(bundle.score(val_in).mean())
            z = bundle.generator.sample_latent(len(val_in), torch.Generator().manual_seed(cfg.seed + 7))
            row["clean_d_gen"] = float(torch.sigmoid(bundle.discriminator(bundle.generator(z))).mean())
        if (epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs:
            v = validation_auroc(bundle, val_in, val_out)
            row["val_auroc"] = v
            tracker.update(v, epoch + 1, bundle.steps, bundle.discriminator, bundle.generator)
            row["best_val_auroc"] = tracker.best.auroc
        bundle.history.append(row)
        log.debug("atd epoch %d %s", epoch + 1, row)

    if bundle.extractor is not None and param_hash(bundle.extractor) != h0:
        raise TrainingError("feature extractor parameters changed during ATD training", term="extractor")
    bundle.best = tracker.best
    if restore_best:
        bundle.load_best()
    bundle.discriminator.eval()
    bundle.generator.eval()
    return bundle


def select_best(values) -> tuple[int, float]:
    """Index and value of the best entry in a sequence of validation AUROCs (the last one among ties)."""
    tracker = BestTracker()
    for i, v in enumerate(values):
        tracker.update(v, epoch=i)
    return tracker.best.epoch, tracker.best.auroc
