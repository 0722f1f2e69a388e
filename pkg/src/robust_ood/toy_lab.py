"""Two-dimensional study of which distributions to attack while training a discriminator.

A small MLP discriminator learns in (label 1) against fixed out points and
generated points redrawn every epoch (label 0).  Each of the three sets can
be attacked with PGD during training.  Results are summarized by robust
metrics and a decision map over a regular grid.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackConfig, attack_classifier, attack_detector, attack_detector_mixed
from .data import GeneratedResampler, get_layout, sample_rects
from .errors import ConfigurationError
from .evaluation import auroc
from .models import build_classifier, build_discriminator, eval_mode
from .scores import DiscriminatorScore, MSPScore

# the five training configurations of the study: (attack_in, attack_out, attack_generated)
FIG4_TOGGLES = {
    "b": (False, False, False),
    "c": (True, False, False),
    "d": (False, True, False),
    "e": (False, False, True),
    "f": (True, True, False),
}


@dataclass
class ToyRunConfig:
    layout: str | dict = "fig4"
    attack_in: bool = False
    attack_out: bool = False
    attack_generated: bool = False
    epsilon: float = 1.0
    attack_steps: int = 40
    epochs: int = 100
    batch_size: int = 50
    lr: float = 1e-2
    cosine: bool = True                  # anneal the learning rate to zero over training
    n_in: int = 400
    n_out: int = 200
    n_generated: int = 400
    n_test: int = 400
    hidden: tuple[int, ...] = (128, 128, 128)
    resolution: int = 200
    grid_pad: float | None = None        # defaults to 2 * epsilon
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}", "epsilon")
        if self.resolution < 2:
            raise ConfigurationError("resolution must be >= 2 per axis", "resolution")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0", "epochs")
        self.hidden = tuple(self.hidden)
        get_layout(self.layout)

    @property
    def pad(self) -> float:
        return 2.0 * self.epsilon if self.grid_pad is None else float(self.grid_pad)

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(self.epsilon, steps=self.attack_steps, step_size=2.5 * self.epsilon / self.attack_steps,
                            rand_init=True, clamp=None, seed=self.seed)

    @property
    def toggles(self) -> tuple[bool, bool, bool]:
        return self.attack_in, self.attack_out, self.attack_generated

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["layout"] = get_layout(self.layout).to_dict()
        return d


@dataclass
class DecisionMap:
    xs: np.ndarray          # (R,) grid x coordinates
    ys: np.ndarray          # (R,) grid y coordinates
    prob: np.ndarray        # (R, R) probability of "in", indexed [iy, ix]
    config: dict = field(default_factory=dict)

    def labels(self, threshold: float = 0.5) -> np.ndarray:
        return self.prob >= threshold

    def to_rows(self):
        gx, gy = np.meshgrid(self.xs, self.ys)
        return zip(gx.ravel(), gy.ravel(), self.prob.ravel())

    def write(self, csv_path, json_path=None):
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "probability"])
            for x, y, p in self.to_rows():
                w.writerow([repr(float(x)), repr(float(y)), repr(float(p))])
        if json_path is not None:
            Path(json_path).write_text(json.dumps({"resolution": len(self.xs), "config": self.config},
                                                  indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, csv_path, json_path=None) -> "DecisionMap":
        rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
        xs = np.unique(rows[:, 0])
        ys = np.unique(rows[:, 1])
        prob = rows[:, 2].reshape(len(ys), len(xs))
        cfg = json.loads(Path(json_path).read_text())["config"] if json_path is not None else {}
        return cls(xs, ys, prob, cfg)


def make_grid(bounds, resolution: int):
    xs = np.linspace(bounds[0], bounds[2], resolution)
    ys = np.linspace(bounds[1], bounds[3], resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = torch.tensor(np.stack([gx.ravel(), gy.ravel()], axis=1), dtype=torch.float32)
    return xs, ys, pts


@torch.no_grad()
def decision_map(prob_fn, bounds, resolution: int, config: dict | None = None) -> DecisionMap:
    xs, ys, pts = make_grid(bounds, resolution)
    p = torch.cat([prob_fn(pts[i:i + 8192]) for i in range(0, len(pts), 8192)])
    return DecisionMap(xs, ys, p.double().numpy().reshape(resolution, resolution), config or {})


@dataclass
class ToyResult:
    config: ToyRunConfig
    discriminator: torch.nn.Module
    map: DecisionMap
    metrics: dict
    history: list[dict]
    train_sets: dict[str, torch.Tensor]
    resampler_calls: int

    @property
    def score(self) -> DiscriminatorScore:
        return DiscriminatorScore(self.discriminator)

    def write(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"map": directory / "decision_map.csv", "map_config": directory / "decision_map.json",
                 "metrics": directory / "metrics.json"}
        self.map.write(paths["map"], paths["map_config"])
        paths["metrics"].write_text(json.dumps(self.metrics, indent=2, sort_keys=True) + "\n")
        return paths


def toy_test_sets(cfg: ToyRunConfig):
    """Held-out in/out points.

    Layouts without out-rectangles draw out points from a wide frame around
    the layout, keeping only those farther than 2 * epsilon (L-inf) from
    every in-rectangle, so that both-sided attacks cannot merge the sets.
    """
    layout = get_layout(cfg.layout)
    g = torch.Generator().manual_seed(cfg.seed + 1000)
    x_in, y_in = sample_rects(layout.in_rects, cfg.n_test, g)
    if layout.out_rects:
        x_out = sample_rects(layout.out_rects, cfg.n_test, g)[0]
    else:
        x_out = far_frame_points(layout, cfg.n_test, 2.0 * cfg.epsilon, g)
    return x_in, y_in, x_out


def far_frame_points(layout, n: int, margin: float, generator: torch.Generator) -> torch.Tensor:
    box = layout.bounds(2.0 * margin + 1.0)
    lo = torch.tensor(box[:2])
    span = torch.tensor(box[2:]) - lo
    grown = [(r[0] - margin, r[1] - margin, r[2] + margin, r[3] + margin) for r in layout.in_rects]
    out, have = [], 0
    while have < n:
        pts = lo + torch.rand(4 * n, 2, generator=generator) * span
        inside = torch.zeros(len(pts), dtype=torch.bool)
        for r in grown:
            inside |= (pts[:, 0] >= r[0]) & (pts[:, 0] <= r[2]) & (pts[:, 1] >= r[1]) & (pts[:, 1] <= r[3])
        out.append(pts[~inside])
        have += int((~inside).sum())
    return torch.cat(out)[:n]


def robust_metrics(score, x_in, x_out, attack: AttackConfig, threshold: float = 0.5) -> dict:
    """Clean and attacked detection accuracies plus AUROC in the four settings."""
    g_in = torch.Generator().manual_seed(attack.seed + 1)
    g_out = torch.Generator().manual_seed(attack.seed + 2)
    adv_in = attack_detector(x_in, score, attack, "in", generator=g_in)
    adv_out = attack_detector(x_out, score, attack, "out", generator=g_out)
    s_in, s_out = score.score(x_in), score.score(x_out)
    a_in, a_out = score.score(adv_in), score.score(adv_out)
    return {
        "in_accuracy": float((s_in >= threshold).mean()),
        "out_detection": float((s_out < threshold).mean()),
        "robust_in_accuracy": float((a_in >= threshold).mean()),
        "robust_out_detection": float((a_out < threshold).mean()),
        "auroc_clean": auroc(s_in, s_out),
        "auroc_attack_in": auroc(a_in, s_out),
        "auroc_attack_out": auroc(s_in, a_out),
        "auroc_attack_both": auroc(a_in, a_out),
    }


def run_toy(cfg: ToyRunConfig) -> ToyResult:
    """Train the 2D discriminator under the configured attack toggles and measure it."""
    layout = get_layout(cfg.layout)
    g = torch.Generator().manual_seed(cfg.seed)
    x_in, _ = sample_rects(layout.in_rects, cfg.n_in, g)
    x_out = sample_rects(layout.out_rects, cfg.n_out, g)[0] if layout.out_rects else torch.empty(0, 2)
    resampler = GeneratedResampler(layout, cfg.pad, cfg.seed + 1)
    d = build_discriminator(2, cfg.hidden, seed=cfg.seed + 2)
    opt = torch.optim.Adam(d.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.epochs, 1)) if cfg.cosine else None
    score = DiscriminatorScore(d)
    attack = cfg.attack
    g_shuffle = torch.Generator().manual_seed(cfg.seed + 3)
    g_att = torch.Generator().manual_seed(cfg.seed + 4)
    toggles = cfg.toggles
    history = []
    x_gen = torch.empty(0, 2)

    for epoch in range(cfg.epochs):
        x_gen = resampler.sample(cfg.n_generated)
        sets = [(x_in, 1.0), (x_out, 0.0), (x_gen, 0.0)]
        perms = [torch.randperm(len(x), generator=g_shuffle) for x, _ in sets]
        n_batches = max(1, -(-len(x_in) // cfg.batch_size))
        tot = 0.0
        for b in range(n_batches):
            xs, ts, hit = [], [], []
            for k, ((x, target), perm) in enumerate(zip(sets, perms)):
                size = -(-len(x) // n_batches)
                xb = x[perm[b * size:(b + 1) * size]]
                xs.append(xb)
                ts.append(torch.full((len(xb),), target))
                hit.append(torch.full((len(xb),), toggles[k] and attack.epsilon > 0))
            xs, ts, hit = torch.cat(xs), torch.cat(ts), torch.cat(hit)
            if hit.any():
                # every toggled set is attacked in one PGD run: in points down the score, the rest up
                xs = xs.clone()
                xs[hit] = attack_detector_mixed(xs[hit], score, attack, ts[hit] == 0.0, generator=g_att)
            d.train()
            logits = d(xs)
            loss = F.binary_cross_entropy_with_logits(logits, ts)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item()
        if sched is not None:
            sched.step()
        history.append({"epoch": epoch + 1, "loss": tot / n_batches})
    d.eval()

    with torch.no_grad(), eval_mode(d):
        train_acc = {
            "in": float((score(x_in) >= cfg.threshold).float().mean()),
            "out": float((score(x_out) < cfg.threshold).float().mean()) if len(x_out) else float("nan"),
            "generated": float((score(x_gen) < cfg.threshold).float().mean()) if len(x_gen) else float("nan"),
        }
    t_in, _, t_out = toy_test_sets(cfg)
    metrics = {"train_accuracy_" + k: v for k, v in train_acc.items()}
    metrics.update(robust_metrics(score, t_in, t_out, attack.replace(seed=cfg.seed + 77), cfg.threshold))
    metrics["resampler_calls"] = resampler.calls
    dmap = decision_map(score, layout.bounds(cfg.pad), cfg.resolution, cfg.to_dict())
    return ToyResult(cfg, d, dmap, metrics, history, {"in": x_in, "out": x_out, "generated": x_gen},
                     resampler.calls)


def run_fig4(seed: int = 0, **overrides) -> dict[str, ToyResult]:
    """All five training configurations of the study for one seed."""
    return {name: run_toy(ToyRunConfig(attack_in=a, attack_out=o, attack_generated=gen, seed=seed, **overrides))
            for name, (a, o, gen) in FIG4_TOGGLES.items()}


@dataclass
class MspToyResult:
    config: ToyRunConfig
    classifier: torch.nn.Module
    map: DecisionMap
    metrics: dict

    @property
    def score(self) -> MSPScore:
        return MSPScore(self.classifier)


def run_toy_at_msp(cfg: ToyRunConfig) -> MspToyResult:
    """Adversarially train a multi-class classifier on the in-rectangles and threshold its MSP.

    ``cfg.threshold`` is the MSP level above which a grid cell counts as in.
    """
    layout = get_layout(cfg.layout)
    if layout.num_classes < 2:
        raise ConfigurationError("MSP needs a layout with at least two in-rectangles", "layout")
    g = torch.Generator().manual_seed(cfg.seed)
    x_in, y_in = sample_rects(layout.in_rects, cfg.n_in, g)
    model = build_classifier({"name": "mlp", "dims": [2, *cfg.hidden]}, layout.num_classes, seed=cfg.seed + 2)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    attack = cfg.attack
    g_shuffle = torch.Generator().manual_seed(cfg.seed + 3)
    g_att = torch.Generator().manual_seed(cfg.seed + 4)
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(x_in), generator=g_shuffle)
        for i in range(0, len(x_in), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            xb, yb = x_in[idx], y_in[idx]
            if attack.epsilon > 0:
                xb = attack_classifier(xb, yb, model, attack, generator=g_att)
            model.train()
            loss = F.cross_entropy(model(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    score = MSPScore(model)
    t_in, _, t_out = toy_test_sets(cfg)
    metrics = robust_metrics(score, t_in, t_out, attack.replace(seed=cfg.seed + 77), cfg.threshold)
    dmap = decision_map(score, layout.bounds(cfg.pad), cfg.resolution, cfg.to_dict())
    return MspToyResult(cfg, model, dmap, metrics)
