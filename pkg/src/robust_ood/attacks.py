"""L-infinity white-box attacks: FGSM, PGD with restarts, and end-to-end detector attacks.

An attack ascends an :class:`AttackObjective`, a callable returning one value
per sample.  Samples are attacked independently, so the gradient of the sum
is the per-sample gradient.  Returned batches always satisfy the epsilon-ball
and clamp-range constraints exactly in the input dtype.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import AttackError, ConfigurationError
from .models import eval_mode

log = logging.getLogger(__name__)

UNBOUNDED = "unbounded"


@dataclass
class AttackConfig:
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    rand_init: bool = True
    restarts: int = 1
    clamp: tuple[float, float] | None = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.clamp, str):
            if self.clamp != UNBOUNDED:
                raise ConfigurationError(f"clamp must be [low, high] or {UNBOUNDED!r}", "clamp")
            self.clamp = None
        elif self.clamp is not None:
            self.clamp = (float(self.clamp[0]), float(self.clamp[1]))
            if self.clamp[0] > self.clamp[1]:
                raise ConfigurationError("clamp low exceeds high", "clamp")
        if not self.epsilon >= 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}", "epsilon")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}", "steps")
        if self.restarts < 1:
            raise ConfigurationError(f"restarts must be >= 1, got {self.restarts}", "restarts")
        if self.step_size is not None and self.steps > 0 and self.epsilon > 0 and not self.step_size > 0:
            raise ConfigurationError("step_size must be > 0", "step_size")

    @property
    def alpha(self) -> float:
        """Per-step size; defaults to 2.5 * epsilon / steps."""
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / self.steps if self.steps > 0 else 0.0

    def replace(self, **changes) -> "AttackConfig":
        d = asdict(self)
        d.update(changes)
        return AttackConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clamp"] = UNBOUNDED if self.clamp is None else list(self.clamp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if isinstance(d.get("clamp"), list):
            d["clamp"] = tuple(d["clamp"])
        return cls(**d)

    @classmethod
    def fgsm(cls, epsilon: float, clamp=(0.0, 1.0)) -> "AttackConfig":
        """The PGD configuration that coincides with FGSM."""
        return cls(epsilon, steps=1, step_size=epsilon, rand_init=False, restarts=1, clamp=clamp)


@dataclass
class AttackObjective:
    """Per-sample objective plus the direction the attacker pushes it."""

    fn: Callable[[torch.Tensor], torch.Tensor]
    maximize: bool = True
    name: str = "objective"

    def ascent_value(self, x):
        v = self.fn(x)
        return v if self.maximize else -v


def classifier_loss(model, y) -> AttackObjective:
    return AttackObjective(lambda x: F.cross_entropy(model(x), y, reduction="none"), True, "cross-entropy")


def uniform_ce(logits):
    """Cross-entropy of each row of logits against the uniform label."""
    return -F.log_softmax(logits, dim=1).mean(dim=1)


def uniform_label_loss(model) -> AttackObjective:
    return AttackObjective(lambda x: uniform_ce(model(x)), True, "uniform-ce")


def detector_objective(score, role: str) -> AttackObjective:
    """In-samples are pushed down the score, out-samples up."""
    if role not in ("in", "out"):
        raise ConfigurationError(f"role must be 'in' or 'out', got {role!r}", "role")
    return AttackObjective(score.objective, maximize=(role == "out"), name=f"{score.surrogate}:{role}")


def _check_finite(values, what):
    bad = ~torch.isfinite(values.reshape(values.shape[0], -1)).all(dim=1)
    if bad.any():
        raise AttackError(f"non-finite {what}", int(bad.nonzero()[0, 0]))


def input_gradient(objective: AttackObjective, x):
    """Gradient of the summed ascent value with respect to the input batch."""
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        v = objective.ascent_value(x)
        _check_finite(v, f"{objective.name} value")
        (g,) = torch.autograd.grad(v.sum(), x)
    _check_finite(g, f"{objective.name} gradient")
    return g


def _eps_tensor(eps, like):
    t = torch.tensor(eps, dtype=like.dtype)
    if t.item() > eps:
        t = torch.nextafter(t, torch.zeros_like(t))
    return t


def project(x_adv, x, epsilon: float, clamp):
    """Project onto the epsilon-ball around x intersected with the clamp box."""
    eps = _eps_tensor(epsilon, x)
    x_adv = torch.minimum(torch.maximum(x_adv, x - eps), x + eps)
    # x +/- eps may round outward; step back one ulp until the ball holds in this dtype
    for _ in range(4):
        over = (x_adv - x).abs() > eps
        if not over.any():
            break
        x_adv = torch.where(over, torch.nextafter(x_adv, x), x_adv)
    if clamp is not None:
        x_adv = x_adv.clamp(clamp[0], clamp[1])
    return x_adv


def fgsm(x, objective: AttackObjective, epsilon: float, clamp=(0.0, 1.0)):
    """Single signed-gradient step of size epsilon; sign(0) is 0."""
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {epsilon}", "epsilon")
    x = x.detach()
    if epsilon == 0:
        return x.clone()
    g = input_gradient(objective, x)
    return project(x + epsilon * g.sign(), x, epsilon, clamp)


def _restart_seeds(cfg: AttackConfig, generator):
    base = cfg.seed if generator is None else int(torch.randint(0, 2**31 - 1, (1,), generator=generator))
    return [base * 7919 + 104729 * r + 1 for r in range(cfg.restarts)]


def pgd(x, objective: AttackObjective, cfg: AttackConfig, generator: torch.Generator | None = None,
        trace: list | None = None):
    """Multi-step projected sign-gradient ascent with optional random start and restarts.

    With ``generator`` given, the random starts are drawn from it (one draw per
    call); otherwise they derive from ``cfg.seed``.  Per sample, the restart
    with the highest final objective is kept.  ``trace``, if a list, receives
    ``(restart, step, mean objective)`` tuples.
    """
    x = x.detach()
    if cfg.epsilon == 0:
        return x.clone()
    alpha = cfg.alpha
    best_x, best_v = None, None
    for r, seed in enumerate(_restart_seeds(cfg, generator)):
        x_adv = x.clone()
        if cfg.rand_init:
            g = torch.Generator().manual_seed(seed)
            noise = (torch.rand(x.shape, generator=g, dtype=x.dtype) * 2 - 1) * cfg.epsilon
            x_adv = project(x + noise, x, cfg.epsilon, cfg.clamp)
        for t in range(cfg.steps):
            grad = input_gradient(objective, x_adv)
            x_adv = project(x_adv + alpha * grad.sign(), x, cfg.epsilon, cfg.clamp)
            if trace is not None:
                with torch.no_grad():
                    trace.append((r, t + 1, float(objective.ascent_value(x_adv).mean())))
        with torch.no_grad():
            v = objective.ascent_value(x_adv).detach()
        _check_finite(v, f"{objective.name} value")
        if best_x is None:
            best_x, best_v = x_adv, v
        else:
            better = v > best_v
            mask = better.view(-1, *([1] * (x.dim() - 1)))
            best_x = torch.where(mask, x_adv, best_x)
            best_v = torch.where(better, v, best_v)
    return best_x


def attack_detector(x, score, cfg: AttackConfig, role: str, generator=None, trace=None):
    """End-to-end attack on a detection score: lower it for role 'in', raise it for role 'out'.

    Scores without a usable gradient attack their declared surrogate
    (``score.surrogate``).
    """
    if role not in ("in", "out"):
        raise ConfigurationError(f"role must be 'in' or 'out', got {role!r}", "role")
    if score.surrogate != score.kind:
        log.debug("attacking %s through surrogate %s", score.kind, score.surrogate)
    # switch to evaluation mode once for the whole attack rather than per gradient step
    objective = AttackObjective(score.attack_forward, maximize=(role == "out"), name=f"{score.surrogate}:{role}")
    with eval_mode(*score._modules):
        return pgd(x, objective, cfg, generator=generator, trace=trace)


def attack_detector_mixed(x, score, cfg: AttackConfig, is_out, generator=None):
    """One PGD run over a batch mixing both roles; ``is_out`` marks the samples whose score is raised."""
    sign = torch.where(torch.as_tensor(is_out, dtype=torch.bool), 1.0, -1.0).to(x.dtype)
    objective = AttackObjective(lambda z: sign * score.attack_forward(z), True, f"{score.surrogate}:mixed")
    with eval_mode(*score._modules):
        return pgd(x, objective, cfg, generator=generator)


def attack_classifier(x, y, model, cfg: AttackConfig, generator=None):
    with eval_mode(model):
        return pgd(x, classifier_loss(model, y), cfg, generator=generator)


def write_trace_csv(trace, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["restart", "step", "objective"])
        for row in trace:
            w.writerow([row[0], row[1], f"{row[2]:.10g}"])
