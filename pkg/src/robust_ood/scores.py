"""Detection scores over frozen models.

Every score maps a batch to one value per sample, with HIGHER meaning MORE
in-distribution, and is differentiable in the input so it can be attacked
end to end.  Scores always evaluate their models in evaluation mode, which
makes each sample's value independent of the rest of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from .errors import ConfigurationError, FitError
from .models import eval_mode


class ScoreFunction:
    kind = "base"

    def __init__(self, *modules):
        self._modules = [m for m in modules if m is not None]

    @property
    def input_shape(self):
        for m in self._modules:
            shape = getattr(m, "input_shape", None) or getattr(m, "in_shape", None)
            if shape is not None:
                return tuple(shape)
        return None

    @property
    def surrogate(self) -> str:
        """Name of the differentiable quantity attacks ascend or descend."""
        return self.kind

    def __call__(self, x):
        with eval_mode(*self._modules):
            return self.forward(x)

    def objective(self, x):
        with eval_mode(*self._modules):
            return self.attack_forward(x)

    def forward(self, x):
        raise NotImplementedError

    def attack_forward(self, x):
        return self.forward(x)

    @torch.no_grad()
    def score(self, x, batch_size: int = 512) -> np.ndarray:
        out = [self(x[i:i + batch_size]).double().cpu() for i in range(0, len(x), batch_size)]
        return torch.cat(out).numpy()


def msp(x, model):
    with eval_mode(model):
        return F.softmax(model(x), dim=1).max(dim=1).values


class MSPScore(ScoreFunction):
    kind = "MSP"

    def __init__(self, model):
        super().__init__(model)
        self.model = model

    def forward(self, x):
        return F.softmax(self.model(x), dim=1).max(dim=1).values


# Mahalanobis family --------------------------------------------------------

@dataclass
class GaussianBank:
    means: torch.Tensor        # (K, d), per-class means
    cov: torch.Tensor          # (d, d), pooled within-class scatter / N
    chol: torch.Tensor         # Cholesky factor of cov + reg * I
    mean0: torch.Tensor        # whole-set mean
    cov0: torch.Tensor
    chol0: torch.Tensor
    reg: float
    reg0: float
    counts: torch.Tensor
    n: int

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianBank":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def _regularized_cholesky(cov, reg, what):
    d = cov.shape[0]
    if reg == "auto":
        reg = 1e-6 * float(torch.trace(cov)) / d
    reg = float(reg)
    chol, info = torch.linalg.cholesky_ex(cov + reg * torch.eye(d, dtype=cov.dtype))
    if int(info) != 0 or not torch.isfinite(chol).all():
        cond = np.linalg.cond(cov.numpy()) if torch.isfinite(cov).all() else float("inf")
        raise FitError(f"{what} covariance is singular after regularization {reg:.3g} (condition ~{cond:.3g})")
    return chol, reg


def fit_gaussian_bank(features, labels, num_classes: int | None = None, reg="auto") -> GaussianBank:
    """Class-conditional Gaussians with a shared covariance, plus a whole-set background Gaussian.

    Class means divide by the class count; the pooled covariance divides by
    the total count.  ``reg`` is added to the covariance diagonals
    ("auto" = 1e-6 * trace / d).
    """
    z = torch.as_tensor(features).detach().to(torch.float64)
    y = torch.as_tensor(labels).long()
    n, d = z.shape
    k = int(y.max()) + 1 if num_classes is None else num_classes
    counts = torch.bincount(y, minlength=k)
    if (counts < 2).any():
        raise FitError(f"every class needs >= 2 samples, got counts {counts.tolist()}")
    if d > n:
        raise FitError(f"feature dim {d} exceeds sample count {n}")
    means = torch.stack([z[y == c].mean(0) for c in range(k)])
    centered = z - means[y]
    cov = centered.T @ centered / n
    chol, reg_used = _regularized_cholesky(cov, reg, "class-conditional")
    mean0 = z.mean(0)
    c0 = z - mean0
    cov0 = c0.T @ c0 / n
    chol0, reg0_used = _regularized_cholesky(cov0, reg, "background")
    return GaussianBank(means, cov, chol, mean0, cov0, chol0, reg_used, reg0_used, counts, n)


def _quadratic_form(diff, chol):
    # diff: (..., d); returns diff^T (L L^T)^{-1} diff
    flat = diff.reshape(-1, diff.shape[-1]).T
    sol = torch.linalg.solve_triangular(chol, flat, upper=False)
    return (sol * sol).sum(0).reshape(diff.shape[:-1])


def _check_dim(z, bank):
    if z.dim() != 2 or z.shape[1] != bank.dim:
        raise ConfigurationError(f"features of shape {tuple(z.shape)} do not match bank dim {bank.dim}", "features")


def mahalanobis_distances(z, bank: GaussianBank):
    """(N, K) squared Mahalanobis distances to every class mean."""
    z = z.to(torch.float64)
    _check_dim(z, bank)
    return _quadratic_form(z[:, None, :] - bank.means[None], bank.chol)


def background_distance(z, bank: GaussianBank):
    z = z.to(torch.float64)
    _check_dim(z, bank)
    return _quadratic_form(z - bank.mean0, bank.chol0)


def _min_lowest_index(values):
    # gradient flows through the minimizing class; ties go to the lowest index
    idx = values.argmin(dim=1, keepdim=True)
    return values.gather(1, idx).squeeze(1)


def md_score(z, bank: GaussianBank):
    return -_min_lowest_index(mahalanobis_distances(z, bank))


def rmd_score(z, bank: GaussianBank):
    return -_min_lowest_index(mahalanobis_distances(z, bank) - background_distance(z, bank)[:, None])


class MahalanobisScore(ScoreFunction):
    def __init__(self, model, bank: GaussianBank, relative: bool = False):
        super().__init__(model)
        self.model = model
        self.bank = bank
        self.relative = relative

    @property
    def kind(self):
        return "RMD" if self.relative else "MD"

    def forward(self, x):
        z = self.model.feature(x)
        return rmd_score(z, self.bank) if self.relative else md_score(z, self.bank)

    @classmethod
    def fit(cls, model, x, y, relative=False, reg="auto", batch_size=512):
        feats = extract(lambda b: model.feature(b), model, x, batch_size)
        return cls(model, fit_gaussian_bank(feats, y, model.num_classes, reg), relative)


@torch.no_grad()
def extract(fn, model, x, batch_size=512):
    with eval_mode(model):
        return torch.cat([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


# OpenMax -------------------------------------------------------------------

@dataclass
class WeibullBank:
    mavs: torch.Tensor       # (K, K) mean activation (logit) vector per class
    shape: torch.Tensor      # (K,)
    scale: torch.Tensor
    shift: torch.Tensor
    tail_sizes: torch.Tensor
    alpha_rank: int

    @property
    def num_classes(self) -> int:
        return self.mavs.shape[0]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "WeibullBank":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def _fit_weibull_tail(tail: np.ndarray) -> tuple[float, float]:
    if np.ptp(tail) <= 1e-12 * max(1.0, float(tail.max())):
        # degenerate tail: a near-step CDF at the common distance
        return 100.0, max(float(tail.max()), 1e-12)
    shape, _, scale = stats.weibull_min.fit(tail, floc=0.0)
    return float(shape), float(scale)


def fit_weibull_bank(logits, labels, tail_size: int = 20, alpha_rank: int | None = None) -> WeibullBank:
    """Per-class Weibull models of the largest distances to the class mean activation vector.

    Only correctly classified samples contribute.  The activation vector is
    the logit vector, since the recalibration revises one entry per class.
    """
    av = torch.as_tensor(logits).detach().to(torch.float64)
    y = torch.as_tensor(labels).long()
    k = av.shape[1]
    alpha_rank = min(3, k) if alpha_rank is None else int(alpha_rank)
    if not 1 <= alpha_rank <= k:
        raise ConfigurationError(f"alpha_rank must lie in [1, {k}]", "alpha_rank")
    correct = av.argmax(1) == y
    mavs, shapes, scales, tails = [], [], [], []
    for c in range(k):
        sel = av[correct & (y == c)]
        if len(sel) < 2:
            raise FitError(f"class {c} has {len(sel)} correctly classified samples; need >= 2")
        mav = sel.mean(0)
        dist = torch.linalg.norm(sel - mav, dim=1).numpy()
        t = min(tail_size, len(dist))
        shape, scale = _fit_weibull_tail(np.sort(dist)[-t:])
        mavs.append(mav)
        shapes.append(shape)
        scales.append(scale)
        tails.append(t)
    f64 = torch.float64
    return WeibullBank(torch.stack(mavs), torch.tensor(shapes, dtype=f64), torch.tensor(scales, dtype=f64),
                       torch.zeros(k, dtype=f64), torch.tensor(tails), alpha_rank)


def weibull_cdf(d, shape, scale, shift):
    return 1.0 - torch.exp(-(torch.clamp(d - shift, min=0.0) / scale) ** shape)


def openmax_probs(av, bank: WeibullBank):
    """Recalibrated probabilities over K known classes plus a final 'unknown' entry."""
    if bank is None:
        raise ConfigurationError("OpenMax needs a fitted Weibull bank", "bank")
    av = av.to(torch.float64)
    k = bank.num_classes
    if av.shape[1] != k:
        raise ConfigurationError(f"activation dim {av.shape[1]} does not match bank ({k})", "logits")
    ranks = av.detach().argsort(dim=1, descending=True).argsort(dim=1)
    a = bank.alpha_rank
    weights = torch.clamp((a - ranks).to(torch.float64) / a, min=0.0)
    # tiny offset keeps the norm differentiable at the mean itself
    dist = torch.sqrt(((av[:, None, :] - bank.mavs[None]) ** 2).sum(-1) + 1e-24)
    wscore = weibull_cdf(dist, bank.shape, bank.scale, bank.shift)
    omega = 1.0 - weights * wscore
    revised = av * omega
    unknown = (av - revised).sum(1, keepdim=True)
    return F.softmax(torch.cat([revised, unknown], dim=1), dim=1)


def openmax_score(x, model, bank: WeibullBank):
    with eval_mode(model):
        return 1.0 - openmax_probs(model(x), bank)[:, -1]


class OpenMaxScore(ScoreFunction):
    """1 - P(unknown) after Weibull recalibration.

    ``surrogate="logits"`` (default) attacks the max softmax of the
    pre-recalibration logits; ``"recalibrated"`` attacks the full score with
    the rank weights held fixed.
    """

    kind = "OpenMax"

    def __init__(self, model, bank: WeibullBank, surrogate: str = "logits"):
        super().__init__(model)
        if bank is None:
            raise ConfigurationError("OpenMax needs a fitted Weibull bank", "bank")
        if surrogate not in ("logits", "recalibrated"):
            raise ConfigurationError(f"unknown OpenMax surrogate {surrogate!r}", "surrogate")
        self.model = model
        self.bank = bank
        self._surrogate = surrogate

    @property
    def surrogate(self):
        return "openmax-logits-msp" if self._surrogate == "logits" else "openmax-recalibrated"

    def forward(self, x):
        return 1.0 - openmax_probs(self.model(x), self.bank)[:, -1]

    def attack_forward(self, x):
        if self._surrogate == "logits":
            return F.softmax(self.model(x), dim=1).max(dim=1).values
        return self.forward(x)

    @classmethod
    def fit(cls, model, x, y, tail_size=20, alpha_rank=None, surrogate="logits", batch_size=512):
        logits = extract(model, model, x, batch_size)
        return cls(model, fit_weibull_bank(logits, y, tail_size, alpha_rank), surrogate)


# Discriminator ---------------------------------------------------------------

class DiscriminatorScore(ScoreFunction):
    """sigmoid(D(f(x))), or sigmoid(D(x)) without an extractor. Attacks use the logit."""

    kind = "Discriminator"

    def __init__(self, discriminator, extractor=None):
        super().__init__(extractor, discriminator)
        self.discriminator = discriminator
        self.extractor = extractor

    @property
    def surrogate(self):
        return "discriminator-logit"

    def logit(self, x):
        return self.discriminator(x if self.extractor is None else self.extractor(x))

    def forward(self, x):
        return torch.sigmoid(self.logit(x))

    def attack_forward(self, x):
        return self.logit(x)


def discriminator_score(x, bundle):
    return DiscriminatorScore(bundle.discriminator, bundle.extractor)(x)


def build_score(kind: str, model=None, x=None, y=None, discriminator=None, extractor=None, **kwargs):
    """Construct and, where needed, fit a score of the given kind."""
    kind_l = kind.lower()
    if kind_l == "msp":
        return MSPScore(model)
    if kind_l in ("md", "rmd"):
        return MahalanobisScore.fit(model, x, y, relative=(kind_l == "rmd"), **kwargs)
    if kind_l == "openmax":
        return OpenMaxScore.fit(model, x, y, **kwargs)
    if kind_l in ("discriminator", "atd"):
        return DiscriminatorScore(discriminator, extractor)
    raise ConfigurationError(f"unknown score kind {kind!r}", "score")
