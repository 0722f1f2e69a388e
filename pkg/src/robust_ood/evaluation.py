"""AUROC and the robust evaluation protocols.

AUROC treats in-distribution as the positive class and is the Mann-Whitney
statistic with half credit for ties.  The four settings attack nothing, the
in-test set, the out-test sets, or both; in and out sets are perturbed
independently, each with the full budget.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .attacks import AttackConfig, attack_classifier, attack_detector, detector_objective, fgsm
from .data import SampleBatch
from .errors import AttackError, ConfigurationError, EvaluationError
from .models import eval_mode

REPORT_SCHEMA_VERSION = 1


def auroc(in_scores, out_scores) -> float:
    """P(s_in > s_out) + 0.5 * P(s_in == s_out) over all (in, out) pairs."""
    s_in = np.asarray(in_scores, dtype=np.float64).ravel()
    s_out = np.asarray(out_scores, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ConfigurationError("AUROC needs non-empty in and out score lists", "scores")
    if not (np.isfinite(s_in).all() and np.isfinite(s_out).all()):
        raise ConfigurationError("AUROC needs finite scores", "scores")
    n, m = s_in.size, s_out.size
    ranks = rankdata(np.concatenate([s_in, s_out]))
    # twice the U statistic is an integer, so this division is the only rounding step
    u2 = round(2.0 * ranks[:n].sum()) - n * (n + 1)
    return u2 / (2.0 * n * m)


class EvalSetting(enum.Enum):
    CLEAN = "Clean"
    ATTACK_IN = "AttackIn"
    ATTACK_OUT = "AttackOut"
    ATTACK_BOTH = "AttackBoth"

    @property
    def attacks_in(self) -> bool:
        return self in (EvalSetting.ATTACK_IN, EvalSetting.ATTACK_BOTH)

    @property
    def attacks_out(self) -> bool:
        return self in (EvalSetting.ATTACK_OUT, EvalSetting.ATTACK_BOTH)

    @classmethod
    def parse(cls, s) -> "EvalSetting":
        if isinstance(s, cls):
            return s
        for member in cls:
            if s in (member.value, member.name, member.value.lower()):
                return member
        raise ConfigurationError(f"unknown setting {s!r}", "settings")


ALL_SETTINGS = tuple(EvalSetting)
ATTACKED_SETTINGS = (EvalSetting.ATTACK_IN, EvalSetting.ATTACK_OUT, EvalSetting.ATTACK_BOTH)


@dataclass
class EvalReport:
    method: str
    in_dataset: str
    auroc: dict[str, dict[str, float]] = field(default_factory=dict)   # out-dataset -> setting -> value
    accuracy: dict[str, float] = field(default_factory=dict)           # setting -> value
    metadata: dict = field(default_factory=dict)
    sample_scores: list[tuple] = field(default_factory=list)

    def set(self, out_dataset: str, setting, value: float):
        self.auroc.setdefault(out_dataset, {})[EvalSetting.parse(setting).value] = float(value)

    def get(self, out_dataset: str, setting) -> float:
        return self.auroc[out_dataset][EvalSetting.parse(setting).value]

    @property
    def settings(self) -> list[str]:
        seen = []
        for row in self.auroc.values():
            seen += [s for s in row if s not in seen]
        return seen

    def averages(self) -> dict[str, float]:
        out = {}
        for s in self.settings:
            vals = [row[s] for row in self.auroc.values() if s in row]
            out[s] = math.fsum(vals) / len(vals)
        return out

    def average(self, setting) -> float:
        return self.averages()[EvalSetting.parse(setting).value]

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "method": self.method, "in_dataset": self.in_dataset,
                "auroc": self.auroc, "average": self.averages(), "accuracy": self.accuracy,
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported report schema {d.get('schema_version')}", "schema_version")
        return cls(d["method"], d["in_dataset"], d["auroc"], d.get("accuracy", {}), d.get("metadata", {}))

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def rows(self) -> list[dict]:
        seed = self.metadata.get("seed", "")
        rows = []
        for out_name, row in self.auroc.items():
            for s, v in row.items():
                rows.append({"method": self.method, "in_dataset": self.in_dataset, "out_dataset": out_name,
                             "setting": s, "auroc": v, "accuracy": self.accuracy.get(s, ""), "seed": seed})
        for s, v in self.averages().items():
            rows.append({"method": self.method, "in_dataset": self.in_dataset, "out_dataset": "average",
                         "setting": s, "auroc": v, "accuracy": self.accuracy.get(s, ""), "seed": seed})
        return rows

    def write_csv(self, path):
        write_rows_csv(self.rows(), path,
                       ["method", "in_dataset", "out_dataset", "setting", "auroc", "accuracy", "seed"])

    def write_scores_csv(self, path):
        write_rows_csv([dict(zip(("dataset", "sample_id", "setting", "score"), r)) for r in self.sample_scores],
                       path, ["dataset", "sample_id", "setting", "score"])


def write_rows_csv(rows, path, fieldnames):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _as_batch(x, name, role) -> SampleBatch:
    if isinstance(x, SampleBatch):
        return x
    return SampleBatch(torch.as_tensor(x), None, role, name=name)


def _as_out_sets(out_sets) -> dict[str, SampleBatch]:
    if isinstance(out_sets, (SampleBatch, torch.Tensor)):
        out_sets = {"out": out_sets}
    return {name: _as_batch(b, name, "out-test") for name, b in out_sets.items()}


@torch.no_grad()
def accuracy(model, x, y, batch_size=512) -> float:
    with eval_mode(model):
        pred = torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    return float((pred == y).double().mean())


def _attacked(score, x, cfg, role, generator):
    return torch.cat([attack_detector(x[i:i + 512], score, cfg, role, generator=generator)
                      for i in range(0, len(x), 512)])


def evaluate(score, in_test, out_tests, settings=ALL_SETTINGS, attack: AttackConfig | None = None,
             method: str | None = None, classifier=None, keep_scores: bool = False,
             metadata: dict | None = None) -> EvalReport:
    """AUROC of ``score`` per out-test set and setting.

    ``classifier``, when given together with labelled in-test data, adds
    classification accuracy on the (possibly attacked) in-test inputs.
    """
    settings = [EvalSetting.parse(s) for s in settings]
    if any(s is not EvalSetting.CLEAN for s in settings) and attack is None:
        raise ConfigurationError("attacked settings need an attack config", "attack")
    in_b = _as_batch(in_test, "in-test", "in-test")
    outs = _as_out_sets(out_tests)
    report = EvalReport(method or score.kind, in_b.name, metadata=dict(metadata or {}))
    report.metadata.setdefault("score", score.kind)
    report.metadata.setdefault("surrogate", score.surrogate)
    if attack is not None:
        report.metadata.setdefault("attack", attack.to_dict())
        report.metadata.setdefault("seed", attack.seed)

    def run(fn, dataset, setting):
        try:
            return fn()
        except (AttackError, ConfigurationError, RuntimeError) as exc:
            raise EvaluationError(str(exc), dataset, setting) from exc

    # in-set inputs are shared by every out set; generators are per role so cells are order-independent
    x_in = in_b.inputs
    in_clean = run(lambda: score.score(x_in), in_b.name, "Clean")
    in_adv_x, in_adv = None, None
    if any(s.attacks_in for s in settings):
        g = torch.Generator().manual_seed(attack.seed)
        in_adv_x = run(lambda: _attacked(score, x_in, attack, "in", g), in_b.name, "AttackIn")
        in_adv = run(lambda: score.score(in_adv_x), in_b.name, "AttackIn")
    if keep_scores:
        report.sample_scores += [(in_b.name, i, "Clean", float(v)) for i, v in zip(in_b.ids, in_clean)]
        if in_adv is not None:
            report.sample_scores += [(in_b.name, i, "Attacked", float(v)) for i, v in zip(in_b.ids, in_adv)]

    for name, ob in outs.items():
        out_clean = run(lambda: score.score(ob.inputs), name, "Clean")
        out_adv = None
        if any(s.attacks_out for s in settings):
            g = torch.Generator().manual_seed(attack.seed + 1)
            out_adv = run(lambda: score.score(_attacked(score, ob.inputs, attack, "out", g)), name, "AttackOut")
        for s in settings:
            report.set(name, s, auroc(in_adv if s.attacks_in else in_clean, out_adv if s.attacks_out else out_clean))
        if keep_scores:
            report.sample_scores += [(name, i, "Clean", float(v)) for i, v in zip(ob.ids, out_clean)]
            if out_adv is not None:
                report.sample_scores += [(name, i, "Attacked", float(v)) for i, v in zip(ob.ids, out_adv)]

    if classifier is not None and in_b.labels is not None:
        report.accuracy["Clean"] = accuracy(classifier, x_in, in_b.labels)
        if in_adv_x is not None:
            acc = accuracy(classifier, in_adv_x, in_b.labels)
            for s in settings:
                if s.attacks_in:
                    report.accuracy[s.value] = acc
    return report


def transfer_eval(sources: dict, target, in_test, out_tests, epsilon: float, clamp=(0.0, 1.0),
                  settings=ATTACKED_SETTINGS) -> dict[str, EvalReport]:
    """Black-box transfer: FGSM perturbations crafted on each source score, evaluated on the target."""
    in_b = _as_batch(in_test, "in-test", "in-test")
    outs = _as_out_sets(out_tests)
    settings = [EvalSetting.parse(s) for s in settings]
    reports = {}
    for src_name, source in sources.items():
        if source.input_shape is not None and target.input_shape is not None \
                and tuple(source.input_shape) != tuple(target.input_shape):
            raise ConfigurationError(
                f"source {src_name!r} takes inputs {source.input_shape}, target takes {target.input_shape}",
                "sources")
        report = EvalReport(f"transfer:{src_name}", in_b.name,
                            metadata={"source": src_name, "attack": "fgsm", "epsilon": epsilon,
                                      "target": target.kind})
        x_in_adv = fgsm(in_b.inputs, detector_objective(source, "in"), epsilon, clamp)
        in_clean, in_adv = target.score(in_b.inputs), target.score(x_in_adv)
        for name, ob in outs.items():
            x_out_adv = fgsm(ob.inputs, detector_objective(source, "out"), epsilon, clamp)
            out_clean, out_adv = target.score(ob.inputs), target.score(x_out_adv)
            for s in settings:
                report.set(name, s, auroc(in_adv if s.attacks_in else in_clean,
                                          out_adv if s.attacks_out else out_clean))
        reports[src_name] = report
    return reports


@dataclass
class CrossAttackTable:
    """{attack target} x {classification accuracy, detection AUROC} on attacked in-test data."""

    clean_accuracy: float
    clean_auroc: float
    accuracy: dict[str, float]
    auroc: dict[str, float]

    def to_dict(self) -> dict:
        return {"clean": {"accuracy": self.clean_accuracy, "auroc": self.clean_auroc},
                "attack_classification": {"accuracy": self.accuracy["classification"],
                                          "auroc": self.auroc["classification"]},
                "attack_detection": {"accuracy": self.accuracy["detection"], "auroc": self.auroc["detection"]}}


def cross_attack_eval(classifier, detector, in_test: SampleBatch, out_tests, cfg: AttackConfig) -> CrossAttackTable:
    """Attack the in-test set either through the classifier's loss or the detector's score.

    Out-test sets stay clean: a classification attack needs labels, which
    the open set lacks.  AUROC is averaged over the out-test sets.
    """
    if in_test.labels is None:
        raise ConfigurationError("cross-attack evaluation needs labelled in-test data", "in-test")
    outs = _as_out_sets(out_tests)
    out_scores = [detector.score(ob.inputs) for ob in outs.values()]
    x, y = in_test.inputs, in_test.labels

    def mean_auroc(in_scores):
        return math.fsum(auroc(in_scores, o) for o in out_scores) / len(out_scores)

    x_cls = attack_classifier(x, y, classifier, cfg, generator=torch.Generator().manual_seed(cfg.seed))
    x_det = attack_detector(x, detector, cfg, "in", generator=torch.Generator().manual_seed(cfg.seed))
    return CrossAttackTable(
        clean_accuracy=accuracy(classifier, x, y),
        clean_auroc=mean_auroc(detector.score(x)),
        accuracy={"classification": accuracy(classifier, x_cls, y), "detection": accuracy(classifier, x_det, y)},
        auroc={"classification": mean_auroc(detector.score(x_cls)), "detection": mean_auroc(detector.score(x_det))},
    )


APPENDIX_STEPS = (1, 5, 10, 25, 50, 100)


@dataclass
class SweepResult:
    steps: list[int]
    auroc: dict[str, list[float]]

    def at(self, setting, steps: int) -> float:
        return self.auroc[EvalSetting.parse(setting).value][self.steps.index(steps)]

    def stability(self, setting, hi: int = 100, lo: int = 50) -> float:
        return abs(self.at(setting, hi) - self.at(setting, lo))

    def write_csv(self, path):
        rows = [{"steps": n, "setting": s, "auroc": vals[i]}
                for s, vals in self.auroc.items() for i, n in enumerate(self.steps)]
        write_rows_csv(rows, path, ["steps", "setting", "auroc"])


def step_sweep(score, in_test, out_tests, steps_list=APPENDIX_STEPS, cfg: AttackConfig | None = None,
               settings=ATTACKED_SETTINGS) -> SweepResult:
    """Averaged robust AUROC for each PGD step count; step size follows 2.5 * eps / N unless fixed in ``cfg``."""
    steps_list = list(steps_list)
    if steps_list != sorted(steps_list):
        raise ConfigurationError("steps_list must be ascending", "steps_list")
    if cfg is None:
        raise ConfigurationError("step sweep needs a base attack config", "attack")
    settings = [EvalSetting.parse(s) for s in settings]
    result = SweepResult(steps_list, {s.value: [] for s in settings})
    for n in steps_list:
        rep = evaluate(score, in_test, out_tests, settings, cfg.replace(steps=n))
        for s in settings:
            result.auroc[s.value].append(rep.average(s))
    return result


def detector_average(results: dict[tuple[str, str], dict[str, float]]) -> dict[str, dict[str, float]]:
    """Average per-setting AUROC over baselines for each detection score.

    ``results`` maps (baseline, detector) to {setting: auroc}.
    """
    grouped: dict[str, dict[str, list[float]]] = {}
    for (_, detector), row in results.items():
        for s, v in row.items():
            grouped.setdefault(detector, {}).setdefault(s, []).append(v)
    return {d: {s: math.fsum(v) / len(v) for s, v in row.items()} for d, row in grouped.items()}
