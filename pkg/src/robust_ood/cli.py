"""Command-line entry point.

Each run reads one YAML config, resolves every default, and writes results
plus a ``manifest.json`` into the output directory.  The manifest echoes the
resolved config, hashes every artifact, and records wall time and status.
All random seeds derive from the single top-level ``seed``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import traceback
from pathlib import Path

import torch
import yaml

from .atd import AtdBundle, AtdConfig, train_atd
from .attacks import AttackConfig
from .data import ROLES, DatasetSpec, SampleBatch, check_role_disjoint, load_dataset
from .errors import (AttackError, CheckpointError, ConfigurationError, EvaluationError, FitError, IngestionError,
                     LayoutError, TrainingError)
from .evaluation import ALL_SETTINGS, APPENDIX_STEPS, cross_attack_eval, evaluate, step_sweep, transfer_eval
from .models import Classifier, build_classifier, freeze, load_checkpoint, save_checkpoint, strip_head
from .scores import build_score
from .toy_lab import ToyRunConfig, run_toy, run_toy_at_msp
from .training import TrainConfig, fit_classifier, pretrain_feature_extractor

log = logging.getLogger("robust_ood")

KINDS = ("pretrain", "train-baseline", "train-atd", "evaluate", "transfer", "cross-attack", "sweep", "toy")
MANIFEST = "manifest.json"


class RunContext:
    """Output directory plus the list of artifacts written so far."""

    def __init__(self, out_dir: Path):
        self.out = out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# config resolution -------------------------------------------------------------

def _require(cfg: dict, key: str, where: str = ""):
    if key not in cfg or cfg[key] is None:
        raise ConfigurationError("missing required field", f"{where}{key}")
    return cfg[key]


def _build(cls, d: dict | None, field_prefix: str, **fixed):
    d = dict(d or {})
    d.update(fixed)
    try:
        return cls(**d)
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc).split(": ", 1)[-1], f"{field_prefix}.{exc.field}") from exc
    except TypeError as exc:
        raise ConfigurationError(str(exc), field_prefix) from exc


def attack_from(d: dict | None, seed: int, where: str = "attack") -> AttackConfig | None:
    if d is None:
        return None
    if "epsilon" not in d:
        raise ConfigurationError("missing required field", f"{where}.epsilon")
    return _build(AttackConfig, d, where, seed=seed)


def load_data(cfg: dict, seed: int) -> dict:
    """Resolve the ``data`` section: role -> dataset spec, or role -> list of specs for out-test."""
    specs = cfg.get("data") or {}
    data = {}
    for role, spec in specs.items():
        if role == "out-test":
            items = spec if isinstance(spec, list) else [spec]
            data[role] = {}
            for i, s in enumerate(items):
                ds = _dataset_spec(s, role, seed, f"data.out-test[{i}]", i)
                data[role][ds.name] = load_dataset(ds)
        else:
            data[role] = load_dataset(_dataset_spec(spec, role, seed, f"data.{role}"))
    flat = [b for v in data.values() for b in (v.values() if isinstance(v, dict) else [v])]
    check_role_disjoint(flat)
    return data


def _dataset_spec(d: dict, role: str, seed: int, where: str, index: int = 0) -> DatasetSpec:
    d = dict(d)
    d.setdefault("role", role)
    d.setdefault("name", f"{d.get('source', 'data')}-{role}" + (f"-{index}" if index else ""))
    # distinct default seeds per role, so synthetic sources never hand the same draw to two roles
    d.setdefault("seed", seed + 100 * ROLES.index(role) + index)
    _require(d, "source", where + ".")
    return DatasetSpec.from_dict(d)


def _first_out(data) -> dict[str, SampleBatch]:
    outs = data.get("out-test")
    if not outs:
        raise ConfigurationError("at least one out-test dataset is required", "data.out-test")
    return outs


def load_detector(spec: dict, data: dict, where: str = "detector"):
    """Build a score from a detector section: kind plus a classifier checkpoint or an ATD bundle directory."""
    kind = _require(spec, "kind", where + ".")
    if kind.lower() in ("atd", "discriminator"):
        bundle = AtdBundle.load(_existing(_require(spec, "bundle", where + "."), f"{where}.bundle"))
        return bundle.score, None
    model = load_checkpoint(_existing(_require(spec, "checkpoint", where + "."), f"{where}.checkpoint"))
    kw = {k: v for k, v in spec.items() if k not in ("kind", "checkpoint")}
    x = y = None
    if kind.lower() in ("md", "rmd", "openmax"):
        train = data.get("in-train")
        if train is None:
            raise ConfigurationError(f"{kind} needs an in-train split to fit", "data.in-train")
        x, y = train.inputs, train.labels
    return build_score(kind, model, x, y, **kw), model


def _existing(path, field_name: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"referenced path {str(p)!r} does not exist", field_name)
    return p


# subcommands -------------------------------------------------------------------

def cmd_pretrain(cfg: dict, seed: int, ctx: RunContext) -> dict:
    data = load_data(cfg, seed)
    train = _build(TrainConfig, cfg.get("train"), "train", seed=seed,
                   attack=attack_from((cfg.get("train") or {}).get("attack"), seed, "train.attack"))
    arch = cfg.get("arch", "mlp[2,64,64]")
    adversarial = bool(cfg.get("adversarial", True))
    extractor, result = pretrain_feature_extractor(data, train, arch, cfg.get("num_classes"), adversarial=adversarial)
    save_checkpoint(extractor.classifier, ctx.path("classifier.pt"), step=result.steps, config=train.to_dict(),
                    extra={"adversarial": adversarial})
    result.write_history(ctx.path("history.csv"))
    return {"arch": arch, "adversarial": adversarial, "train": train.to_dict(), "final": result.history[-1]
            if result.history else {}}


def cmd_train_baseline(cfg: dict, seed: int, ctx: RunContext) -> dict:
    data = load_data(cfg, seed)
    train = _build(TrainConfig, cfg.get("train"), "train", seed=seed,
                   attack=attack_from((cfg.get("train") or {}).get("attack"), seed, "train.attack"))
    train_split = _require(data, "in-train", "data.")
    k = cfg.get("num_classes") or int(train_split.labels.max()) + 1
    arch = cfg.get("arch", "mlp[2,64,64]")
    model = build_classifier(arch, k, seed=seed)
    result = fit_classifier(model, data, train)
    save_checkpoint(model, ctx.path("classifier.pt"), step=result.steps, config=train.to_dict())
    result.write_history(ctx.path("history.csv"))
    return {"arch": arch, "num_classes": k, "train": train.to_dict()}


def cmd_train_atd(cfg: dict, seed: int, ctx: RunContext) -> dict:
    data = load_data(cfg, seed)
    atd_d = dict(cfg.get("atd") or {})
    atd = _build(AtdConfig, atd_d, "atd", seed=seed, attack=attack_from(atd_d.get("attack"), seed, "atd.attack"))
    ext_spec = cfg.get("extractor") or {}
    extractor, source = None, None
    if atd.mode == "feature":
        if "checkpoint" in ext_spec:
            ckpt = _existing(ext_spec["checkpoint"], "extractor.checkpoint")
            model = load_checkpoint(ckpt)
            if not isinstance(model, Classifier):
                raise ConfigurationError("extractor checkpoint must hold a classifier", "extractor.checkpoint")
            extractor, source = freeze(strip_head(model)), str(ckpt)
        else:
            train = _build(TrainConfig, ext_spec.get("train"), "extractor.train", seed=seed,
                           attack=attack_from((ext_spec.get("train") or {}).get("attack"), seed,
                                              "extractor.train.attack"))
            extractor, _ = pretrain_feature_extractor(data, train, ext_spec.get("arch", "mlp[2,64,64]"),
                                                      adversarial=atd.use_robust_extractor)
            source = "pretrained-in-run"
    bundle = train_atd(data, extractor, atd)
    bundle.save(ctx.out / "bundle", extractor_source=source)
    for name in ("discriminator.pt", "generator.pt", "extractor.pt", "atd_manifest.json"):
        if (ctx.out / "bundle" / name).exists():
            ctx.artifacts.append(ctx.out / "bundle" / name)
    from .training import write_history_csv
    write_history_csv(bundle.history, ctx.path("history.csv"))
    return {"atd": atd.to_dict(), "best": {"val_auroc": bundle.best.auroc, "epoch": bundle.best.epoch}}


def _settings(cfg: dict):
    return cfg.get("settings", [s.value for s in ALL_SETTINGS])


def cmd_evaluate(cfg: dict, seed: int, ctx: RunContext) -> dict:
    data = load_data(cfg, seed)
    in_test = _require(data, "in-test", "data.")
    outs = _first_out(data)
    score, model = load_detector(_require(cfg, "detector"), data)
    attack = attack_from(cfg.get("attack"), seed)
    report = evaluate(score, in_test, outs, _settings(cfg), attack, method=cfg.get("method"), classifier=model,
                      keep_scores=True, metadata={"seed": seed})
    report.write_json(ctx.path("report.json"))
    report.write_csv(ctx.path("report.csv"))
    report.write_scores_csv(ctx.path("scores.csv"))
    return {"average": report.averages()}


def cmd_transfer(cfg: dict, seed: int, ctx: RunContext) -> dict:
    data = load_data(cfg, seed)
    in_test = _require(data, "in-test", "data.")
    outs = _first_out(data)
    sources_cfg = _require(cfg, "sources")
    if not sources_cfg:
        raise ConfigurationError("at least one source model is required", "sources")
    sources = {s.get("name", f"source{i}"): load_detector(s, data, f"sources[{i}]")[0]
               for i, s in enumerate(sources_cfg)}
    target, _ = load_detector(_require(cfg, "target"), data, "target")
    eps = float(_require(cfg, "epsilon"))
    if eps < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {eps}", "epsilon")
    reports = transfer_eval(sources, target, in_test, outs, eps)
    rows = []
    for name, rep in reports.items():
        rep.metadata["seed"] = seed
        rows += rep.rows()
    from .evaluation import write_rows_csv
    write_rows_csv(rows, ctx.path("transfer.csv"),
                   ["method", "in_dataset", "out_dataset", "setting", "auroc", "accuracy", "seed"])
    ctx.write_json("transfer.json", {n: r.to_dict() for n, r in reports.items()})
    return {"sources": list(reports)}


def cmd_cross_attack(cfg: dict, seed: int, ctx: RunContext) -> dict:
    data = load_data(cfg, seed)
    in_test = _require(data, "in-test", "data.")
    outs = _first_out(data)
    classifier = load_checkpoint(_existing(_require(cfg, "classifier"), "classifier"))
    detector, _ = load_detector(_require(cfg, "detector"), data)
    attack = attack_from(_require(cfg, "attack"), seed)
    table = cross_attack_eval(classifier, detector, in_test, outs, attack)
    ctx.write_json("cross_attack.json", table.to_dict())
    return table.to_dict()


def cmd_sweep(cfg: dict, seed: int, ctx: RunContext) -> dict:
    data = load_data(cfg, seed)
    in_test = _require(data, "in-test", "data.")
    outs = _first_out(data)
    score, _ = load_detector(_require(cfg, "detector"), data)
    attack = attack_from(_require(cfg, "attack"), seed)
    steps = cfg.get("steps", list(APPENDIX_STEPS))
    settings = cfg.get("settings", ["AttackIn", "AttackOut", "AttackBoth"])
    result = step_sweep(score, in_test, outs, steps, attack, settings)
    result.write_csv(ctx.path("sweep.csv"))
    stability = {}
    if 50 in steps and 100 in steps:
        stability = {s: result.stability(s) for s in settings}
    ctx.write_json("sweep.json", {"steps": result.steps, "auroc": result.auroc, "stability": stability})
    return {"stability": stability}


def cmd_toy(cfg: dict, seed: int, ctx: RunContext) -> dict:
    toy = _build(ToyRunConfig, cfg.get("toy"), "toy", seed=seed)
    variant = cfg.get("variant", "discriminator")
    if variant == "discriminator":
        result = run_toy(toy)
        from .training import write_history_csv
        write_history_csv(result.history, ctx.path("history.csv"))
        save_checkpoint(result.discriminator, ctx.path("discriminator.pt"), config=toy.to_dict())
    elif variant == "at-msp":
        result = run_toy_at_msp(toy)
        save_checkpoint(result.classifier, ctx.path("classifier.pt"), config=toy.to_dict())
    else:
        raise ConfigurationError(f"unknown toy variant {variant!r} (discriminator, at-msp)", "variant")
    result.map.write(ctx.path("decision_map.csv"), ctx.path("decision_map.json"))
    ctx.write_json("metrics.json", result.metrics)
    return {"toy": toy.to_dict(), "variant": variant, "metrics": result.metrics}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-baseline": cmd_train_baseline,
    "train-atd": cmd_train_atd,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "cross-attack": cmd_cross_attack,
    "sweep": cmd_sweep,
    "toy": cmd_toy,
}


# driver --------------------------------------------------------------------------

def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}", "config") from exc
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML: {exc}", "config") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a mapping", "config")
    return cfg


def _error_record(exc: BaseException) -> dict:
    rec = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "path", "step", "term", "dataset", "setting", "index"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    return rec


EXPECTED_ERRORS = (ConfigurationError, CheckpointError, AttackError, FitError, TrainingError, IngestionError,
                   LayoutError, EvaluationError)


def run(kind: str, config_path, out_dir=None, seed: int | None = None) -> int:
    """Execute one run; returns the process exit status."""
    t0 = time.perf_counter()
    manifest: dict = {"kind": kind, "config_path": str(config_path), "status": "error"}
    ctx = None
    try:
        cfg = read_config(config_path)
        if cfg.get("kind", kind) != kind:
            raise ConfigurationError(f"config is for {cfg['kind']!r}, not {kind!r}", "kind")
        if seed is not None:
            cfg["seed"] = seed
        run_seed = cfg.get("seed")
        if not isinstance(run_seed, int):
            raise ConfigurationError("seed is mandatory and must be an integer", "seed")
        out = out_dir or cfg.get("out")
        if out is None:
            raise ConfigurationError("no output directory (use --out or 'out:')", "out")
        ctx = RunContext(Path(out))
        manifest["config"] = cfg
        manifest["seed"] = run_seed
        torch.manual_seed(run_seed)
        manifest["resolved"] = COMMANDS[kind](cfg, run_seed, ctx)
        manifest["status"] = "ok"
        code = 0
    except EXPECTED_ERRORS as exc:
        manifest["error"] = _error_record(exc)
        code = 2 if isinstance(exc, ConfigurationError) else 1
    except Exception as exc:  # unexpected failure: keep a record, then report it
        manifest["error"] = _error_record(exc)
        manifest["error"]["traceback"] = traceback.format_exc()
        code = 1
    manifest["wall_time_s"] = time.perf_counter() - t0
    if ctx is not None:
        manifest["artifacts"] = {str(p.relative_to(ctx.out)): sha256_file(p) for p in ctx.artifacts if p.exists()}
        (ctx.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    if code != 0:
        print(json.dumps({"status": "error", **manifest["error"]}, default=str), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-ood", description="Robust out-of-distribution detection experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind)
        sp.add_argument("--config", required=True, help="YAML run config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output directory (overrides 'out' in the config)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
