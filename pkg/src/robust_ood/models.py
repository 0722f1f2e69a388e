"""Trainable models and checkpoint persistence.

Every network here is a plain ``nn.Module``.  Classifiers split into a
feature body and a final linear head so that the head can be dropped to
obtain a feature extractor; generators and discriminators are small MLPs
that work either on extractor features or on raw inputs.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigurationError

CHECKPOINT_FORMAT = "robust_ood.checkpoint"
CHECKPOINT_VERSION = 1


def make_mlp(dims: Sequence[int], final_activation: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(d_in, d_out))
        if final_activation or i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class MLPBody(nn.Module):
    def __init__(self, dims: Sequence[int]):
        super().__init__()
        if len(dims) < 2:
            raise ConfigurationError("mlp needs at least an input and one hidden width", "arch")
        self.dims = list(dims)
        self.net = make_mlp(dims, final_activation=True)
        self.input_shape = (dims[0],)
        self.output_dim = dims[-1]

    def forward(self, x):
        return self.net(x.flatten(1))


class SmallCNNBody(nn.Module):
    """Four conv-BN-ReLU blocks with two 2x2 poolings and global average pooling."""

    def __init__(self, input_shape=(3, 32, 32), channels=(32, 32, 64, 64)):
        super().__init__()
        if len(channels) != 4:
            raise ConfigurationError("cnn-small uses exactly four blocks", "arch")
        self.input_shape = tuple(input_shape)
        self.channels = tuple(channels)
        blocks: list[nn.Module] = []
        c_in = input_shape[0]
        for i, c_out in enumerate(channels):
            blocks += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU()]
            if i in (1, 3):
                blocks.append(nn.MaxPool2d(2))
            c_in = c_out
        self.net = nn.Sequential(*blocks, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.output_dim = channels[-1]

    def forward(self, x):
        return self.net(x)


def _parse_arch(arch_spec) -> tuple[str, dict]:
    if isinstance(arch_spec, dict):
        params = dict(arch_spec)
        name = params.pop("name", None)
        if name is None:
            raise ConfigurationError("architecture dict needs a 'name'", "arch")
        return name, params
    if not isinstance(arch_spec, str):
        raise ConfigurationError(f"cannot interpret architecture {arch_spec!r}", "arch")
    m = re.fullmatch(r"\s*([\w-]+)\s*(?:\[([\d,\s]*)\])?\s*", arch_spec)
    if m is None:
        raise ConfigurationError(f"cannot parse architecture {arch_spec!r}", "arch")
    name, dims = m.group(1), m.group(2)
    params = {}
    if dims:
        params["dims"] = [int(d) for d in dims.split(",") if d.strip()]
    return name, params


def _build_body(name: str, params: dict) -> nn.Module:
    if name == "mlp":
        return MLPBody(params.get("dims", [2, 64, 64]))
    if name == "cnn-small":
        return SmallCNNBody(
            tuple(params.get("input_shape", (3, 32, 32))), tuple(params.get("channels", (32, 32, 64, 64)))
        )
    raise ConfigurationError(f"unknown architecture {name!r} (known: mlp, cnn-small)", "arch")


class Classifier(nn.Module):
    """Feature body followed by a linear head producing ``num_classes`` logits."""

    def __init__(self, arch: str, arch_params: dict, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError("a classifier needs at least two classes", "num_classes")
        self.arch = arch
        self.arch_params = dict(arch_params)
        self.num_classes = num_classes
        self.body = _build_body(arch, arch_params)
        self.feature_dim = self.body.output_dim
        self.input_shape = self.body.input_shape
        self.head = nn.Linear(self.feature_dim, num_classes)

    def feature(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))

    def spec(self) -> dict:
        return {"kind": "classifier", "arch": self.arch, "arch_params": self.arch_params,
                "num_classes": self.num_classes}


class FeatureExtractor(nn.Module):
    """A classifier with its final linear layer excluded.

    Shares modules with the source classifier, so it sees later weight
    changes; call :func:`freeze` on it before use as a fixed extractor.
    """

    def __init__(self, classifier: Classifier):
        super().__init__()
        self.classifier = classifier
        self.output_dim = classifier.feature_dim
        self.input_shape = classifier.input_shape

    def forward(self, x):
        return self.classifier.feature(x)


def strip_head(model: Classifier) -> FeatureExtractor:
    return FeatureExtractor(model)


class Generator(nn.Module):
    """MLP mapping a latent vector to a feature vector (or an image in pixel mode)."""

    def __init__(self, latent_dim: int, out_shape, hidden=(64, 64), out_activation: str = "identity"):
        super().__init__()
        self.latent_dim = latent_dim
        self.out_shape = (out_shape,) if isinstance(out_shape, int) else tuple(out_shape)
        self.hidden = tuple(hidden)
        self.out_activation = out_activation
        out_dim = int(torch.tensor(self.out_shape).prod())
        self.net = make_mlp([latent_dim, *self.hidden, out_dim], final_activation=False)
        acts = {"identity": nn.Identity(), "relu": nn.ReLU(), "sigmoid": nn.Sigmoid()}
        if out_activation not in acts:
            raise ConfigurationError(f"unknown output activation {out_activation!r}", "out_activation")
        self.act = acts[out_activation]

    def forward(self, z):
        return self.act(self.net(z)).view(-1, *self.out_shape)

    def sample_latent(self, n: int, generator: torch.Generator | None = None):
        dtype = self.net[0].weight.dtype
        return torch.randn(n, self.latent_dim, generator=generator, dtype=dtype)

    def spec(self) -> dict:
        return {"kind": "generator", "latent_dim": self.latent_dim, "out_shape": list(self.out_shape),
                "hidden": list(self.hidden), "out_activation": self.out_activation}


class Discriminator(nn.Module):
    """Binary in/out discriminator returning one real logit per sample."""

    def __init__(self, in_shape, hidden=(64, 64), zero_init_head: bool = False):
        super().__init__()
        self.in_shape = (in_shape,) if isinstance(in_shape, int) else tuple(in_shape)
        self.hidden = tuple(hidden)
        self.zero_init_head = zero_init_head
        in_dim = int(torch.tensor(self.in_shape).prod())
        self.net = make_mlp([in_dim, *self.hidden, 1], final_activation=False)
        if zero_init_head:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        return self.net(x.flatten(1)).squeeze(1)

    def prob(self, x):
        return torch.sigmoid(self.forward(x))

    def spec(self) -> dict:
        return {"kind": "discriminator", "in_shape": list(self.in_shape), "hidden": list(self.hidden),
                "zero_init_head": self.zero_init_head}


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed global torch seed without disturbing the caller's RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_classifier(arch_spec, num_classes: int, seed: int = 0) -> Classifier:
    name, params = _parse_arch(arch_spec)
    with seeded(seed):
        return Classifier(name, params, num_classes)


def build_generator(latent_dim: int, out_shape, hidden=(64, 64), out_activation="identity", seed=0) -> Generator:
    with seeded(seed):
        return Generator(latent_dim, out_shape, hidden, out_activation)


def build_discriminator(in_shape, hidden=(64, 64), zero_init_head=False, seed=0) -> Discriminator:
    with seeded(seed):
        return Discriminator(in_shape, hidden, zero_init_head)


def model_from_spec(spec: dict) -> nn.Module:
    kind = spec.get("kind")
    if kind == "classifier":
        return Classifier(spec["arch"], spec["arch_params"], spec["num_classes"])
    if kind == "generator":
        return Generator(spec["latent_dim"], spec["out_shape"], spec["hidden"], spec["out_activation"])
    if kind == "discriminator":
        return Discriminator(spec["in_shape"], spec["hidden"], spec.get("zero_init_head", False))
    raise ConfigurationError(f"unknown model kind {kind!r}", "kind")


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@contextlib.contextmanager
def eval_mode(*modules: nn.Module):
    """Temporarily switch modules to evaluation mode, restoring each module's flags afterwards."""
    saved = [[(m, m.training) for m in mod.modules()] for mod in modules]
    for mod in modules:
        mod.eval()
    try:
        yield
    finally:
        for group in saved:
            for m, flag in group:
                m.training = flag


def param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def config_hash(config: Any) -> str:
    if config is None:
        return ""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    spec: dict
    state: dict
    step: int = 0
    metrics: dict = field(default_factory=dict)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)
    path: str | None = None

    def build(self) -> nn.Module:
        model = model_from_spec(self.spec)
        model.load_state_dict(self.state)
        model.eval()
        return model


def save_checkpoint(model: nn.Module, path, metrics: dict | None = None, step: int = 0,
                    config: Any = None, extra: dict | None = None) -> Checkpoint:
    path = Path(path)
    ckpt = Checkpoint(
        spec=model.spec(),
        state={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        step=int(step),
        metrics={k: float(v) for k, v in (metrics or {}).items()},
        config_hash=config_hash(config),
        extra=dict(extra or {}),
        path=str(path),
    )
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": ckpt.spec,
        "state": ckpt.state,
        "step": ckpt.step,
        "metrics": ckpt.metrics,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(blob, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint: {exc}", path) from exc
    return ckpt


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError("checkpoint not found", path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}", path) from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a robust_ood checkpoint", path)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')}", path)
    return Checkpoint(blob["spec"], blob["state"], blob["step"], blob["metrics"], blob["config_hash"],
                      blob.get("extra", {}), str(path))


def load_checkpoint(path) -> nn.Module:
    """Rebuild the model stored at ``path``; the record is attached as ``model.checkpoint``."""
    ckpt = read_checkpoint(path)
    try:
        model = ckpt.build()
    except (RuntimeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint does not match its model spec: {exc}", path) from exc
    model.checkpoint = ckpt
    return model
