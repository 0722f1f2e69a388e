import pytest
import torch

from robust_ood.attacks import AttackConfig
from robust_ood.errors import CheckpointError, ConfigurationError, TrainingError
from robust_ood.models import build_classifier, param_hash, save_checkpoint
from robust_ood.training import (TrainConfig, fit_classifier, pretrain_feature_extractor, train_aloe, train_at,
                                 train_standard, write_history_csv)


def _run(fn, data, cfg, **kw):
    model = build_classifier("mlp[2,16,16]", 2, seed=cfg.seed)
    return fn(model, data, cfg, record_trajectory=True, **kw)


def test_aloe_without_outlier_weight_is_at(toy_data):
    cfg = TrainConfig(epochs=5, batch_size=50, lr=1e-2, aloe_lambda=0.0, seed=3,
                      attack=AttackConfig(0.3, steps=3, clamp=None, seed=3))
    a = _run(train_aloe, toy_data, cfg)
    b = _run(train_at, toy_data, cfg)
    assert len(a.trajectory) == 5 * 4
    assert a.trajectory == b.trajectory


def test_at_without_budget_is_standard(toy_data):
    cfg = TrainConfig(epochs=5, batch_size=50, lr=1e-2, seed=3, attack=AttackConfig(0.0, steps=3, clamp=None))
    a = _run(train_at, toy_data, cfg)
    b = _run(train_standard, toy_data, cfg)
    assert a.trajectory == b.trajectory


def test_outlier_attack_changes_the_run(toy_data):
    cfg = TrainConfig(epochs=2, batch_size=50, lr=1e-2, seed=3, attack=AttackConfig(0.3, steps=3, clamp=None))
    aoe = _run(train_aloe, toy_data, cfg, clean_outliers=True)
    aloe = _run(train_aloe, toy_data, cfg)
    assert aoe.trajectory[0] != aloe.trajectory[0]


def test_same_seed_same_trajectory(toy_data):
    cfg = TrainConfig(epochs=2, batch_size=50, seed=1, attack=AttackConfig(0.3, steps=2, clamp=None))
    assert _run(train_at, toy_data, cfg).trajectory == _run(train_at, toy_data, cfg).trajectory


def test_history_and_counts(toy_data, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=64, lr=1e-2, attack=AttackConfig(0.1, steps=1, clamp=None))
    res = train_at(build_classifier("mlp[2,8]", 2), toy_data, cfg)
    assert [h["epoch"] for h in res.history] == [1, 2, 3]
    assert res.steps == 3 * 4 and res.attack_calls == res.steps
    write_history_csv(res.history, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("epoch,")


def test_standard_training_learns_the_toy_task(toy_data):
    res = train_standard(build_classifier("mlp[2,16,16]", 2), toy_data, TrainConfig(epochs=10, batch_size=50, lr=1e-2))
    assert res.history[-1]["train_acc"] > 0.95


@pytest.mark.parametrize("kw,field", [({"objective": "magic"}, "objective"), ({"epochs": -1}, "epochs"),
                                      ({"aloe_lambda": -0.1}, "aloe_lambda"), ({"optimizer": "rmsprop"}, "optimizer")])
def test_config_validation(kw, field):
    with pytest.raises(ConfigurationError) as info:
        TrainConfig(**kw)
    assert info.value.field == field


def test_missing_inputs(toy_data):
    model = build_classifier("mlp[2,8]", 2)
    with pytest.raises(ConfigurationError):
        train_at(model, toy_data, TrainConfig())
    no_out = {k: v for k, v in toy_data.items() if k != "out-exposure"}
    with pytest.raises(ConfigurationError):
        train_aloe(model, no_out, TrainConfig(attack=AttackConfig(0.1)))
    with pytest.raises(ConfigurationError):
        fit_classifier(model, {"in-train": toy_data["out-val"]}, TrainConfig())


def test_non_finite_loss_raises(toy_data):
    model = build_classifier("mlp[2,8]", 2)
    with torch.no_grad():
        model.head.weight.fill_(float("inf"))
    with pytest.raises(TrainingError) as info:
        train_standard(model, toy_data, TrainConfig(epochs=1))
    assert info.value.term == "standard" and info.value.step == 0


def test_config_roundtrip():
    cfg = TrainConfig(objective="ALOE", attack=AttackConfig(0.1, clamp=None), lr_decay_epochs=(3,))
    back = TrainConfig(**cfg.to_dict())
    assert back == cfg


def test_pretrained_extractor_is_frozen(toy_data):
    cfg = TrainConfig(epochs=1, batch_size=100, attack=AttackConfig(0.1, steps=1, clamp=None))
    ext, res = pretrain_feature_extractor(toy_data, cfg, "mlp[2,8,8]")
    assert res.steps == 2
    assert all(not p.requires_grad for p in ext.parameters())
    assert ext(torch.zeros(3, 2)).shape == (3, 8)


def test_extractor_from_checkpoint(tmp_path, toy_data):
    model = build_classifier("mlp[2,8]", 2, seed=5)
    save_checkpoint(model, tmp_path / "c.pt")
    ext, res = pretrain_feature_extractor(checkpoint=tmp_path / "c.pt", input_shape=(2,))
    assert res is None and param_hash(ext.classifier) == param_hash(model)
    with pytest.raises(ConfigurationError):
        pretrain_feature_extractor(checkpoint=tmp_path / "c.pt", input_shape=(3,))
    with pytest.raises(CheckpointError):
        pretrain_feature_extractor(checkpoint=tmp_path / "missing.pt")
