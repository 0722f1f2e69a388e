import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_ood.attacks import AttackConfig
from robust_ood.errors import ConfigurationError, EvaluationError
from robust_ood.evaluation import (ALL_SETTINGS, EvalReport, EvalSetting, auroc, cross_attack_eval,
                                   detector_average, evaluate, step_sweep, transfer_eval)
from robust_ood.models import build_classifier
from robust_ood.scores import MSPScore


def pairwise_auroc(a, b):
    a = np.asarray(a, dtype=np.float64)[:, None]
    b = np.asarray(b, dtype=np.float64)[None, :]
    return ((a > b).sum() + 0.5 * (a == b).sum()) / (a.size * b.size)


def test_auroc_examples():
    assert auroc([3, 4], [1, 2]) == 1.0
    assert auroc([1, 1], [1, 1]) == 0.5
    assert auroc([0.9, 0.4], [0.5, 0.1]) == 0.75
    assert auroc([1, 2], [3, 4]) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=60), st.lists(st.integers(-5, 5), min_size=1, max_size=60))
def test_auroc_matches_pairwise_with_ties(a, b):
    assert abs(auroc(a, b) - pairwise_auroc(a, b)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_auroc_complement(a, b):
    assert auroc(a, b) + auroc(b, a) == 1.0


def test_auroc_invariant_to_monotone_transform():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=50), rng.normal(size=70) - 0.5
    assert auroc(a, b) == auroc(np.exp(a), np.exp(b))


@pytest.mark.parametrize("a,b", [([], [1.0]), ([1.0], []), ([float("nan")], [1.0]), ([1.0], [float("inf")])])
def test_auroc_rejects_bad_input(a, b):
    with pytest.raises(ConfigurationError):
        auroc(a, b)


def test_setting_parse():
    assert EvalSetting.parse("attackboth") is EvalSetting.ATTACK_BOTH
    assert EvalSetting.parse("AttackIn").attacks_in and not EvalSetting.parse("AttackIn").attacks_out
    with pytest.raises(ConfigurationError):
        EvalSetting.parse("sideways")


def _report():
    r = EvalReport("MSP", "toy-in", metadata={"seed": 3})
    r.set("a", "Clean", 0.9)
    r.set("a", "AttackBoth", 0.2)
    r.set("b", "Clean", 0.7)
    r.set("b", "AttackBoth", 0.4)
    r.accuracy["Clean"] = 0.95
    return r


def test_report_averages_and_roundtrip(tmp_path):
    r = _report()
    assert r.average("Clean") == pytest.approx(0.8, abs=1e-15)
    assert r.average(EvalSetting.ATTACK_BOTH) == pytest.approx(0.3, abs=1e-15)
    r.write_json(tmp_path / "r.json")
    back = EvalReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back.auroc == r.auroc and back.accuracy == r.accuracy and back.metadata == r.metadata


def test_report_csv_has_average_rows(tmp_path):
    r = _report()
    r.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "method,in_dataset,out_dataset,setting,auroc,accuracy,seed"
    assert sum(1 for ln in lines if ",average," in ln) == 2
    assert len(lines) == 1 + 4 + 2


def test_report_rejects_unknown_schema():
    with pytest.raises(ConfigurationError):
        EvalReport.from_dict({"schema_version": 99})


def test_detector_average_reproduces_reported_means():
    msp = [0.975, 0.735, 0.770, 0.698, 0.780, 0.843]
    md = [0.995, 0.771, 0.789, 0.626, 0.709, 0.827]
    results = {}
    for i, (a, b) in enumerate(zip(msp, md)):
        results[(f"baseline{i}", "MSP")] = {"Clean": a}
        results[(f"baseline{i}", "MD")] = {"Clean": b}
    avg = detector_average(results)
    assert round(avg["MSP"]["Clean"], 3) == 0.800
    assert round(avg["MD"]["Clean"], 3) == 0.786


@pytest.fixture
def trained_msp(toy_data):
    from robust_ood.training import TrainConfig, train_standard

    model = build_classifier("mlp[2,16,16]", 2, seed=0)
    train_standard(model, toy_data, TrainConfig(epochs=5, batch_size=50, lr=1e-2, seed=0))
    return MSPScore(model)


def test_clean_setting_equals_direct_scoring(trained_msp, toy_data):
    rep = evaluate(trained_msp, toy_data["in-test"], {"o": toy_data["out-test"]}, ["Clean"])
    direct = auroc(trained_msp.score(toy_data["in-test"].inputs), trained_msp.score(toy_data["out-test"].inputs))
    assert rep.get("o", "Clean") == direct


def test_attacks_lower_auroc(trained_msp, toy_data):
    cfg = AttackConfig(0.5, steps=10, clamp=None, seed=1)
    rep = evaluate(trained_msp, toy_data["in-test"], toy_data["out-test"], ALL_SETTINGS, cfg,
                   classifier=trained_msp.model)
    v = {s.value: rep.get("out", s) for s in ALL_SETTINGS}
    assert v["AttackBoth"] <= min(v["AttackIn"], v["AttackOut"]) <= v["Clean"]
    assert set(rep.accuracy) == {"Clean", "AttackIn", "AttackBoth"}


def test_evaluate_is_deterministic_and_order_free(trained_msp, toy_data):
    cfg = AttackConfig(0.5, steps=5, clamp=None, seed=4)
    outs = {"a": toy_data["out-test"], "b": toy_data["out-val"]}
    r1 = evaluate(trained_msp, toy_data["in-test"], outs, ALL_SETTINGS, cfg)
    r2 = evaluate(trained_msp, toy_data["in-test"], dict(reversed(outs.items())), ALL_SETTINGS, cfg)
    assert r1.auroc["a"] == r2.auroc["a"] and r1.auroc["b"] == r2.auroc["b"]


def test_attacked_settings_need_config(trained_msp, toy_data):
    with pytest.raises(ConfigurationError):
        evaluate(trained_msp, toy_data["in-test"], toy_data["out-test"], ["AttackIn"])


def test_failures_name_dataset_and_setting(toy_data):
    model = build_classifier("mlp[2,8]", 2, seed=0)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(EvaluationError) as info:
        evaluate(MSPScore(model), toy_data["in-test"], toy_data["out-test"], ["AttackIn"],
                 AttackConfig(0.1, steps=2, clamp=None))
    assert info.value.setting == "AttackIn"


def test_self_transfer_equals_white_box_fgsm(trained_msp, toy_data):
    eps = 0.3
    rep = transfer_eval({"self": trained_msp}, trained_msp, toy_data["in-test"], {"o": toy_data["out-test"]},
                        eps, clamp=None)["self"]
    white = evaluate(trained_msp, toy_data["in-test"], {"o": toy_data["out-test"]},
                     ["AttackIn", "AttackOut", "AttackBoth"], AttackConfig.fgsm(eps, clamp=None))
    assert rep.auroc["o"] == white.auroc["o"]


def test_transfer_shape_mismatch(trained_msp, toy_data):
    other = MSPScore(build_classifier("mlp[3,4]", 2, seed=0))
    with pytest.raises(ConfigurationError):
        transfer_eval({"bad": other}, trained_msp, toy_data["in-test"], toy_data["out-test"], 0.1, clamp=None)


def test_one_step_sweep_equals_fgsm(trained_msp, toy_data):
    eps = 0.3
    base = AttackConfig(eps, steps=10, step_size=eps, rand_init=False, clamp=None)
    sweep = step_sweep(trained_msp, toy_data["in-test"], {"o": toy_data["out-test"]}, [1, 2], base)
    fg = evaluate(trained_msp, toy_data["in-test"], {"o": toy_data["out-test"]},
                  ["AttackIn", "AttackOut", "AttackBoth"], AttackConfig.fgsm(eps, clamp=None))
    for s in ("AttackIn", "AttackOut", "AttackBoth"):
        assert sweep.at(s, 1) == fg.get("o", s)


def test_sweep_validation(trained_msp, toy_data):
    with pytest.raises(ConfigurationError):
        step_sweep(trained_msp, toy_data["in-test"], toy_data["out-test"], [5, 1], AttackConfig(0.1))
    with pytest.raises(ConfigurationError):
        step_sweep(trained_msp, toy_data["in-test"], toy_data["out-test"], [1, 5])


def test_cross_attack_needs_labels(trained_msp, toy_data):
    unlabeled = toy_data["out-val"]
    with pytest.raises(ConfigurationError):
        cross_attack_eval(trained_msp.model, trained_msp, unlabeled, toy_data["out-test"], AttackConfig(0.1))


def test_cross_attack_table_shape(trained_msp, toy_data):
    t = cross_attack_eval(trained_msp.model, trained_msp, toy_data["in-test"], toy_data["out-test"],
                          AttackConfig(0.5, steps=5, clamp=None))
    d = t.to_dict()
    assert set(d) == {"clean", "attack_classification", "attack_detection"}
    assert t.accuracy["classification"] <= t.clean_accuracy
    assert all(math.isfinite(v) for v in t.auroc.values())
