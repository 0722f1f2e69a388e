import pytest
import torch

from robust_ood.errors import CheckpointError, ConfigurationError
from robust_ood.models import (build_classifier, build_discriminator, build_generator, eval_mode, freeze,
                               load_checkpoint, param_hash, read_checkpoint, save_checkpoint, seeded, strip_head)


def test_arch_strings():
    m = build_classifier("mlp[2,16,8]", 3)
    assert m(torch.zeros(4, 2)).shape == (4, 3)
    assert m.feature(torch.zeros(4, 2)).shape == (4, 8)
    c = build_classifier({"name": "cnn-small", "input_shape": [1, 8, 8], "channels": [4, 4, 8, 8]}, 10)
    assert c(torch.zeros(2, 1, 8, 8)).shape == (2, 10)
    assert c.input_shape == (1, 8, 8)


@pytest.mark.parametrize("spec", ["resnet", "mlp[2", 42, {"dims": [2, 3]}, "mlp[2]"])
def test_bad_arch(spec):
    with pytest.raises(ConfigurationError):
        build_classifier(spec, 2)


def test_single_class_rejected():
    with pytest.raises(ConfigurationError):
        build_classifier("mlp[2,4]", 1)


def test_seeded_construction_is_reproducible_and_isolated():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    a = build_classifier("mlp[2,8]", 2, seed=7)
    after = torch.rand(1)
    assert before == after
    assert param_hash(a) == param_hash(build_classifier("mlp[2,8]", 2, seed=7))
    assert param_hash(a) != param_hash(build_classifier("mlp[2,8]", 2, seed=8))


def test_strip_head_shares_weights():
    m = build_classifier("mlp[2,8]", 2)
    ext = strip_head(m)
    x = torch.randn(5, 2)
    assert torch.equal(ext(x), m.feature(x))
    with torch.no_grad():
        m.body.net[0].bias.add_(1.0)
    assert torch.equal(ext(x), m.feature(x))


def test_generator_and_discriminator_shapes():
    g = build_generator(4, (1, 3, 3), hidden=(8,), out_activation="sigmoid")
    z = g.sample_latent(6, torch.Generator().manual_seed(0))
    out = g(z)
    assert out.shape == (6, 1, 3, 3) and ((out > 0) & (out < 1)).all()
    d = build_discriminator((1, 3, 3), (8,), zero_init_head=True)
    assert torch.equal(d.prob(out), torch.full((6,), 0.5))
    with pytest.raises(ConfigurationError):
        build_generator(4, 2, out_activation="tanh2")


def test_eval_mode_restores_mixed_flags():
    m = build_classifier({"name": "cnn-small", "input_shape": [1, 8, 8], "channels": [4, 4, 8, 8]}, 2)
    m.train()
    m.body.net[1].eval()
    flags = [mod.training for mod in m.modules()]
    with eval_mode(m):
        assert not any(mod.training for mod in m.modules())
    assert [mod.training for mod in m.modules()] == flags


def test_eval_mode_restores_after_error():
    m = build_classifier("mlp[2,4]", 2)
    m.train()
    with pytest.raises(KeyError):
        with eval_mode(m):
            raise KeyError
    assert m.training


def test_freeze():
    m = freeze(build_classifier("mlp[2,4]", 2))
    assert not m.training and not any(p.requires_grad for p in m.parameters())


@pytest.mark.parametrize("maker", [lambda: build_classifier("mlp[2,8]", 3, seed=1),
                                   lambda: build_generator(3, 5, seed=1),
                                   lambda: build_discriminator(5, (4,), seed=1)])
def test_checkpoint_roundtrip(tmp_path, maker):
    m = maker()
    save_checkpoint(m, tmp_path / "m.pt", metrics={"auroc": 0.75}, step=12, config={"a": 1})
    back = load_checkpoint(tmp_path / "m.pt")
    assert param_hash(back) == param_hash(m)
    assert back.checkpoint.step == 12 and back.checkpoint.metrics == {"auroc": 0.75}
    assert back.checkpoint.config_hash != ""


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "nope.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "other.pt")
    m = build_classifier("mlp[2,8]", 2)
    save_checkpoint(m, tmp_path / "m.pt")
    blob = torch.load(tmp_path / "m.pt", weights_only=True)
    blob["spec"]["arch_params"] = {"dims": [2, 9]}
    torch.save(blob, tmp_path / "m.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.pt")


def test_seeded_restores_rng():
    torch.manual_seed(3)
    expected = torch.rand(2)
    torch.manual_seed(3)
    with seeded(99):
        torch.rand(5)
    assert torch.equal(torch.rand(2), expected)
