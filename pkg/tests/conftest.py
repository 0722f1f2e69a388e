import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def toy_data():
    from robust_ood.data import toy_splits

    return toy_splits("fig4", n_train=200, n_test=200, seed=0)


@pytest.fixture
def small_classifier():
    from robust_ood.models import build_classifier

    return build_classifier("mlp[2,16,16]", 2, seed=0)
