import numpy as np
import pytest
import torch

from retinex_llie import autodiff as ad

ad.configure_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def t(a, dtype=torch.float64, grad=False):
    return torch.tensor(np.asarray(a), dtype=dtype, requires_grad=grad)


def const(value, shape, dtype=torch.float64):
    return torch.full(shape, float(value), dtype=dtype)
