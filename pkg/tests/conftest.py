import numpy as np
import pytest

from fedvar.models import ConjugateGaussianModel, gen_conjugate
from fedvar.rng import RngKey


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def conj():
    return ConjugateGaussianModel(tau=1.3, lam=0.8, s=0.6)


@pytest.fixture
def conj_data(conj):
    return gen_conjugate(RngKey(11), 12, 3, conj.tau, conj.lam, conj.s)
