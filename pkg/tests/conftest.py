import warnings

import numpy as np
import pytest

from hecnn.backends import get_backend
from hecnn.model import random_model
from hecnn.params import NoMultiplicationWarning, derive_params

# small-ring parameter set shared by most functional tests
SMALL = dict(m=2**10, modulus_bits=270, precision_bits=35, seed=42)


def make_backend(name, m=None, l_bits=None, r=None, seed=None):
    p = derive_params(
        m or SMALL["m"],
        l_bits or SMALL["modulus_bits"],
        r or SMALL["precision_bits"],
        seed=SMALL["seed"] if seed is None else seed,
    )
    return get_backend(name, p)


@pytest.fixture(scope="session", params=["ref", "ckks"])
def any_backend(request):
    """Backend with generated keys and the evaluation key bound."""
    be = make_backend(request.param)
    keys = be.keygen()
    be.set_eval_key(keys)
    return be, keys


@pytest.fixture(scope="session")
def ckks_small():
    be = make_backend("ckks")
    keys = be.keygen()
    be.set_eval_key(keys)
    return be, keys


@pytest.fixture(scope="session")
def ref_small():
    be = make_backend("ref")
    keys = be.keygen()
    be.set_eval_key(keys)
    return be, keys


@pytest.fixture(scope="session")
def tiny_model():
    return random_model(input_dims=(8, 8), filters=2, kernel=(3, 3), classes=3, seed=5)


@pytest.fixture(scope="session")
def tiny_images():
    rng = np.random.default_rng(1)
    return rng.uniform(0.0, 1.0, (5, 8, 8))


@pytest.fixture(autouse=True)
def _quiet_expected_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        warnings.filterwarnings("ignore", category=NoMultiplicationWarning)
        yield
