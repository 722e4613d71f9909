import numpy as np
import pytest

from mtfact.core import Collection, MaskedTensor3, Tensor3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_collection(gen, n=12, d1=5, d2=6, l=4, masked=False):
    """Small matrix + tensor collection for unit tests."""
    x1 = gen.standard_normal((n, d1, 1))
    x2 = gen.standard_normal((n, d2, l))
    if masked:
        m1 = gen.random((n, d1, 1)) > 0.2
        m2 = gen.random((n, d2, l)) > 0.2
        # keep every fiber usable
        m1[:3] = True
        m2[:3] = True
        views = (MaskedTensor3(Tensor3(x1), m1), MaskedTensor3(Tensor3(x2), m2))
    else:
        views = (MaskedTensor3.fully_observed(x1), MaskedTensor3.fully_observed(x2))
    return Collection(views, (), ("mat", "tens"))
