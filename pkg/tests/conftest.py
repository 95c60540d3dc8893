import numpy as np
import pytest

from pdmu import autograd as ag
from pdmu.gradcheck import check_gradients


def network_gradients(net, x, targets, mode="parallel", h=1e-5):
    """Finite-difference check of a whole network's loss; returns the error dict."""

    def loss(values):
        bound = net._rebuild(lambda name: values[name])
        return bound.loss(bound.forward(x, mode), targets)

    errors, _, _ = check_gradients(loss, net.params(), h=h)
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["network_gradients", "ag"]
