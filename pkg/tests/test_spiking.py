import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdmu.errors import InvalidArgumentError
from pdmu.model import ModelSpec, build_network
from pdmu.spiking import (LifConfig, encode, init_encoder, init_spiking_dmu, lif_step, spike_encode,
                          spiking_dmu_forward, surrogate_grad)
from pdmu.ssm import DiscreteSystem

from conftest import network_gradients


def test_lif_step_fires_and_resets():
    cfg = LifConfig()
    s, p = lif_step(np.array([0.0, 0.5, 0.95]), np.array([1.0, 0.3, 0.2]), cfg)
    np.testing.assert_array_equal(s, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(p[[0, 2]], 0.0)
    assert p[1] == pytest.approx(0.9 * 0.5 + 0.3, abs=1e-15)


def test_lif_threshold_is_inclusive():
    s, p = lif_step(0.0, 1.0, LifConfig(threshold=1.0))
    assert s == 1.0 and p == 0.0


def test_lif_config_validation():
    for bad in (dict(threshold=0.0), dict(leak=0.0), dict(leak=1.5), dict(surrogate_width=0)):
        with pytest.raises(InvalidArgumentError):
            LifConfig(**bad)


def test_surrogate_values():
    x = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 3.0])
    np.testing.assert_array_equal(surrogate_grad(x), [0, 0, 0.5, 1.0, 0.5, 0, 0])
    np.testing.assert_array_equal(surrogate_grad(np.array([0.0, 1.0]), LifConfig(surrogate_width=2)),
                                  [0.5, 0.25])


def test_encoder_zero_and_saturating_input():
    enc = init_encoder(3, 5, rng=0)
    zero_bias = np.zeros(5)
    assert not np.any(spike_encode(np.zeros((10, 3)), enc["W_e"], zero_bias))
    big = spike_encode(np.full((10, 3), 1.0), np.full((5, 3), 10.0), zero_bias)
    np.testing.assert_array_equal(big, 1.0)


def test_rate_increases_with_drive():
    rng = np.random.default_rng(0)
    W = np.abs(rng.standard_normal((8, 2)))
    x = np.abs(rng.standard_normal((200, 2)))
    counts = [spike_encode(a * x, W, np.zeros(8)).sum() for a in (0.1, 0.3, 1.0, 3.0)]
    assert counts == sorted(counts) and counts[0] < counts[-1]


def test_layer_rejects_non_binary_input():
    p = init_spiking_dmu(3, 4, 4, 2, rng=0)
    with pytest.raises(InvalidArgumentError):
        spiking_dmu_forward(p, LifConfig(), np.full((5, 3), 0.5))


def test_silent_input_stays_silent():
    p = init_spiking_dmu(4, 6, 5, 3, rng=1)
    spikes, trace = spiking_dmu_forward(p, LifConfig(), np.zeros((2, 20, 4)))
    assert trace["synops"] == 0
    assert not np.any(spikes)
    assert not np.any(trace["m"]) and not np.any(trace["potential"])


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.9))
@settings(max_examples=25, deadline=None)
def test_signals_are_binary_and_reset_is_exact(seed, rate):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("spiking-dmu", input_dim=3, hidden=5, output_dim=2, memory_order=4,
                     delays=3, layers=2, encoder_channels=6)
    net = build_network(spec, seed)
    x = rng.standard_normal((2, 30, 3)) * 3 * rate
    s = encode(x, net.encoder["W_e"], net.encoder["b_e"], spec.lif).value
    assert set(np.unique(s)) <= {0.0, 1.0}
    for layer in net.layers:
        s, trace = spiking_dmu_forward(layer, spec.lif, s)
        for signal in (s, trace["u"], trace["v"]):
            assert set(np.unique(signal)) <= {0.0, 1.0}
        np.testing.assert_array_equal(trace["potential"][s == 1], 0.0)
        assert np.all(trace["potential"] < spec.lif.threshold)


# --- hand simulation -----------------------------------------------------------------------

X = [(1, 0), (0, 1), (1, 1), (0, 0), (1, 0), (0, 1)]


def _hand_layer():
    p = init_spiking_dmu(2, 2, 2, 2, rng=0)
    return replace(
        p,
        W_u=np.array([[1.0, 0.5]]), W_v=np.array([[0.5, 1.0]]),
        W_x=np.array([[0.25, 0.0], [0.0, 0.5]]),
        W_h=np.array([[0.5, 0.25], [-0.25, 0.5]]),
        system=DiscreteSystem(np.array([[0.5, 0.0], [0.25, 0.5]]), np.array([[1.0], [0.5]])),
        gate_system=DiscreteSystem(np.array([[0.5, 0.0], [0.0, 0.25]]),
                                   np.array([[1.0], [-1.0]])),
    )


def _hand_oracle():
    """Scalar-by-scalar evaluation of the six steps."""
    thr, leak = 1.0, 0.9
    u, v, ms, gs, hs, pots, spikes = [], [], [], [], [], [], []
    m, d, pot = [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]
    for k, (x0, x1) in enumerate(X):
        uk = 1.0 if x0 + 0.5 * x1 - thr >= 0 else 0.0
        vk = 1.0 if 0.5 * x0 + x1 - thr >= 0 else 0.0
        m = [0.5 * m[0] + uk, 0.25 * m[0] + 0.5 * m[1] + 0.5 * uk]
        d = [0.5 * d[0] + vk, 0.25 * d[1] - vk]
        e = [math.exp(d[0]), math.exp(d[1])]
        g = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
        u.append(uk)
        v.append(vk)
        ms.append(m)
        gs.append(g)
        h = list(m)
        for j in (1, 2):
            if k - j >= 0:
                h = [h[r] + gs[k - j][j - 1] * ms[k - j][r] for r in range(2)]
        hs.append(h)
        cur = [0.25 * x0 + 0.5 * h[0] + 0.25 * h[1], 0.5 * x1 - 0.25 * h[0] + 0.5 * h[1]]
        pot = [leak * pot[i] + cur[i] for i in range(2)]
        s = [1.0 if pot[i] - thr >= 0 else 0.0 for i in range(2)]
        pot = [0.0 if s[i] else pot[i] for i in range(2)]
        spikes.append(s)
        pots.append(pot)
    return dict(u=u, v=v, m=ms, gates=gs, h=hs, potential=pots, spikes=spikes)


def test_six_step_hand_simulation():
    ref = _hand_oracle()
    # the input projections are readable straight off the raster
    assert ref["u"] == [1, 0, 1, 0, 1, 0]
    assert ref["v"] == [0, 1, 1, 0, 0, 1]
    for mode in ("sequential", "parallel"):
        spikes, trace = spiking_dmu_forward(_hand_layer(), LifConfig(), np.array(X, float), mode)
        np.testing.assert_array_equal(trace["u"], ref["u"])
        np.testing.assert_array_equal(trace["v"], ref["v"])
        np.testing.assert_array_equal(spikes, ref["spikes"])
        for key in ("m", "gates", "h", "potential"):
            np.testing.assert_allclose(trace[key], ref[key], rtol=0, atol=1e-14)
        assert trace["synops"] == 6 * (2 + 2) + 3 * 2 + 3 * 2


def test_hand_simulation_has_margin():
    # no membrane value sits so close to threshold that rounding could flip a spike
    ref = _hand_oracle()
    cfg = LifConfig()
    pot = [0.0, 0.0]
    for k in range(6):
        h = ref["h"][k]
        x0, x1 = X[k]
        cur = [0.25 * x0 + 0.5 * h[0] + 0.25 * h[1], 0.5 * x1 - 0.25 * h[0] + 0.5 * h[1]]
        pre = [cfg.leak * pot[i] + cur[i] for i in range(2)]
        assert min(abs(a - 1.0) for a in pre) > 1e-3
        pot = ref["potential"][k]
    assert any(any(s) for s in ref["spikes"])


# --- gradients -----------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_surrogate_gradients(seed):
    rng = np.random.default_rng(seed)
    spec = ModelSpec("spiking-dmu", input_dim=2, hidden=3, output_dim=2, memory_order=3,
                     delays=2, encoder_channels=4)
    net = build_network(spec, seed)
    x = rng.standard_normal((2, 6, 2)) * 2
    errors = network_gradients(net, x, np.array([0, 1]), mode="sequential")
    assert max(errors.values()) <= 1e-3, errors
