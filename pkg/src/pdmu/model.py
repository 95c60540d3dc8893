"""Stacked layers plus a linear readout, for every model variant."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .errors import InvalidArgumentError, UnsupportedModeError
from .lmu_cell import LmuLayerParams, init_lmu, lmu_layer, lmu_sequential
from .pdmu_cell import (GateMatrix, PdmuLayerParams, build_gate_matrix, delay_gates, init_pdmu,
                        pdmu_layer, pdmu_sequential)
from .spiking import (LifConfig, SPIKING_TRAINABLE, encode, init_encoder,
                      init_spiking_dmu, spiking_dmu_layer)
from .train import kaiming_init

VARIANTS = ("lmu", "pdmu", "bi-pdmu", "epdmu", "spiking-dmu")
_PDMU_VARIANT = {"pdmu": "plain", "bi-pdmu": "bidirectional", "epdmu": "efficient"}


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    input_dim: int
    hidden: int
    output_dim: int
    memory_order: int | None = None
    delays: int = 5
    layers: int = 1
    theta: float | None = None
    gate_theta: float | None = None
    classify: bool = True
    decode: str = "last"
    encoder_channels: int = 0  # spiking only; 0 means inputs are already spikes
    lif: LifConfig = field(default_factory=LifConfig)
    readout_leak: float = 0.9
    f_u: str = "relu"
    f_o: str = "relu"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("input_dim", "hidden", "output_dim", "delays", "layers"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.decode not in ("last", "mean"):
            raise InvalidArgumentError(f"decode must be 'last' or 'mean', got {self.decode!r}")

    @property
    def q(self):
        return self.hidden if self.memory_order is None else self.memory_order

    @property
    def spiking(self):
        return self.variant == "spiking-dmu"


class Network:
    """Layers, optional spike encoder and a linear head, all as named arrays."""

    def __init__(self, spec: ModelSpec, layers, head, encoder=None):
        self.spec = spec
        self.layers = list(layers)
        self.head = dict(head)
        self.encoder = None if encoder is None else dict(encoder)

    # --- parameters -----------------------------------------------------------------

    def _layer_names(self, layer):
        return SPIKING_TRAINABLE if self.spec.spiking else layer.trainable

    def params(self) -> dict:
        out = {}
        if self.encoder is not None:
            out.update({f"encoder.{k}": ag.value_of(v) for k, v in self.encoder.items()})
        for i, layer in enumerate(self.layers):
            for name in self._layer_names(layer):
                out[f"layer{i}.{name}"] = ag.value_of(getattr(layer, name))
        out.update({f"head.{k}": ag.value_of(v) for k, v in self.head.items()})
        return out

    def _rebuild(self, get):
        encoder = None
        if self.encoder is not None:
            encoder = {k: get(f"encoder.{k}") for k in self.encoder}
        layers = [
            replace(layer, **{n: get(f"layer{i}.{n}") for n in self._layer_names(layer)})
            for i, layer in enumerate(self.layers)
        ]
        head = {k: get(f"head.{k}") for k in self.head}
        return Network(self.spec, layers, head, encoder)

    def with_params(self, flat: dict) -> Network:
        missing = set(self.params()) - set(flat)
        if missing:
            raise InvalidArgumentError(f"missing parameters: {sorted(missing)}")
        return self._rebuild(lambda name: np.asarray(flat[name]))

    def bind(self, tape: ag.Tape) -> Network:
        values = self.params()
        return self._rebuild(lambda name: tape.param(name, values[name]))

    def astype(self, dtype) -> Network:
        net = self.with_params({k: v.astype(dtype) for k, v in self.params().items()})
        net.layers = [replace(layer, system=layer.system.astype(dtype),
                              **({"gate_system": layer.gate_system.astype(dtype)}
                                 if isinstance(layer, PdmuLayerParams) else {}))
                      for layer in net.layers]
        return net

    # --- forward --------------------------------------------------------------------

    def forward(self, x, mode="parallel"):
        """Logits (B, C) for classification, predictions (B, T) for regression."""
        spec = self.spec
        if spec.variant == "bi-pdmu" and mode == "sequential":
            raise UnsupportedModeError("bi-pdmu is non-causal and cannot run sequentially")
        if spec.spiking:
            return self._forward_spiking(x, mode)
        if mode == "sequential":
            return self._forward_sequential(x)
        last_only = spec.classify and spec.decode == "last"
        h = x
        for i, layer in enumerate(self.layers):
            tail = 1 if last_only and i == len(self.layers) - 1 else None
            if isinstance(layer, LmuLayerParams):
                h, _ = lmu_layer(layer, h, "parallel", tail=tail)
            else:
                h, _ = pdmu_layer(layer, h, "parallel", tail=tail)
        return self._readout(h)

    def _forward_sequential(self, x):
        x = np.asarray(ag.value_of(x))
        steps = [x[..., k, :] for k in range(x.shape[-2])]
        for layer in self.layers:
            if isinstance(layer, LmuLayerParams):
                steps, _ = lmu_sequential(layer, steps)
            else:
                steps, _ = pdmu_sequential(layer, steps)
        if self.spec.classify and self.spec.decode == "last":
            return self._readout(ag.stack(steps[-1:], axis=-2))
        return self._readout(ag.stack(steps, axis=-2))

    def _readout(self, h):
        z = ag.linear(h, self.head["W"], self.head["b"])
        if self.spec.classify:
            return z[..., -1, :] if self.spec.decode == "last" else ag.mean(z, axis=-2)
        return z[..., 0]

    def _forward_spiking(self, x, mode):
        spec = self.spec
        s = x
        if self.encoder is not None:
            s = encode(x, self.encoder["W_e"], self.encoder["b_e"], spec.lif)
        self.last_synops = 0
        self.last_traces = []
        for layer in self.layers:
            s, trace = spiking_dmu_layer(layer, spec.lif, s, mode)
            self.last_synops += trace["synops"]
            self.last_traces.append(trace)
        z = ag.leaky_integrate(ag.linear(s, self.head["W"], self.head["b"]), spec.readout_leak)
        return z[..., -1, :] if spec.decode == "last" else ag.mean(z, axis=-2)

    def loss(self, out, targets):
        if self.spec.classify:
            return ag.cross_entropy(out, targets)
        return ag.mse(out, targets)

    def predict(self, x, mode="parallel"):
        out = self.forward(np.asarray(x, dtype=self.dtype), mode).value
        return np.argmax(out, axis=-1) if self.spec.classify else out

    @property
    def dtype(self):
        return self.head["W"].dtype if isinstance(self.head["W"], np.ndarray) else float

    def gate_layers(self):
        return [layer for layer in self.layers if isinstance(layer, PdmuLayerParams)]

    def gate_matrices(self, x):
        """Per-layer GateMatrix for one sample x of shape (T, M)."""
        if self.spec.variant == "lmu":
            raise UnsupportedModeError("the lmu variant has no delay gates")
        x = np.asarray(x, dtype=self.dtype)
        if self.spec.spiking:
            self.forward(x[None], "sequential")
            return [GateMatrix(t["gates"][0]) for t in self.last_traces]
        out = []
        h = x
        for layer in self.layers:
            gates = delay_gates(layer, h)
            back = delay_gates(layer, h, backward=True) if layer.variant == "bidirectional" else None
            out.append(build_gate_matrix(gates, layer.variant, back))
            h = pdmu_layer(layer, h, "parallel")[0].value
        return out


def build_network(spec: ModelSpec, seed=0) -> Network:
    # one stream per layer, so LMU and PDMU draw identical shared weights
    layers = []
    encoder = None
    width = spec.input_dim
    if spec.spiking and spec.encoder_channels:
        encoder = init_encoder(spec.input_dim, spec.encoder_channels, np.random.default_rng([seed, 2]))
        width = spec.encoder_channels
    for i in range(spec.layers):
        rng = np.random.default_rng([seed, 0, i])
        if spec.variant == "lmu":
            layer = init_lmu(width, spec.hidden, spec.q, spec.theta, rng,
                             f_u=spec.f_u, f_o=spec.f_o)
        elif spec.spiking:
            layer = init_spiking_dmu(width, spec.hidden, spec.q, spec.delays,
                                     spec.theta, spec.gate_theta, rng)
        else:
            layer = init_pdmu(width, spec.hidden, spec.q, spec.delays,
                              _PDMU_VARIANT[spec.variant], spec.theta, spec.gate_theta, rng,
                              f_u=spec.f_u, f_o=spec.f_o)
        layers.append(layer)
        width = spec.hidden
    head_rng = np.random.default_rng([seed, 1])
    head = {"W": kaiming_init((spec.output_dim, spec.hidden), spec.hidden, head_rng),
            "b": kaiming_init((spec.output_dim,), spec.hidden, head_rng)}
    return Network(spec, layers, head, encoder)
