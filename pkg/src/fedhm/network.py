"""Forward/backward execution of a ModelSpec over a Model's parameters."""
from __future__ import annotations

import numpy as np

from . import modelspec as ms
from . import tensor_nn as nn


def make_layer(l: ms.LayerSpec) -> nn.Layer:
    if l.kind == ms.DENSE:
        return nn.Dense(l.name, bias=l.bias)
    if l.kind == ms.FDENSE:
        return nn.FactorizedDense(l.name, bias=l.bias)
    if l.kind == ms.CONV:
        return nn.Conv2D(l.name, l.stride, l.padding)
    if l.kind == ms.FCONV:
        return nn.FactorizedConv(l.name, l.stride, l.padding)
    if l.kind == ms.BN:
        return nn.BatchNorm(l.name)
    if l.kind == ms.RELU:
        return nn.ReLU(l.name)
    if l.kind == ms.POOL:
        return nn.AvgPool(l.name)
    if l.kind == ms.FLATTEN:
        return nn.Flatten(l.name)
    if l.kind == ms.ADD:
        return nn.Add(l.name)
    raise ms.SpecError(f"unknown layer kind {l.kind!r}")


class Network:
    """Executes a spec node by node. One instance per training context."""

    def __init__(self, spec: ms.ModelSpec):
        self.spec = spec
        self.layers = [make_layer(l) for l in spec.layers]
        self._ran = False

    def forward(self, model: ms.Model, x: np.ndarray, train: bool = False) -> np.ndarray:
        if model.spec != self.spec:
            raise ms.SpecError("model does not match this network's spec")
        outs: list[np.ndarray] = []
        for l, layer in zip(self.spec.layers, self.layers):
            ins = [x if j == -1 else outs[j] for j in l.inputs]
            arg = ins if l.kind == ms.ADD else ins[0]
            outs.append(layer.forward(model.params, model.buffers, arg, train))
        self._ran = train
        return outs[-1]

    __call__ = forward

    def backward(self, dlogits: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Returns (parameter gradients, input gradient) for the last training-mode forward."""
        if not self._ran:
            raise nn.StateError("backward requires a training-mode forward pass first")
        self._ran = False
        n = len(self.layers)
        upstream: list[np.ndarray | None] = [None] * n
        upstream[-1] = dlogits
        dx_input = None
        grads: dict[str, np.ndarray] = {}
        for i in range(n - 1, -1, -1):
            if upstream[i] is None:
                continue
            l = self.spec.layers[i]
            dx, g = self.layers[i].backward(upstream[i])
            upstream[i] = None
            grads.update(g)
            parts = dx if l.kind == ms.ADD else (dx,)
            for j, d in zip(l.inputs, parts):
                if j == -1:
                    dx_input = d if dx_input is None else dx_input + d
                else:
                    upstream[j] = d if upstream[j] is None else upstream[j] + d
        ordered = {k: grads[k] for k in _param_order(self.spec) if k in grads}
        return ordered, dx_input


def _param_order(spec):
    for l in spec.layers:
        for p in ms.param_shapes(l):
            yield f"{l.name}.{p}"


def predict(model: ms.Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits, batched."""
    net = Network(model.spec)
    outs = [net.forward(model, x[i : i + batch_size], train=False) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)
