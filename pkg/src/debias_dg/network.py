"""Dense feed-forward feature extractor with named tap points.

Tap names are ``"input"`` for the raw rows, ``"h1" .. "h{k-1}"`` for hidden
layer outputs and ``"z"`` for the final (embedding) layer output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ACTIVATIONS = ("relu", "identity")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor
    activation: str
    name: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.bias_add(ad.matmul(x, self.weight), self.bias)
        if self.activation == "relu":
            return ad.relu(h)
        return h


class LayeredNet:
    """Ordered stack of dense layers; the last layer output is the embedding ``z``."""

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ValueError("LayeredNet needs at least one layer")
        for k, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer {k + 1} expects {b.in_dim} inputs but layer {k} produces {a.out_dim}")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {layer.name}: bias shape {layer.bias.shape} != ({layer.out_dim},)")
        names = ["input"] + [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"tap names must be unique, got {names}")
        self.layers = list(layers)
        self.tap_names = names

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params += [layer.weight, layer.bias]
        return params

    def tap_dim(self, tap: str) -> int:
        return self.dims[self._tap_index(tap)]

    def _tap_index(self, tap: str) -> int:
        try:
            return self.tap_names.index(tap)
        except ValueError:
            raise KeyError(f"unknown tap {tap!r}; available: {self.tap_names}") from None

    def forward_with_taps(self, x) -> tuple[Tensor, dict[str, Tensor]]:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"layer 0: input has shape {x.shape}, expected (n, {self.input_dim})")
        taps = {"input": x}
        h = x
        for layer in self.layers:
            h = layer(h)
            taps[layer.name] = h
        return h, taps

    def forward(self, x) -> Tensor:
        return self.forward_with_taps(x)[0]

    def forward_from_tap(self, tap: str, q) -> Tensor:
        """Run only the layers after ``tap`` on the (possibly perturbed) activation ``q``."""
        k = self._tap_index(tap)
        q = ad.as_tensor(q)
        if q.ndim != 2 or q.shape[1] != self.dims[k]:
            raise ShapeError(f"tap {tap!r}: activation has shape {q.shape}, expected (n, {self.dims[k]})")
        h = q
        for layer in self.layers[k:]:
            h = layer(h)
        return h

    def suffix(self, tap: str) -> "LayeredNet":
        """A net sharing the parameter tensors of every layer after ``tap``."""
        k = self._tap_index(tap)
        if k == len(self.layers):
            raise ValueError("the final tap has an empty suffix")
        layers = self.layers[k:]
        return LayeredNet([DenseLayer(l.weight, l.bias, l.activation, l.name) for l in layers])

    def copy(self) -> "LayeredNet":
        return LayeredNet([DenseLayer(Tensor(l.weight.data), Tensor(l.bias.data), l.activation, l.name)
                           for l in self.layers])


def layer_names(n_layers: int) -> list[str]:
    return [f"h{k + 1}" for k in range(n_layers - 1)] + ["z"]


def init_params(dims: Sequence[int], seed=None, activations: Optional[Sequence[str]] = None,
                rng: Optional[np.random.Generator] = None) -> LayeredNet:
    """Glorot-uniform weights and zero biases for a net with layer sizes ``dims``.

    ``dims`` lists the input size followed by every layer's output size.  By
    default hidden layers use relu and the final layer is linear.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError(f"dims needs an input size and at least one layer size, got {dims}")
    if any(d <= 0 for d in dims):
        raise ValueError(f"layer sizes must be positive, got {dims}")
    n = len(dims) - 1
    if activations is None:
        activations = ["relu"] * (n - 1) + ["identity"]
    if len(activations) != n:
        raise ValueError(f"need {n} activations, got {len(activations)}")
    if rng is None:
        rng = np.random.default_rng(seed)
    layers = []
    for k, (name, act) in enumerate(zip(layer_names(n), activations)):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = glorot_bound(fan_in, fan_out)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(DenseLayer(Tensor(w, name=f"{name}.weight"),
                                 Tensor(np.zeros(fan_out), name=f"{name}.bias"), act, name))
    return LayeredNet(layers)


def resolve_tap_set(net: LayeredNet, spec) -> list[str]:
    """Turn a tap-set spec into concrete tap names.

    Accepts an explicit list, ``"default"`` (input and the embedding layer) or
    ``"all-but-last"`` (every tap except the embedding).
    """
    if isinstance(spec, str):
        if spec == "default":
            taps = ["input", net.tap_names[-1]]
        elif spec == "all-but-last":
            taps = net.tap_names[:-1]
        elif spec == "all":
            taps = list(net.tap_names)
        else:
            taps = [t.strip() for t in spec.split(",") if t.strip()]
    else:
        taps = list(spec)
    if not taps:
        raise ValueError("tap set is empty")
    for t in taps:
        if t not in net.tap_names:
            raise KeyError(f"unknown tap {t!r}; available: {net.tap_names}")
    return list(dict.fromkeys(taps))
