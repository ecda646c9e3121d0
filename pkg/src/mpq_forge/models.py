"""Model zoo: quantizable linear/conv layers and the three desk-scale networks."""

from __future__ import annotations

import copy
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .quantizer import ScaleFactor, fake_quant
from .tensor import Tensor

LINEAR = "linear"
CONV = "conv"

# (weight scale, activation scale) per quantized layer; None bypasses that quantizer.
QuantPair = tuple[Optional[ScaleFactor], Optional[ScaleFactor]]


class QuantLayer:
    """Linear or conv layer whose input activation and weight can be fake-quantized.

    The activation quantizer acts on the layer *input*, which is either the
    network input (pixels in [0, 1]) or a relu output, so the unsigned grid fits.
    """

    def __init__(self, kind: str, weight: np.ndarray, name: str, stride: int = 1, padding: int = 0):
        if kind not in (LINEAR, CONV):
            raise ValueError(f"unsupported layer kind {kind!r}")
        self.kind = kind
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = T.parameter(weight, name=f"{name}.weight")
        out_features = weight.shape[1] if kind == LINEAR else weight.shape[0]
        self.bias = T.parameter(np.zeros(out_features), name=f"{name}.bias")

    @property
    def params(self) -> int:
        return self.weight.size

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, w_scale: Optional[ScaleFactor] = None,
                 a_scale: Optional[ScaleFactor] = None, grad_scale: bool = True) -> Tensor:
        if a_scale is not None:
            a_scale.uses += 1
            x = fake_quant(x, a_scale.param, a_scale.spec, grad_scale)
        w = self.weight
        if w_scale is not None:
            w_scale.uses += 1
            w = fake_quant(w, w_scale.param, w_scale.spec, grad_scale)
        if self.kind == LINEAR:
            y = T.matmul(x, w)
        else:
            y = T.conv2d(x, w, self.stride, self.padding)
        return T.add_bias(y, self.bias)


class Model:
    """A feed-forward stack of quantized layers, ``"relu"`` and ``"flatten"`` steps."""

    def __init__(self, name: str, steps: list, input_shape: Sequence[int], classes: int,
                 exempt_first_last: bool = False):
        self.name = name
        self.steps = steps
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.exempt_first_last = exempt_first_last
        self.grad_scale = True

    @property
    def layers(self) -> list[QuantLayer]:
        return [s for s in self.steps if isinstance(s, QuantLayer)]

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def exempt_layers(self) -> set[int]:
        if not self.exempt_first_last:
            return set()
        return {0, len(self.layers) - 1}

    def forward(self, x, quant: Optional[Sequence[QuantPair]] = None,
                on_input: Optional[Callable[[int, np.ndarray], None]] = None) -> Tensor:
        """Run the network. ``quant[l]`` selects the scale factors for layer ``l``.

        ``on_input(l, x)`` sees each quantized layer's input before it is quantized.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(self.name, f"expected input (N, {self.input_shape}), got {x.shape}")
        if quant is not None and len(quant) != len(self.layers):
            raise ValueError(f"{len(quant)} quantizer pairs for {len(self.layers)} layers")
        li = 0
        for step in self.steps:
            if step == "relu":
                x = T.relu(x)
            elif step == "flatten":
                x = T.flatten(x)
            else:
                if on_input is not None:
                    on_input(li, x.data)
                w_s, a_s = quant[li] if quant is not None else (None, None)
                x = step(x, w_s, a_s, self.grad_scale)
                li += 1
        return x

    __call__ = forward

    def trace_shapes(self) -> list[tuple[tuple, tuple]]:
        """(input shape, output shape) of every quantized layer for a batch of one."""
        shapes = []
        x = Tensor(np.zeros((1,) + self.input_shape))
        with T.no_grad():
            for step in self.steps:
                if step == "relu":
                    x = T.relu(x)
                elif step == "flatten":
                    x = T.flatten(x)
                else:
                    y = step(x)
                    shapes.append((x.shape[1:], y.shape[1:]))
                    x = y
        return shapes

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        if set(params) != set(state):
            raise ValueError(f"state keys {sorted(state)} do not match model {sorted(params)}")
        for k, v in state.items():
            if params[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {params[k].shape}")
            params[k].data = np.array(v, dtype=np.float64)

    def clone(self) -> "Model":
        return copy.deepcopy(self)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def mlp(input_shape, classes: int, seed: int = 0, hidden: int = 64) -> Model:
    rng = np.random.default_rng(seed)
    d = int(np.prod(input_shape))
    steps = [
        "flatten",
        QuantLayer(LINEAR, _he(rng, (d, hidden), d), "fc0"),
        "relu",
        QuantLayer(LINEAR, _he(rng, (hidden, classes), hidden), "fc1"),
    ]
    return Model("mlp", steps, input_shape, classes)


def cnn(input_shape, classes: int, seed: int = 0, width: int = 8) -> Model:
    """Four 3x3 convs (two of them stride 2) and a linear classifier."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    chans = [(c, width, 1), (width, 2 * width, 2), (2 * width, 2 * width, 1), (2 * width, 2 * width, 2)]
    steps: list = []
    for i, (cin, cout, stride) in enumerate(chans):
        steps += [QuantLayer(CONV, _he(rng, (cout, cin, 3, 3), cin * 9), f"conv{i}", stride, 1), "relu"]
        h = T.conv_output_size(h, 3, stride, 1)
        w = T.conv_output_size(w, 3, stride, 1)
    feat = 2 * width * h * w
    steps += ["flatten", QuantLayer(LINEAR, _he(rng, (feat, classes), feat), "fc")]
    return Model("cnn", steps, input_shape, classes, exempt_first_last=True)


def contrast(input_shape, classes: int, seed: int = 0, wide_std: float = 1.0,
             narrow_std: float = 0.1) -> Model:
    """Two equal-shape linear layers: ``wide`` (large weights) then ``narrow``."""
    d = int(np.prod(input_shape))
    if d != classes:
        raise ValueError(f"contrast network needs input size == classes, got {d} and {classes}")
    rng = np.random.default_rng(seed)
    steps = [
        "flatten",
        QuantLayer(LINEAR, rng.normal(0.0, wide_std, (d, d)), "wide"),
        "relu",
        QuantLayer(LINEAR, rng.normal(0.0, narrow_std, (d, d)), "narrow"),
    ]
    return Model("contrast", steps, input_shape, classes)


ZOO = {"mlp": mlp, "cnn": cnn, "contrast": contrast}


def build_model(name: str, input_shape, classes: int, seed: int = 0, **kwargs) -> Model:
    try:
        factory = ZOO[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(ZOO)}") from None
    return factory(input_shape, classes, seed=seed, **kwargs)


def predict_logits(model: Model, x: np.ndarray, quant=None, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model.forward(x[i:i + batch_size], quant).data)
    return np.concatenate(out) if out else np.zeros((0, model.classes))


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, quant=None) -> float:
    logits = predict_logits(model, x, quant)
    return float(np.mean(logits.argmax(axis=1) == y)) if len(y) else 0.0
