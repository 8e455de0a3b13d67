from __future__ import annotations

import numpy as np

from ..exceptions import ShapeError
from .layers import AffineOccupancy, Layer, layer_from_config


class LayerStack:
    """An ordered list of layers with statically checked shapes.

    Parameters are initialized from ``seed``; the same seed also drives the
    dropout masks drawn in training mode.
    """

    def __init__(self, layers: list[Layer], input_shape, seed=0, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        init_rng = np.random.default_rng(seed)
        self.rng = np.random.default_rng([seed, 1])
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, init_rng, self.dtype)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        self.output_shape = shape

    @classmethod
    def from_config(cls, config: dict, seed=0, dtype=np.float64) -> "LayerStack":
        layers = [layer_from_config(spec["kind"], spec.get("hyper", {})) for spec in config["layers"]]
        return cls(layers, config["input_shape"], seed=seed, dtype=dtype)

    def config(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"kind": l.kind, "hyper": l.hyperparameters()} for l in self.layers],
        }

    def forward(self, x, mode="infer"):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if not isinstance(x, AffineOccupancy):
            x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                f"expected input shape (batch, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        train = mode == "train"
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=self.rng)
        return x

    __call__ = forward

    def backward(self, grad_out, need_input_grad=True, skip_last=0):
        """Backpropagate ``grad_out`` and fill ``layer.grads``.

        ``skip_last`` layers at the top are bypassed, used when a loss returns
        its gradient with respect to the pre-softmax logits.
        """
        grad = np.asarray(grad_out, dtype=self.dtype)
        layers = self.layers[: len(self.layers) - skip_last]
        expected = layers[-1].output_shape if layers else self.input_shape
        if grad.shape[1:] != tuple(expected):
            raise ShapeError(f"gradient shape {grad.shape[1:]} does not match output shape {expected}")
        for i in range(len(layers) - 1, -1, -1):
            grad = layers[i].backward(grad, need_input_grad=need_input_grad or i > 0)
        return grad

    def parameters(self):
        """Yield ``(layer_index, name, array)`` in declaration order."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    def gradients(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.grads.get(name)

    def n_parameters(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def zero_grads(self):
        for layer in self.layers:
            layer.grads = {}

    def __repr__(self):
        body = ", ".join(repr(l) for l in self.layers)
        return f"LayerStack(input={self.input_shape}, [{body}])"
