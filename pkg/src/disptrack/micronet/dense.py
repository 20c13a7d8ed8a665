"""Shared-MLP parameters with an exact hand-written backward pass.

A DenseParams is a chain of Linear layers with ReLU between them and a linear
final layer.  ``dense_apply`` runs the chain row-wise over a feature matrix
and, when capturing, returns a tape that turns an output gradient into
parameter gradients plus the input gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class DenseParams:
    """Weights and biases of a Linear(+ReLU) chain; final layer is linear."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).ravel() for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i > 0 and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} does not match "
                                 f"previous output {self.weights[i - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: parameters must be finite")

    @classmethod
    def create(cls, widths, rng: np.random.Generator) -> "DenseParams":
        """Glorot-uniform init for the width chain [d_in, h1, ..., d_out]."""
        widths = list(widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        weights, biases = [], []
        for d_in, d_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (d_in + d_out))
            weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(weights, biases)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_width(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def out_width(self) -> int:
        return int(self.weights[-1].shape[1])

    def zeros_like(self) -> "DenseParams":
        return DenseParams([np.zeros_like(w) for w in self.weights],
                           [np.zeros_like(b) for b in self.biases])

    def copy(self) -> "DenseParams":
        return DenseParams([w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def add_(self, other: "DenseParams") -> "DenseParams":
        """In-place accumulation, used to merge gradients of shared layers."""
        for w, ow in zip(self.weights, other.weights):
            w += ow
        for b, ob in zip(self.biases, other.biases):
            b += ob
        return self


class DenseTape:
    """Captured forward state of dense_apply; replays the exact backward pass."""

    def __init__(self, params: DenseParams, layer_inputs: list[np.ndarray],
                 relu_masks: list[np.ndarray]):
        self._params = params
        self._inputs = layer_inputs
        self._masks = relu_masks

    def backward(self, grad_out: np.ndarray) -> tuple[DenseParams, np.ndarray]:
        """Map d(loss)/d(output) to (parameter gradients, d(loss)/d(input))."""
        grad_out = np.asarray(grad_out, dtype=float)
        grads_w = [None] * len(self._params.weights)
        grads_b = [None] * len(self._params.biases)
        g = grad_out
        for i in range(len(self._params.weights) - 1, -1, -1):
            grads_w[i] = self._inputs[i].T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ self._params.weights[i].T
            if i > 0:
                g = g * self._masks[i - 1]
        return DenseParams(grads_w, grads_b), g


def dense_apply(params: DenseParams, x: np.ndarray,
                capture: bool = False) -> tuple[np.ndarray, DenseTape | None]:
    """Apply the Linear->ReLU chain row-wise; final layer has no ReLU."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_width:
        raise ValueError(f"input of width {x.shape[-1] if x.ndim else '?'} does not match "
                         f"first layer width {params.in_width}")
    inputs, masks = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        if i < last:
            mask = z > 0.0
            h = np.where(mask, z, 0.0)
            masks.append(mask)
        else:
            h = z
    tape = DenseTape(params, inputs, masks) if capture else None
    return h, tape
