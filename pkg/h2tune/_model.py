#!/usr/bin/env python3

import logging
from typing import List
from typing import Tuple

import attr
import numpy as np

from ._alignment import SharedStack
from ._exceptions import H2TuneConfigError
from ._exceptions import H2TuneInputError
from ._trilora import TriLoraLayer

_LOGGER = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "identity")


@attr.s(slots=True)
class ArchSpec:
    """Layer dimensions and activation of a toy client model."""

    layer_dims = attr.ib(type=List[Tuple[int, int]], kw_only=True)
    activation = attr.ib(type=str, default="tanh", kw_only=True)

    def __attrs_post_init__(self) -> None:
        self.layer_dims = [(int(a), int(b)) for a, b in self.layer_dims]
        if not self.layer_dims:
            raise H2TuneConfigError("A model needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise H2TuneConfigError(
                f"Unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )
        for idx, ((_, b), (a, _)) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            if b != a:
                raise H2TuneConfigError(
                    f"Layer {idx} outputs {b} features but layer {idx + 1} expects {a}"
                )
        if any(a < 1 or b < 1 for a, b in self.layer_dims):
            raise H2TuneConfigError(f"Layer dimensions {self.layer_dims} must be positive")

    @property
    def depth(self) -> int:
        """Number of layers."""
        return len(self.layer_dims)

    @property
    def input_dim(self) -> int:
        """Number of input features."""
        return self.layer_dims[0][0]

    @property
    def num_classes(self) -> int:
        """Number of output logits."""
        return self.layer_dims[-1][1]


@attr.s(slots=True)
class ForwardCache:
    """Intermediate values of a forward pass needed by the backward pass."""

    inputs = attr.ib(type=List[np.ndarray], factory=list)
    projected = attr.ib(type=List[np.ndarray], factory=list)
    mixed = attr.ib(type=List[np.ndarray], factory=list)
    outputs = attr.ib(type=List[np.ndarray], factory=list)


@attr.s(slots=True)
class LayerGrads:
    """Gradients of a scalar loss w.r.t. one layer's adapter factors.

    ``middle`` is the gradient w.r.t. the whole middle factor ``I + mask * R``.
    """

    A = attr.ib(type=np.ndarray, kw_only=True)
    B = attr.ib(type=np.ndarray, kw_only=True)
    middle = attr.ib(type=np.ndarray, kw_only=True)


@attr.s(slots=True)
class ClientModel:
    """A stack of adapted layers with an activation between consecutive layers."""

    layers = attr.ib(type=List[TriLoraLayer], kw_only=True)
    activation = attr.ib(type=str, default="tanh", kw_only=True)

    @property
    def depth(self) -> int:
        """Number of layers."""
        return len(self.layers)

    @property
    def rank(self) -> int:
        """Rank shared by all the layers."""
        return self.layers[0].rank

    def _activate(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.activation == "tanh" else z

    def _activate_grad(self, out: np.ndarray) -> np.ndarray:
        return 1.0 - out * out if self.activation == "tanh" else np.ones_like(out)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        """Compute raw logits for a batch of row vectors."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not np.all(np.isfinite(h)):
            raise H2TuneInputError("Model input contains non-finite values")

        cache = ForwardCache()
        for idx, layer in enumerate(self.layers):
            u = h @ layer.A
            v = u @ layer.middle()
            z = h @ layer.base_weight + v @ layer.B
            cache.inputs.append(h)
            cache.projected.append(u)
            cache.mixed.append(v)
            h = self._activate(z) if idx < self.depth - 1 else z
            cache.outputs.append(h)

        return h, cache

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Compute raw logits for a batch of row vectors."""
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_logits: np.ndarray) -> List[LayerGrads]:
        """Backpropagate a gradient w.r.t. the logits to every layer's adapter factors."""
        grads: List[LayerGrads] = []
        grad_z = grad_logits
        for idx in reversed(range(self.depth)):
            layer = self.layers[idx]
            grad_v = grad_z @ layer.B.T
            grad_u = grad_v @ layer.middle().T
            grads.append(
                LayerGrads(
                    A=cache.inputs[idx].T @ grad_u,
                    B=cache.mixed[idx].T @ grad_z,
                    middle=cache.projected[idx].T @ grad_v,
                )
            )
            if idx > 0:
                grad_h = grad_z @ layer.base_weight.T + grad_u @ layer.A.T
                grad_z = grad_h * self._activate_grad(cache.outputs[idx - 1])

        grads.reverse()
        return grads

    def shared_stack(self) -> SharedStack:
        """Get a copy of the task-shared matrices as a stack."""
        return SharedStack.from_matrices(layer.R for layer in self.layers)

    def mask_stack(self) -> np.ndarray:
        """Get the masks of all layers as a ``(depth, rank, rank)`` boolean array."""
        return np.stack([layer.mask for layer in self.layers])

    def specific_bytes(self) -> bytes:
        """Get the raw bytes of all task-specific matrices."""
        return b"".join(layer.A.tobytes() + layer.B.tobytes() for layer in self.layers)

    def shared_bytes(self) -> bytes:
        """Get the raw bytes of all task-shared matrices and masks."""
        return b"".join(layer.R.tobytes() + layer.mask.tobytes() for layer in self.layers)
