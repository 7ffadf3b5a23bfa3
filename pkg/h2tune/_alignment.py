#!/usr/bin/env python3

import logging
import math
from typing import Iterable

import attr
import numpy as np

from ._exceptions import H2TuneConfigError
from ._exceptions import H2TuneShapeError

_LOGGER = logging.getLogger(__name__)


@attr.s(slots=True)
class SharedStack:
    """An ordered stack of square task-shared matrices, stored as a ``(depth, rank, rank)`` array."""

    layers = attr.ib(type=np.ndarray)

    def __attrs_post_init__(self) -> None:
        self.layers = np.asarray(self.layers, dtype=np.float64)
        if self.layers.ndim != 3 or self.layers.shape[1] != self.layers.shape[2]:
            raise H2TuneShapeError(
                f"A shared stack needs shape (depth, rank, rank), got {self.layers.shape}"
            )
        if self.layers.shape[0] < 1:
            raise H2TuneShapeError("A shared stack needs at least one layer")

    @property
    def depth(self) -> int:
        """Number of layers in the stack."""
        return self.layers.shape[0]

    @property
    def rank(self) -> int:
        """Rank of every matrix in the stack."""
        return self.layers.shape[1]

    @classmethod
    def zeros(cls, depth: int, rank: int) -> "SharedStack":
        """Create a stack of zero matrices."""
        return cls(np.zeros((depth, rank, rank)))

    @classmethod
    def from_matrices(cls, matrices: Iterable[np.ndarray]) -> "SharedStack":
        """Create a stack copying the given matrices in order."""
        return cls(np.stack([np.array(m, dtype=np.float64) for m in matrices]))

    def copy(self) -> "SharedStack":
        """Get a deep copy of the stack."""
        return SharedStack(self.layers.copy())


@attr.s(slots=True)
class RelationMatrix:
    """A trainable map between a client's layer stack and the global one."""

    omega = attr.ib(type=np.ndarray)

    def __attrs_post_init__(self) -> None:
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.ndim != 2:
            raise H2TuneShapeError(
                f"A relation matrix needs two dimensions, got shape {self.omega.shape}"
            )

    @property
    def local_depth(self) -> int:
        """Depth of the client stack (rows)."""
        return self.omega.shape[0]

    @property
    def global_depth(self) -> int:
        """Depth of the global stack (columns)."""
        return self.omega.shape[1]

    def copy(self) -> "RelationMatrix":
        """Get a deep copy of the relation matrix."""
        return RelationMatrix(self.omega.copy())


def to_global(stack: SharedStack, relation: RelationMatrix) -> SharedStack:
    """Lift a client stack to the global depth, layer m being ``sum_l omega[l, m] * stack[l]``."""
    if stack.depth != relation.local_depth:
        raise H2TuneShapeError(
            f"Stack depth {stack.depth} does not match {relation.local_depth} relation rows"
        )

    return SharedStack(np.einsum("lm,lij->mij", relation.omega, stack.layers))


def to_local(global_stack: SharedStack, relation: RelationMatrix) -> SharedStack:
    """Project a global stack to the client depth, layer l being ``sum_m omega[l, m] * global[m]``."""
    if global_stack.depth != relation.global_depth:
        raise H2TuneShapeError(
            f"Global stack depth {global_stack.depth} does not match "
            f"{relation.global_depth} relation columns"
        )

    return SharedStack(np.einsum("lm,mij->lij", relation.omega, global_stack.layers))


def relation_gradient(local_grad: SharedStack, global_stack: SharedStack) -> np.ndarray:
    """Get the gradient w.r.t. omega of a loss that sees omega only through ``to_local``.

    ``local_grad`` is the loss gradient w.r.t. the projected stack.
    """
    if local_grad.rank != global_stack.rank:
        raise H2TuneShapeError(
            f"Rank {local_grad.rank} of the gradient does not match rank {global_stack.rank}"
        )

    return np.einsum("lij,mij->lm", local_grad.layers, global_stack.layers)


def init_relation(local_depth: int, global_depth: int) -> RelationMatrix:
    """Map every client layer to one evenly spaced global slot."""
    if local_depth < 1 or local_depth > global_depth:
        raise H2TuneConfigError(
            f"Client depth {local_depth} must be in [1, {global_depth}]"
        )

    omega = np.zeros((local_depth, global_depth))
    span = max(local_depth - 1, 1)
    for l in range(local_depth):
        m = int(math.floor(l * (global_depth - 1) / span + 0.5))
        omega[l, m] = 1.0

    _LOGGER.debug(
        "Initial relation %d -> %d selects global slots %s",
        local_depth,
        global_depth,
        np.argmax(omega, axis=1).tolist(),
    )
    return RelationMatrix(omega)


def generalized_gradient(before: SharedStack, after: SharedStack, eta_share: float) -> float:
    """Get the norm of ``(before - after) / eta_share``, the displacement per unit step."""
    if before.layers.shape != after.layers.shape:
        raise H2TuneShapeError(
            f"Stacks of shapes {before.layers.shape} and {after.layers.shape} cannot be compared"
        )
    if eta_share <= 0:
        raise H2TuneConfigError(f"Shared learning rate {eta_share!r} must be positive")

    return float(np.linalg.norm((before.layers - after.layers).ravel())) / eta_share
