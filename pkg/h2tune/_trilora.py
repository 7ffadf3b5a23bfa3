#!/usr/bin/env python3

import logging
import math
from typing import Optional

import attr
import numpy as np

from ._exceptions import H2TuneConfigError
from ._exceptions import H2TuneInputError

_LOGGER = logging.getLogger(__name__)


def mask_budget(sparsity_ratio: float, rank: int) -> int:
    """Get the number of ones a mask of the given rank carries."""
    return int(math.floor(sparsity_ratio * rank * rank + 0.5))


@attr.s(slots=True)
class ResourceDescriptor:
    """Resources a client can spend on fine-tuning."""

    sparsity_ratio = attr.ib(type=float, default=1.0)
    declared_rank = attr.ib(type=int, default=1, kw_only=True)

    def __attrs_post_init__(self) -> None:
        if not 0.0 <= self.sparsity_ratio <= 1.0:
            raise H2TuneConfigError(
                f"Sparsity ratio {self.sparsity_ratio!r} is not in [0, 1]"
            )
        if self.declared_rank < 1:
            raise H2TuneConfigError(
                f"Declared rank {self.declared_rank!r} must be a positive integer"
            )


@attr.s(slots=True)
class TriLoraLayer:
    """A frozen base weight with a sparsified triple low-rank adapter.

    The adapter update is ``A @ (I + mask * R) @ B``, inputs are row vectors.
    """

    base_weight = attr.ib(type=np.ndarray, kw_only=True)
    A = attr.ib(type=np.ndarray, kw_only=True)
    B = attr.ib(type=np.ndarray, kw_only=True)
    R = attr.ib(type=np.ndarray, kw_only=True)
    mask = attr.ib(type=np.ndarray, kw_only=True)

    @property
    def in_dim(self) -> int:
        """Input dimension of the layer."""
        return self.base_weight.shape[0]

    @property
    def out_dim(self) -> int:
        """Output dimension of the layer."""
        return self.base_weight.shape[1]

    @property
    def rank(self) -> int:
        """Rank shared with the rest of the federation."""
        return self.R.shape[0]

    def middle(self) -> np.ndarray:
        """Get the residual middle factor ``I + mask * R``."""
        return np.eye(self.rank) + np.where(self.mask, self.R, 0.0)


def init_trilora(
    a: int,
    b: int,
    r_g: int,
    beta: float,
    seed: int,
    *,
    base_weight: Optional[np.ndarray] = None,
) -> TriLoraLayer:
    """Initialize a layer whose adapter starts as the zero update."""
    if not 0 < r_g <= min(a, b):
        raise H2TuneConfigError(
            f"Rank {r_g} does not satisfy 0 < rank <= min({a}, {b})"
        )
    if not 0.0 <= beta <= 1.0:
        raise H2TuneConfigError(f"Sparsity ratio {beta!r} is not in [0, 1]")

    if base_weight is None:
        base_weight = np.zeros((a, b))
    elif base_weight.shape != (a, b):
        raise H2TuneConfigError(
            f"Base weight of shape {base_weight.shape} does not match ({a}, {b})"
        )

    rng = np.random.default_rng(seed)
    A = rng.standard_normal((a, r_g)) / math.sqrt(r_g)

    ones = mask_budget(beta, r_g)
    if ones == 0:
        _LOGGER.debug("Sparsity ratio %r leaves no trainable shared entries", beta)
    mask = np.zeros(r_g * r_g, dtype=bool)
    mask[rng.choice(r_g * r_g, size=ones, replace=False)] = True

    return TriLoraLayer(
        base_weight=np.array(base_weight, dtype=np.float64),
        A=A,
        B=np.zeros((r_g, b)),
        R=np.zeros((r_g, r_g)),
        mask=mask.reshape(r_g, r_g),
    )


def delta_matrix(layer: TriLoraLayer) -> np.ndarray:
    """Materialize the adapter update of the layer."""
    return layer.A @ layer.middle() @ layer.B


def apply_delta(layer: TriLoraLayer, x: np.ndarray) -> np.ndarray:
    """Apply the adapted layer to a row vector (or a batch of them) without materializing the update."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise H2TuneInputError("Layer input contains non-finite values")

    return x @ layer.base_weight + ((x @ layer.A) @ layer.middle()) @ layer.B
