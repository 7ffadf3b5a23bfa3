#!/usr/bin/env python3

import logging
import math
from typing import Iterator
from typing import List
from typing import Tuple

import attr
import numpy as np

from ._exceptions import H2TuneConfigError
from ._model import ArchSpec
from ._model import ClientModel
from ._trilora import init_trilora

_LOGGER = logging.getLogger(__name__)

LABEL_NOISE = 0.05


@attr.s(slots=True)
class SyntheticTaskSpec:
    """A linear-teacher classification task with a controllable shared component."""

    input_dim = attr.ib(type=int, kw_only=True)
    num_classes = attr.ib(type=int, kw_only=True)
    n_train = attr.ib(type=int, default=200, kw_only=True)
    n_test = attr.ib(type=int, default=200, kw_only=True)
    shared_seed = attr.ib(type=int, default=0, kw_only=True)
    private_seed = attr.ib(type=int, default=1, kw_only=True)
    shared_weight = attr.ib(type=float, default=0.5, kw_only=True)

    def __attrs_post_init__(self) -> None:
        if self.input_dim < 1:
            raise H2TuneConfigError(f"Input dimension {self.input_dim!r} must be positive")
        if self.num_classes < 2:
            raise H2TuneConfigError(f"At least two classes are needed, got {self.num_classes!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise H2TuneConfigError(
                f"Train and test sizes must be positive, got {self.n_train!r} and {self.n_test!r}"
            )
        if not 0.0 <= self.shared_weight <= 1.0:
            raise H2TuneConfigError(f"Shared weight {self.shared_weight!r} is not in [0, 1]")


@attr.s(slots=True)
class Dataset:
    """Disjoint train and test splits of a synthetic task."""

    x_train = attr.ib(type=np.ndarray, kw_only=True)
    y_train = attr.ib(type=np.ndarray, kw_only=True)
    x_test = attr.ib(type=np.ndarray, kw_only=True)
    y_test = attr.ib(type=np.ndarray, kw_only=True)
    labeling = attr.ib(type=np.ndarray, kw_only=True)

    def label(self, x: np.ndarray) -> np.ndarray:
        """Label inputs with the noise-free labeling function."""
        return np.argmax(np.atleast_2d(x) @ self.labeling.T, axis=1)

    def batches(self, batch_size: int, order: np.ndarray) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Iterate over training batches following the given sample order."""
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield self.x_train[idx], self.y_train[idx]

    def rows(self) -> Iterator[List[object]]:
        """Iterate over ``split, label, features...`` rows for a CSV dump."""
        for split, xs, ys in (("train", self.x_train, self.y_train), ("test", self.x_test, self.y_test)):
            for x, y in zip(xs, ys):
                yield [split, int(y), *(repr(float(v)) for v in x)]


def build_toy_model(spec: ArchSpec, r_g: int, beta: float, seed: int) -> ClientModel:
    """Build a model whose layers carry a random frozen base and a fresh adapter."""
    smallest = min(min(a, b) for a, b in spec.layer_dims)
    if not 0 < r_g <= smallest:
        raise H2TuneConfigError(
            f"Rank {r_g} exceeds the smallest layer dimension {smallest} of {spec.layer_dims}"
        )

    rng = np.random.default_rng(seed)
    layers = []
    for a, b in spec.layer_dims:
        base = rng.standard_normal((a, b)) / math.sqrt(a)
        layer_seed = int(rng.integers(2**32))
        layers.append(init_trilora(a, b, r_g, beta, layer_seed, base_weight=base))

    _LOGGER.debug(
        "Built a %d-layer model %s with rank %d and sparsity ratio %r",
        spec.depth,
        spec.layer_dims,
        r_g,
        beta,
    )
    return ClientModel(layers=layers, activation=spec.activation)


def _labeling_matrix(spec: SyntheticTaskSpec) -> Tuple[np.ndarray, np.random.Generator]:
    shape = (spec.num_classes, spec.input_dim)
    shared = np.random.default_rng(spec.shared_seed).standard_normal(shape)
    rng = np.random.default_rng(spec.private_seed)
    private = rng.standard_normal(shape)

    return spec.shared_weight * shared + (1.0 - spec.shared_weight) * private, rng


def gen_task(spec: SyntheticTaskSpec) -> Dataset:
    """Generate a task labeled by argmax of a shared/private mixture of linear maps."""
    labeling, rng = _labeling_matrix(spec)

    n = spec.n_train + spec.n_test
    x = rng.standard_normal((n, spec.input_dim))
    y = np.argmax(x @ labeling.T, axis=1)

    flipped = rng.choice(n, size=int(math.floor(LABEL_NOISE * n + 0.5)), replace=False)
    y[flipped] = (y[flipped] + rng.integers(1, spec.num_classes, size=len(flipped))) % spec.num_classes

    _LOGGER.debug(
        "Generated task with %d train and %d test samples, class counts %s",
        spec.n_train,
        spec.n_test,
        np.bincount(y, minlength=spec.num_classes).tolist(),
    )
    return Dataset(
        x_train=x[: spec.n_train],
        y_train=y[: spec.n_train],
        x_test=x[spec.n_train :],
        y_test=y[spec.n_train :],
        labeling=labeling,
    )
