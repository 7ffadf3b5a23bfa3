#!/usr/bin/env python3

import os
from typing import List
from typing import Optional
from typing import Tuple

import attr
import numpy as np

from h2tune import ArchSpec
from h2tune import ClientState
from h2tune import Hyperparameters
from h2tune import RelationMatrix
from h2tune import ResourceDescriptor
from h2tune import SharedStack
from h2tune import SyntheticTaskSpec
from h2tune import build_toy_model
from h2tune import gen_task
from h2tune import init_relation


class BaseTestcase:
    """A base class for implementing tests."""

    _DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

    SMALL_SCENARIO_PATH = os.path.join(_DATA_DIR, "scenario_small.json")

    @staticmethod
    def random_stack(rng: np.random.Generator, depth: int, rank: int, scale: float = 1.0) -> SharedStack:
        """Draw a stack with standard normal entries."""
        return SharedStack(scale * rng.standard_normal((depth, rank, rank)))

    @staticmethod
    def make_state(
        seed: int,
        layer_dims: List[Tuple[int, int]],
        *,
        rank: int = 2,
        beta: float = 0.5,
        global_depth: Optional[int] = None,
        activation: str = "tanh",
        hyper: Optional[Hyperparameters] = None,
        randomize: bool = True,
        n_train: int = 24,
    ) -> ClientState:
        """Build a small client, optionally moving its adapters away from the zero update."""
        rng = np.random.default_rng(seed)
        global_depth = global_depth or len(layer_dims)
        model = build_toy_model(ArchSpec(layer_dims=layer_dims, activation=activation), rank, beta, seed)

        if randomize:
            for layer in model.layers:
                layer.B = 0.5 * rng.standard_normal(layer.B.shape)
                layer.R[layer.mask] = 0.3 * rng.standard_normal(int(layer.mask.sum()))
            relation = RelationMatrix(rng.standard_normal((len(layer_dims), global_depth)))
        else:
            relation = init_relation(len(layer_dims), global_depth)

        task = SyntheticTaskSpec(
            input_dim=layer_dims[0][0],
            num_classes=layer_dims[-1][1],
            n_train=n_train,
            n_test=16,
            shared_seed=seed,
            private_seed=seed + 1,
        )
        return ClientState(
            client_id=0,
            model=model,
            relation=relation,
            resource=ResourceDescriptor(beta, declared_rank=rank),
            hyper=hyper or Hyperparameters(),
            dataset=gen_task(task),
            seed=seed,
        )

    @staticmethod
    def batch(state: ClientState, size: int = 8) -> Tuple[np.ndarray, np.ndarray]:
        """Get the first training samples of a client."""
        return state.dataset.x_train[:size], state.dataset.y_train[:size]

    @staticmethod
    def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
        """Get the Frobenius relative error of two arrays."""
        scale = max(float(np.linalg.norm(expected)), 1e-300)
        return float(np.linalg.norm(np.asarray(actual) - np.asarray(expected))) / scale


@attr.s(slots=True)
class RunInfo:
    """An object used in tests to encapsulate return values from fixtures."""

    config_path = attr.ib(type=str, kw_only=True)
    out_dir = attr.ib(type=str, kw_only=True)
