#!/usr/bin/env python3

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import attr
import numpy as np

from ._alignment import SharedStack
from ._alignment import init_relation
from ._client import ClientRecord
from ._client import ClientState
from ._client import evaluate
from ._client import local_round
from ._config import FederationConfig
from ._config import derive_seed
from ._exceptions import H2TuneInvariantViolation
from ._exceptions import H2TuneNumericDivergence
from ._exceptions import H2TuneProtocolError
from ._taskgen import build_toy_model
from ._taskgen import gen_task
from ._wire import read_stack
from ._wire import write_stack

_LOGGER = logging.getLogger(__name__)


@attr.s(slots=True)
class RoundRecord:
    """Metrics of one federation round."""

    round_index = attr.ib(type=int, kw_only=True)
    clients = attr.ib(type=List[ClientRecord], kw_only=True)
    gg_sq = attr.ib(type=float, kw_only=True)
    wall_time = attr.ib(type=float, default=0.0, kw_only=True)


def aggregate(uploads: Sequence[SharedStack]) -> SharedStack:
    """Average the uploads entrywise, summing in client-id order."""
    if not uploads:
        raise H2TuneProtocolError("No uploads to aggregate", client_id=-1)

    shape = uploads[0].layers.shape
    total = np.zeros(shape)
    for client_id, upload in enumerate(uploads):
        if upload.layers.shape != shape:
            raise H2TuneProtocolError(
                f"Upload of client {client_id} has shape {upload.layers.shape}, expected {shape}",
                client_id=client_id,
            )
        total += upload.layers

    return SharedStack(total / len(uploads))


def convergence_ratio(history: Sequence[RoundRecord]) -> Optional[float]:
    """Get the last-quarter over first-quarter ratio of mean squared generalized-gradient norms."""
    if not history:
        return None

    quarter = max(len(history) // 4, 1)
    first = float(np.mean([r.gg_sq for r in history[:quarter]]))
    last = float(np.mean([r.gg_sq for r in history[-quarter:]]))
    return last / first if first > 0.0 else None


class InProcessTransport:
    """Hand stacks between the server and the clients in memory."""

    def __init__(self) -> None:
        self._uploads: Dict[Tuple[int, int], SharedStack] = {}

    def broadcast(self, round_index: int, stack: SharedStack) -> SharedStack:
        """Deliver the global stack to the clients."""
        return stack.copy()

    def upload(self, round_index: int, client_id: int, stack: SharedStack) -> None:
        """Deliver a client upload to the server."""
        self._uploads[(round_index, client_id)] = stack.copy()

    def collect(self, round_index: int, num_clients: int) -> List[SharedStack]:
        """Get all the uploads of a round in client-id order."""
        return [self._uploads.pop((round_index, k)) for k in range(num_clients)]


class FileExchangeTransport:
    """Exchange serialized stacks through per-round directories."""

    def __init__(self, directory: str) -> None:
        self.directory = directory

    def _round_dir(self, round_index: int) -> str:
        return os.path.join(self.directory, f"round_{round_index}")

    def broadcast(self, round_index: int, stack: SharedStack) -> SharedStack:
        """Write the global stack and read it back as the clients would."""
        path = os.path.join(self._round_dir(round_index), "global.r2g")
        write_stack(path, stack)
        return read_stack(path)

    def upload(self, round_index: int, client_id: int, stack: SharedStack) -> None:
        """Write a client upload."""
        write_stack(os.path.join(self._round_dir(round_index), f"client_{client_id}.r2g"), stack)

    def collect(self, round_index: int, num_clients: int) -> List[SharedStack]:
        """Read all the uploads of a round in client-id order."""
        return [
            read_stack(os.path.join(self._round_dir(round_index), f"client_{k}.r2g"))
            for k in range(num_clients)
        ]


def _frozen_bytes(state: ClientState) -> bytes:
    return b"".join(
        layer.mask.tobytes() + layer.R[~layer.mask].tobytes() for layer in state.model.layers
    )


@attr.s(slots=True)
class Federation:
    """A server and its clients running synchronous rounds."""

    config = attr.ib(type=FederationConfig, kw_only=True)
    clients = attr.ib(type=List[ClientState], kw_only=True)
    global_stack = attr.ib(type=SharedStack, kw_only=True)
    transport = attr.ib(kw_only=True)
    history = attr.ib(type=List[RoundRecord], factory=list, kw_only=True)
    _frozen = attr.ib(type=List[bytes], factory=list, kw_only=True)

    @classmethod
    def create(cls, config: FederationConfig) -> "Federation":
        """Initialize all clients and a zero global stack."""
        config.validate()
        global_depth = config.global_depth

        clients = []
        for k, client in enumerate(config.clients):
            model = build_toy_model(
                client.arch,
                config.rank,
                client.resource.sparsity_ratio,
                derive_seed(config.seed, k, 0),
            )
            clients.append(
                ClientState(
                    client_id=k,
                    model=model,
                    relation=init_relation(client.arch.depth, global_depth),
                    resource=client.resource,
                    hyper=client.hyper,
                    dataset=gen_task(client.task),
                    seed=derive_seed(config.seed, k, 1),
                    schedule=config.schedule,
                    strict=config.strict,
                )
            )

        if config.transport == "files":
            transport = FileExchangeTransport(config.exchange_dir or "exchange")
        else:
            transport = InProcessTransport()

        _LOGGER.info(
            "Initialized federation of %d clients with depths %s, global depth %d and rank %d",
            len(clients),
            [c.model.depth for c in clients],
            global_depth,
            config.rank,
        )
        return cls(
            config=config,
            clients=clients,
            global_stack=SharedStack.zeros(global_depth, config.rank),
            transport=transport,
            frozen=[_frozen_bytes(c) for c in clients],
        )

    def evaluate(self) -> List[float]:
        """Get test accuracies of all clients."""
        return [evaluate(c) for c in self.clients]

    def _check_mask_permanence(self) -> None:
        for state, frozen in zip(self.clients, self._frozen):
            if _frozen_bytes(state) != frozen:
                raise H2TuneInvariantViolation(
                    f"Masked task-shared entries of client {state.client_id} changed"
                )

    def _train_client(
        self, state: ClientState, received: SharedStack, round_index: int
    ) -> ClientRecord:
        try:
            _, upload, record = local_round(
                state, received, self.config.epochs, round_index=round_index
            )
        except H2TuneNumericDivergence as exc:
            exc.round_index = round_index
            raise

        self.transport.upload(round_index, state.client_id, upload)
        return record

    def run_round(self, round_index: int) -> RoundRecord:
        """Broadcast, train all clients, aggregate and record metrics."""
        start = time.monotonic()
        received = self.transport.broadcast(round_index, self.global_stack)

        def train(state: ClientState) -> ClientRecord:
            return self._train_client(state, received, round_index)

        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                records = list(pool.map(train, self.clients))
        else:
            records = [train(state) for state in self.clients]

        uploads = self.transport.collect(round_index, len(self.clients))
        if self.config.communicate:
            self.global_stack = aggregate(uploads)

        if self.config.strict:
            self._check_mask_permanence()

        record = RoundRecord(
            round_index=round_index,
            clients=records,
            gg_sq=float(np.mean([r.gg_sq for r in records])),
            wall_time=time.monotonic() - start,
        )
        _LOGGER.info(
            "Round %d/%d: accuracies %s, generalized-gradient %.4g",
            round_index,
            self.config.rounds,
            ["%.3f" % r.eval_accuracy for r in records],
            record.gg_sq,
        )
        self.history.append(record)
        return record

    def run(self) -> List[RoundRecord]:
        """Run all the configured rounds."""
        for round_index in range(len(self.history) + 1, self.config.rounds + 1):
            self.run_round(round_index)
        return self.history


def run_federation(config: FederationConfig) -> List[RoundRecord]:
    """Run a federation from scratch and return its round history."""
    return Federation.create(config).run()
