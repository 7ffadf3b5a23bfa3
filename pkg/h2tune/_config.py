#!/usr/bin/env python3

import json
import logging
import os.path
import pathlib
from typing import Any
from typing import Dict
from typing import List

import attr
import numpy as np
import tomli

from ._exceptions import H2TuneConfigError
from ._model import ArchSpec
from ._objectives import Hyperparameters
from ._taskgen import SyntheticTaskSpec
from ._trilora import ResourceDescriptor
from .utils import git_blob_hash

_LOGGER = logging.getLogger(__name__)

TRANSPORTS = ("inproc", "files")


def derive_seed(*entropy: int) -> int:
    """Derive a 32-bit seed from integers."""
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


def _build(cls: Any, content: Dict[str, Any], where: str) -> Any:
    try:
        return cls(**content)
    except TypeError as exc:
        raise H2TuneConfigError(f"Invalid {where} configuration {content!r}: {exc}") from exc


@attr.s(slots=True)
class ClientConfig:
    """Configuration of a single client."""

    arch = attr.ib(type=ArchSpec, kw_only=True)
    task = attr.ib(type=SyntheticTaskSpec, kw_only=True)
    resource = attr.ib(type=ResourceDescriptor, kw_only=True)
    hyper = attr.ib(type=Hyperparameters, kw_only=True)

    @classmethod
    def from_dict(cls, content: Dict[str, Any], defaults: Dict[str, Any], idx: int) -> "ClientConfig":
        """Create a client configuration from its document entry."""
        unknown = set(content) - {"arch", "task", "resource", "hyper"}
        if unknown:
            raise H2TuneConfigError(f"Unknown keys {sorted(unknown)} in client {idx}")

        arch_content = dict(content.get("arch", {}))
        arch_content["layer_dims"] = [tuple(d) for d in arch_content.get("layer_dims", [])]
        return cls(
            arch=_build(ArchSpec, arch_content, f"client {idx} arch"),
            task=_build(SyntheticTaskSpec, content.get("task", {}), f"client {idx} task"),
            resource=_build(ResourceDescriptor, content.get("resource", {}), f"client {idx} resource"),
            hyper=_build(
                Hyperparameters, {**defaults, **content.get("hyper", {})}, f"client {idx} hyper"
            ),
        )


@attr.s(slots=True)
class FederationConfig:
    """A federation of heterogeneous clients and its round schedule."""

    BUNDLED_SCENARIO_PATH = str(pathlib.Path(__file__).parent.resolve() / "data" / "scenario.json")
    DEFAULT_CONFIG_PATH = "h2tune.json"

    clients = attr.ib(type=List[ClientConfig], kw_only=True)
    rank = attr.ib(type=int, default=4, kw_only=True)
    rounds = attr.ib(type=int, default=20, kw_only=True)
    epochs = attr.ib(type=int, default=2, kw_only=True)
    seed = attr.ib(type=int, default=0, kw_only=True)
    transport = attr.ib(type=str, default="inproc", kw_only=True)
    exchange_dir = attr.ib(type=str, default="", kw_only=True)
    workers = attr.ib(type=int, default=1, kw_only=True)
    strict = attr.ib(type=bool, default=True, kw_only=True)
    communicate = attr.ib(type=bool, default=True, kw_only=True)
    schedule = attr.ib(type=str, default="alternating", kw_only=True)

    @property
    def global_depth(self) -> int:
        """Depth of the global shared stack, the deepest client model."""
        return max(c.arch.depth for c in self.clients)

    def validate(self) -> None:
        """Check the federation-wide invariants."""
        if not self.clients:
            raise H2TuneConfigError("A federation needs at least one client")
        if self.rounds < 0:
            raise H2TuneConfigError(f"Number of rounds {self.rounds!r} must not be negative")
        if self.epochs < 1:
            raise H2TuneConfigError(f"Number of local epochs {self.epochs!r} must be >= 1")
        if self.transport not in TRANSPORTS:
            raise H2TuneConfigError(
                f"Unknown transport {self.transport!r}, expected one of {TRANSPORTS}"
            )
        if self.workers < 1:
            raise H2TuneConfigError(f"Number of workers {self.workers!r} must be >= 1")

        smallest = min(min(min(a, b) for a, b in c.arch.layer_dims) for c in self.clients)
        if not 0 < self.rank <= smallest:
            raise H2TuneConfigError(
                f"Global rank {self.rank} must be in (0, {smallest}], the smallest layer dimension"
            )
        for idx, client in enumerate(self.clients):
            if client.arch.input_dim != client.task.input_dim:
                raise H2TuneConfigError(
                    f"Client {idx} model expects {client.arch.input_dim} inputs "
                    f"but its task has {client.task.input_dim}"
                )
            if client.arch.num_classes != client.task.num_classes:
                raise H2TuneConfigError(
                    f"Client {idx} model outputs {client.arch.num_classes} logits "
                    f"but its task has {client.task.num_classes} classes"
                )

    def with_overrides(self, **changes: Any) -> "FederationConfig":
        """Get a copy with top-level options replaced and schedule lengths propagated to clients."""
        config = attr.evolve(self, **changes)
        config.clients = [
            attr.evolve(c, hyper=attr.evolve(c.hyper, rounds=config.rounds, epochs=config.epochs))
            for c in config.clients
        ]
        config.validate()
        return config

    @classmethod
    def from_dict(cls, content: Dict[str, Any]) -> "FederationConfig":
        """Create a federation configuration from a parsed document."""
        content = dict(content)
        defaults = content.pop("hyper", {})
        clients = [
            ClientConfig.from_dict(c, defaults, idx) for idx, c in enumerate(content.pop("clients", []))
        ]
        unknown = set(content) - {
            "rank", "rounds", "epochs", "seed", "transport", "exchange_dir", "workers", "strict",
        }
        if unknown:
            raise H2TuneConfigError(f"Unknown top-level configuration keys {sorted(unknown)}")

        config = cls(clients=clients, **content)
        # Task seeds are relative to the master seed.
        config.clients = [
            attr.evolve(
                c,
                task=attr.evolve(
                    c.task,
                    shared_seed=derive_seed(config.seed, c.task.shared_seed),
                    private_seed=derive_seed(config.seed, c.task.private_seed),
                ),
            )
            for c in config.clients
        ]
        return config.with_overrides()

    @staticmethod
    def read_document(config_path: str) -> bytes:
        """Read raw bytes of a configuration file."""
        if not os.path.isfile(config_path):
            raise H2TuneConfigError(f"Configuration file {config_path!r} not found")

        with open(config_path, "rb") as f:
            return f.read()

    @classmethod
    def parse(cls, raw: bytes, config_path: str) -> Dict[str, Any]:
        """Parse a JSON or, based on the suffix, TOML configuration document."""
        try:
            if config_path.endswith(".toml"):
                return tomli.loads(raw.decode())
            return json.loads(raw)
        except (ValueError, UnicodeDecodeError) as exc:
            raise H2TuneConfigError(f"Failed to parse configuration file {config_path!r}: {exc}") from exc

    @classmethod
    def load(cls, config_path: str, **overrides: Any) -> "FederationConfig":
        """Load a configuration file from the given location.

        Top-level options given as keyword arguments replace the ones in the file
        before any seed is derived.
        """
        _LOGGER.debug("Loading configuration file from %r", config_path)
        content = cls.parse(cls.read_document(config_path), config_path)
        _LOGGER.debug("Config file content: %r", content)
        if not isinstance(content, dict):
            raise H2TuneConfigError(f"Configuration file {config_path!r} is not a mapping")

        for key, value in overrides.items():
            if value is not None:
                _LOGGER.debug("Overriding configuration %s=%s", key, value)
                content[key] = value
        return cls.from_dict(content)

    @classmethod
    def content_hash(cls, config_path: str) -> str:
        """Get the git-style content hash of a configuration file."""
        return git_blob_hash(cls.read_document(config_path))

    @classmethod
    def create(cls, config_path: str) -> "FederationConfig":
        """Write the bundled scenario to the given path and load it."""
        _LOGGER.warning("Creating initial configuration file in %r", config_path)
        if os.path.isfile(config_path):
            raise H2TuneConfigError(f"Configuration file {config_path!r} already exists")

        directory = os.path.dirname(config_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(cls.BUNDLED_SCENARIO_PATH, "rb") as f:
            content = f.read()

        _LOGGER.info("Writing initial configuration file to %r", config_path)
        with open(config_path, "wb") as f:
            f.write(content)

        return cls.load(config_path)
