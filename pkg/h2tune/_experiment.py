#!/usr/bin/env python3

import csv
import datetime
import json
import logging
import os
import time
from typing import Any
from typing import Dict
from typing import List
from typing import Sequence

import attr
import numpy as np
from dateutil.parser import parse as parse_datetime

from ._alignment import SharedStack
from ._client import check_gradients
from ._config import FederationConfig
from ._config import derive_seed
from ._exceptions import H2TuneConfigError
from ._exceptions import H2TuneInvariantViolation
from ._federation import Federation
from ._federation import RoundRecord
from ._federation import convergence_ratio
from ._wire import write_stack

_LOGGER = logging.getLogger(__name__)

ARMS = ("H2TUNE", "LOCAL", "NO_DISENTANGLE", "NO_MASK")
METRICS_HEADER = ["t", "k", "share_loss", "specific_loss", "eval_acc", "gg_norm"]
GRADIENT_TOLERANCE = 1e-5
_ARM_SUMMARY_KEYS = ("config_hash", "final_accuracy")


def apply_arm(config: FederationConfig, arm: str) -> FederationConfig:
    """Adjust a federation configuration to one of the ablation arms."""
    if arm == "H2TUNE":
        return config
    if arm == "LOCAL":
        clients = [attr.evolve(c, hyper=attr.evolve(c.hyper, kl_weight=0.0)) for c in config.clients]
        return attr.evolve(config, clients=clients, communicate=False)
    if arm == "NO_DISENTANGLE":
        return attr.evolve(config, schedule="joint")
    if arm == "NO_MASK":
        clients = [
            attr.evolve(c, resource=attr.evolve(c.resource, sparsity_ratio=1.0))
            for c in config.clients
        ]
        return attr.evolve(config, clients=clients)

    raise H2TuneConfigError(f"Unknown baseline {arm!r}, expected one of {ARMS}")


@attr.s(slots=True)
class ExperimentManifest:
    """What an experiment run is made of and where it writes."""

    config_path = attr.ib(type=str, kw_only=True)
    config_hash = attr.ib(type=str, kw_only=True)
    seed = attr.ib(type=int, kw_only=True)
    arms = attr.ib(type=List[str], kw_only=True)
    output_dir = attr.ib(type=str, kw_only=True)

    @classmethod
    def default_output_dir(cls, config_hash: str, seed: int) -> str:
        """Get a fresh output directory name for a run."""
        stamp = datetime.datetime.now(tz=datetime.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        return os.path.join("runs", f"{config_hash[:12]}-s{seed}-{stamp}")


def _write_metrics(path: str, history: Sequence[RoundRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for record in history:
            for client in record.clients:
                writer.writerow(
                    [
                        record.round_index,
                        client.client_id,
                        repr(client.share_loss),
                        repr(client.specific_loss),
                        repr(client.eval_accuracy),
                        repr(client.gg_norm),
                    ]
                )


def _write_json(path: str, content: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(content, f, sort_keys=True, indent=2)
        f.write("\n")


@attr.s(slots=True)
class Experiment:
    """Federations of one configuration run under several arms."""

    manifest = attr.ib(type=ExperimentManifest, kw_only=True)
    config = attr.ib(type=FederationConfig, kw_only=True)
    check_grads = attr.ib(type=bool, default=False, kw_only=True)

    def _check_gradients(self, federation: Federation) -> None:
        for state in federation.clients:
            rng = np.random.default_rng(derive_seed(self.config.seed, state.client_id, 2))
            R_ref = SharedStack(
                rng.standard_normal((state.relation.global_depth, state.model.rank, state.model.rank))
            )
            batch = (
                state.dataset.x_train[: state.hyper.batch_size],
                state.dataset.y_train[: state.hyper.batch_size],
            )
            error = check_gradients(state, batch, R_ref=R_ref)
            _LOGGER.info("Gradient check of client %d: worst relative error %.3g", state.client_id, error)
            if error > GRADIENT_TOLERANCE:
                raise H2TuneInvariantViolation(
                    f"Gradient check of client {state.client_id} failed with relative error {error:.3g}"
                )

    def run_arm(self, arm: str) -> Dict[str, Any]:
        """Run one arm and write its metrics, summary and checkpoint."""
        arm_dir = os.path.join(self.manifest.output_dir, arm)
        os.makedirs(os.path.join(arm_dir, "checkpoints"), exist_ok=True)

        config = apply_arm(self.config, arm)
        if config.transport == "files":
            config = attr.evolve(config, exchange_dir=os.path.join(arm_dir, "exchange"))

        start = time.monotonic()
        federation = Federation.create(config)
        if self.check_grads:
            self._check_gradients(federation)

        initial = federation.evaluate()
        _LOGGER.info("Running arm %s for %d rounds", arm, config.rounds)
        history = federation.run()
        final = [c.eval_accuracy for c in history[-1].clients] if history else initial

        _write_metrics(os.path.join(arm_dir, "metrics.csv"), history)
        write_stack(os.path.join(arm_dir, "checkpoints", "global_R.r2g"), federation.global_stack)

        summary = {
            "arm": arm,
            "config_hash": self.manifest.config_hash,
            "seed": self.config.seed,
            "rounds": config.rounds,
            "initial_accuracy": initial,
            "final_accuracy": final,
            "mean_final_accuracy": float(np.mean(final)),
            "convergence_ratio": convergence_ratio(history),
            "runtime_seconds": time.monotonic() - start,
        }
        _write_json(os.path.join(arm_dir, "summary.json"), summary)
        _LOGGER.info("Arm %s finished with mean accuracy %.4f", arm, summary["mean_final_accuracy"])
        return summary

    def run(self) -> Dict[str, Any]:
        """Run all arms and write the experiment summary."""
        if os.path.isdir(self.manifest.output_dir) and os.listdir(self.manifest.output_dir):
            raise H2TuneConfigError(
                f"Output directory {self.manifest.output_dir!r} already exists and is not empty"
            )
        os.makedirs(self.manifest.output_dir, exist_ok=True)
        if self.config.rounds == 0:
            _LOGGER.warning("No rounds requested, only the untrained models are evaluated")

        started_at = datetime.datetime.now(tz=datetime.timezone.utc).isoformat()
        start = time.monotonic()
        arms = {arm: self.run_arm(arm) for arm in self.manifest.arms}

        summary = {
            "config_path": self.manifest.config_path,
            "config_hash": self.manifest.config_hash,
            "seed": self.manifest.seed,
            "rounds": self.config.rounds,
            "started_at": started_at,
            "runtime_seconds": time.monotonic() - start,
            "arms": {
                arm: {
                    "final_accuracy": s["final_accuracy"],
                    "mean_final_accuracy": s["mean_final_accuracy"],
                    "convergence_ratio": s["convergence_ratio"],
                }
                for arm, s in arms.items()
            },
        }
        _write_json(os.path.join(self.manifest.output_dir, "summary.json"), summary)
        return summary


def _load_summary(directory: str) -> Dict[str, Any]:
    path = os.path.join(directory, "summary.json")
    if not os.path.isfile(path):
        raise H2TuneConfigError(f"No arm summary found in {directory!r}")
    with open(path) as f:
        summary = json.load(f)

    missing = [key for key in _ARM_SUMMARY_KEYS if key not in summary]
    if missing:
        if "arms" in summary:
            raise H2TuneConfigError(
                f"Directory {directory!r} holds a run summary of arms {sorted(summary['arms'])}, "
                f"compare the arm directories inside it instead"
            )
        raise H2TuneConfigError(f"Arm summary in {directory!r} is missing keys: {', '.join(missing)}")

    return summary


def compare_arms(directories: Sequence[str]) -> List[List[Any]]:
    """Compare final accuracies of arm directories against the first one.

    Returns rows with a header, one row per client and a final row of means.
    """
    if len(directories) < 2:
        raise H2TuneConfigError("At least two metric directories are needed for a comparison")

    summaries = [_load_summary(d) for d in directories]
    hashes = {s["config_hash"] for s in summaries}
    if len(hashes) != 1:
        raise H2TuneConfigError(f"Refusing to compare runs of different scenarios: {sorted(hashes)}")

    accuracies = [s["final_accuracy"] for s in summaries]
    if len({len(a) for a in accuracies}) != 1:
        raise H2TuneConfigError("Compared runs have different numbers of clients")

    names = [s.get("arm", os.path.basename(os.path.normpath(d))) for s, d in zip(summaries, directories)]
    header = ["client"] + [f"acc_{n}" for n in names] + [f"delta_{n}" for n in names[1:]]
    rows: List[List[Any]] = [header]
    for k in range(len(accuracies[0])):
        accs = [a[k] for a in accuracies]
        rows.append([k] + accs + [acc - accs[0] for acc in accs[1:]])

    means = [float(np.mean(a)) for a in accuracies]
    rows.append(["mean"] + means + [m - means[0] for m in means[1:]])
    return rows


def list_runs(root: str) -> List[Dict[str, Any]]:
    """List experiment runs stored under a directory, newest first."""
    if not os.path.isdir(root):
        _LOGGER.warning("No runs directory %r found", root)
        return []

    result = []
    for entry in os.listdir(root):
        path = os.path.join(root, entry, "summary.json")
        if not os.path.isfile(path):
            continue

        with open(path) as f:
            summary = json.load(f)
        if "started_at" not in summary:
            continue
        result.append(
            {
                "id": entry,
                "started_at": summary["started_at"],
                "config_hash": summary["config_hash"],
                "arms": sorted(summary.get("arms", {})),
            }
        )

    result.sort(key=lambda x: parse_datetime(x["started_at"]), reverse=True)
    return result
