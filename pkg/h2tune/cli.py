#!/usr/bin/env python3

import csv
import json
import logging
import sys
from typing import Optional
from typing import Tuple

import click
import daiquiri
from rich.console import Console
from rich.table import Table

from h2tune import ARMS
from h2tune import Experiment
from h2tune import ExperimentManifest
from h2tune import FederationConfig
from h2tune import H2TuneConfigError
from h2tune import H2TuneException
from h2tune import H2TuneNumericDivergence
from h2tune import H2TuneSolverFailure
from h2tune import __title__
from h2tune import __version__
from h2tune import compare_arms
from h2tune import gen_task
from h2tune import list_runs

daiquiri.setup(level=logging.INFO)

_LOGGER = logging.getLogger(__title__)


def _exit_code(exc: H2TuneException) -> int:
    """Map an exception to the documented exit code."""
    if isinstance(exc, H2TuneConfigError):
        return 2
    if isinstance(exc, (H2TuneNumericDivergence, H2TuneSolverFailure)):
        return 3
    return 4


_config_option = click.option(
    "--config",
    "-c",
    "config_path",
    type=str,
    default=FederationConfig.DEFAULT_CONFIG_PATH,
    metavar="CONFIG.json",
    show_default=True,
    help="A path to the federation configuration file (JSON, or TOML with a .toml suffix).",
    envvar="H2TUNE_CONFIG_PATH",
)


@click.group()
@click.option(
    "--verbose",
    "-v",
    default=False,
    is_flag=True,
    help="Run in verbose mode.",
)
def cli(verbose: bool = False) -> None:
    """Simulate federated fine-tuning of heterogeneous toy models with sparsified triple low-rank adapters."""
    if verbose:
        _LOGGER.setLevel(logging.DEBUG)
        _LOGGER.debug("Debug mode is on")


@cli.command()
def version() -> None:
    """Get version and exit."""
    click.echo(f"{__title__}: {__version__}")


@cli.command()
@_config_option
def init(config_path: str) -> None:
    """Initialize a configuration file with the bundled three-client scenario."""
    try:
        FederationConfig.create(config_path)
    except H2TuneException as exc:
        _LOGGER.error(str(exc))
        sys.exit(1)


@cli.command()
@_config_option
@click.option("--rounds", type=int, default=None, metavar="N", help="Override the number of rounds.")
@click.option("--seed", type=int, default=None, metavar="N", help="Override the master seed.")
@click.option(
    "--baseline",
    "baselines",
    type=click.Choice(ARMS),
    multiple=True,
    help="Arm to run, can be repeated  [default: H2TUNE].",
)
@click.option(
    "--out",
    type=str,
    default=None,
    metavar="DIR",
    help="Output directory, a fresh one under runs/ if not given.",
    envvar="H2TUNE_OUT",
)
@click.option(
    "--check-grads",
    is_flag=True,
    default=False,
    help="Check analytic gradients against finite differences before training.",
)
@click.option(
    "--transport",
    type=click.Choice(["inproc", "files"]),
    default=None,
    help="Override how stacks are exchanged between clients and the server.",
)
def run(
    config_path: str,
    rounds: Optional[int],
    seed: Optional[int],
    baselines: Tuple[str, ...],
    out: Optional[str],
    check_grads: bool,
    transport: Optional[str],
) -> None:
    """Run a federation experiment and write metrics, summaries and checkpoints.

    Exits with 2 on configuration errors, 3 on numeric divergence, 4 on any
    violated invariant and 1 on unexpected errors.
    """
    try:
        config = FederationConfig.load(config_path, rounds=rounds, seed=seed, transport=transport)
        config_hash = FederationConfig.content_hash(config_path)
        manifest = ExperimentManifest(
            config_path=config_path,
            config_hash=config_hash,
            seed=config.seed,
            arms=list(baselines or ("H2TUNE",)),
            output_dir=out or ExperimentManifest.default_output_dir(config_hash, config.seed),
        )
        _LOGGER.info(
            "Running %s with configuration %r (hash %s) into %r",
            ", ".join(manifest.arms),
            config_path,
            config_hash,
            manifest.output_dir,
        )
        summary = Experiment(manifest=manifest, config=config, check_grads=check_grads).run()
    except H2TuneException as exc:
        _LOGGER.error(str(exc))
        sys.exit(_exit_code(exc))
    except Exception as exc:
        _LOGGER.exception(str(exc))
        sys.exit(1)

    for arm, result in summary["arms"].items():
        click.echo(f"{arm}: mean final accuracy {result['mean_final_accuracy']:.4f}")


@cli.command()
@click.argument("directories", nargs=-1, type=click.Path(exists=True, file_okay=False))
@click.option(
    "--format",
    type=click.Choice(["csv", "table"]),
    default="csv",
    metavar="FMT",
    show_default=True,
    help="Format used to print the comparison.",
    envvar="H2TUNE_FORMAT",
)
def compare(directories: Tuple[str, ...], format: str) -> None:
    """Compare final accuracies of arm directories against the first one."""
    try:
        rows = compare_arms(directories)
    except H2TuneException as exc:
        _LOGGER.error(str(exc))
        sys.exit(_exit_code(exc))

    if format == "csv":
        writer = csv.writer(sys.stdout)
        writer.writerows(rows)
    elif format == "table":
        table = Table(title="Final accuracy per client")
        for idx, column in enumerate(rows[0]):
            table.add_column(column, justify="right", style="cyan" if idx == 0 else None)
        for row in rows[1:]:
            table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))

        console = Console()
        console.print(table)
    else:
        raise NotImplementedError(f"Unknown output format {format!r}")


@cli.command()
@click.argument("root", type=str, default="runs")
@click.option(
    "--format",
    type=click.Choice(["table", "json"]),
    default="table",
    metavar="FMT",
    show_default=True,
    help="Format used to list runs.",
    envvar="H2TUNE_FORMAT",
)
def runs(root: str, format: str) -> None:
    """List experiment runs stored under ROOT, newest first."""
    result = list_runs(root)

    if format == "table":
        if not result:
            return

        table = Table(title="Experiment runs")

        table.add_column("ID", justify="center", style="cyan", no_wrap=True)
        table.add_column("Config hash", style="magenta")
        table.add_column("Arms")
        table.add_column("Started", justify="left", style="green")

        for entry in result:
            table.add_row(
                entry["id"], entry["config_hash"][:12], ", ".join(entry["arms"]), entry["started_at"]
            )

        console = Console()
        console.print(table)
    elif format == "json":
        json.dump(result, sys.stdout, sort_keys=True, indent=2)
        click.echo("\n")
    else:
        raise NotImplementedError(f"Unknown output format {format!r}")


@cli.command("dump-task")
@_config_option
@click.option(
    "--client", "client_id", type=int, default=0, show_default=True, help="Client whose task is dumped."
)
@click.option("--seed", type=int, default=None, metavar="N", help="Override the master seed.")
def dump_task(config_path: str, client_id: int, seed: Optional[int]) -> None:
    """Write a client's synthetic dataset as CSV to standard output."""
    try:
        config = FederationConfig.load(config_path, seed=seed)
        if not 0 <= client_id < len(config.clients):
            raise H2TuneConfigError(
                f"Client {client_id} not found, the federation has {len(config.clients)} clients"
            )
        task = config.clients[client_id].task
        dataset = gen_task(task)
    except H2TuneException as exc:
        _LOGGER.error(str(exc))
        sys.exit(_exit_code(exc))

    writer = csv.writer(sys.stdout)
    writer.writerow(["split", "label"] + [f"x{i}" for i in range(task.input_dim)])
    writer.writerows(dataset.rows())


__name__ == "__main__" and cli()
