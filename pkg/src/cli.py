import click
import json
import os
import sys
from dataclasses import asdict
from functools import wraps

import pandas as pd
from tabulate import tabulate

import trainer
import utils.experiment_logger as experiment_logger
from checkpoint import load_checkpoint, load_states, save_checkpoint, save_states
from config import load_config
from errors import ConfigError, MelesError
from evaluation import (
    export_states,
    knn_probe,
    linear_probe,
    pca_project,
    read_embeddings,
    table_from_states,
    update_states,
    write_embeddings,
    write_projection,
    write_reports,
)
from ingest import (
    Schema,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    load_schema,
    save_dataset,
    save_schema,
    synthetic_schema,
)
from pairing import SYNTHETIC_MAX_LENGTH, SYNTHETIC_MIN_LENGTH
from utils.custom_logger import log, set_verbosity
from utils.profile import profile_this

IO_EXIT_CODE = 2
USAGE_EXIT_CODE = 1

# Scaled-down training setup that suits the synthetic generator
SYNTHETIC_CONFIG = {
    "encoder": {"hidden_size": 64},
    "pairing": {"min_length": SYNTHETIC_MIN_LENGTH, "max_length": SYNTHETIC_MAX_LENGTH},
    "train": {"batch_persons": 16, "epochs": 30},
}


def handle_errors(f):
    """Map toolkit and I/O errors to log lines and stable exit codes."""

    @wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except MelesError as e:
            log.error(f"{type(e).__name__}: {e}")
            sys.exit(e.exit_code)
        except OSError as e:
            log.error(f"I/O error: {e}")
            sys.exit(IO_EXIT_CODE)

    return wrapper


class MelesGroup(click.Group):
    """A command group whose malformed command lines exit with the validation code."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            return super().main(args, prog_name, complete_var, False, **extra)
        except click.ClickException as e:
            if not standalone_mode:
                raise
            e.show()
            sys.exit(USAGE_EXIT_CODE if isinstance(e, click.UsageError) else e.exit_code)
        except click.Abort:
            if not standalone_mode:
                raise
            click.echo("Aborted!", err=True)
            sys.exit(1)


def sibling_path(path: str, suffix: str) -> str:
    return os.path.splitext(path)[0] + suffix


def flatten(sections: dict) -> list[tuple[str, str]]:
    return [
        (f"{section}.{key}", json.dumps(value))
        for section, values in sections.items()
        for key, value in values.items()
    ]


checkpoint_schema_option = click.option(
    "-s", "--schema", "schema_path", default=None, help="Schema JSON.  [default: the checkpoint's]"
)


def resolve_schema(schema_path: str | None, checkpoint) -> Schema:
    if schema_path is not None:
        return load_schema(schema_path)
    return checkpoint.get_schema()


@click.group(cls=MelesGroup, context_settings={"show_default": True})
@click.option("-v", "--verbose", is_flag=True, help="Enable verbose logging.")
@click.option("-q", "--quiet", is_flag=True, help="Disable non-error logging.")
def cli(verbose: bool, quiet: bool):
    set_verbosity(verbose, quiet)


@cli.command()
@click.option("-o", "--out", required=True, help="Path of the dataset CSV to write.")
@click.option(
    "-s",
    "--schema",
    "schema_path",
    default=None,
    help="Schema JSON path.  [default: <out>.schema.json]",
)
@click.option("--config-out", default=None, help="Also write a starter training config here.")
@click.option("-p", "--persons", default=200, help="Number of persons.")
@click.option("-c", "--classes", default=4, help="Number of classes.")
@click.option("--signal", default=0.8, help="Class signal strength in [0, 1].")
@click.option("--categories", default=20, help="Number of merchant categories.")
@click.option("--min-events", default=30, help="Minimal events per person.")
@click.option("--max-events", default=80, help="Maximal events per person.")
@click.option("--seed", default=7, help="Random seed.")
@handle_errors
def synth(
    out: str,
    schema_path: str | None,
    config_out: str | None,
    persons: int,
    classes: int,
    signal: float,
    categories: int,
    min_events: int,
    max_events: int,
    seed: int,
):
    """Generate a labelled synthetic event dataset."""
    config = SynthConfig(
        n_persons=persons,
        n_classes=classes,
        events_per_person=(min_events, max_events),
        n_categories=categories,
        class_signal_strength=signal,
        seed=seed,
    )
    dataset = generate_synthetic(config)
    schema = synthetic_schema()
    save_dataset(out, dataset, schema)
    schema_path = schema_path or sibling_path(out, ".schema.json")
    save_schema(schema_path, schema)
    log.info(f"Wrote {len(dataset)} persons to {out} (schema: {schema_path})")
    if config_out:
        with open(config_out, "w") as f:
            json.dump(SYNTHETIC_CONFIG, f, indent=2)
        log.info(f"Wrote starter config to {config_out}")


@cli.command()
@click.option("-c", "--config", "config_path", default=None, help="Run configuration (JSON).")
@click.option("-d", "--data", required=True, help="Event CSV.")
@click.option("-s", "--schema", "schema_path", required=True, help="Schema JSON.")
@click.option("-o", "--out", required=True, help="Checkpoint path to write.")
@click.option("-m", "--metrics", default=None, help="Metrics CSV.  [default: <out>.metrics.csv]")
@click.option("--resume", default=None, help="Continue training from this checkpoint.")
@click.option("--progress", is_flag=True, help="Show a progress bar over epochs.")
@click.option("--profile", "profile_path", default=None, help="Write a cProfile dump here.")
@click.argument("overrides", nargs=-1)
@handle_errors
def train(
    config_path: str | None,
    data: str,
    schema_path: str,
    out: str,
    metrics: str | None,
    resume: str | None,
    progress: bool,
    profile_path: str | None,
    overrides: tuple[str, ...],
):
    """
    Train an encoder by metric learning. Extra arguments override config
    values, e.g. `train.epochs=2` or `loss=margin`.
    """
    config = load_config(config_path, overrides)
    print(tabulate(flatten(config.to_dict()), headers=["Key", "Value"], tablefmt="mysql"))

    schema = load_schema(schema_path)
    dataset = load_dataset(data, schema)
    previous = load_checkpoint(resume) if resume else None

    run = trainer.train
    if profile_path:
        run = profile_this(trainer.train, output_path=profile_path)
    checkpoint, history = run(config, dataset, schema, progress=progress, resume=previous)

    save_checkpoint(out, checkpoint)
    metrics = metrics or sibling_path(out, ".metrics.csv")
    pd.DataFrame([asdict(m) for m in history]).to_csv(metrics, index=False)
    log.info(f"Wrote per-epoch metrics to {metrics}")

    last = history[-1] if history else None
    experiment_logger.log_run(
        "train",
        config.digest(),
        data,
        {
            "epochs": checkpoint.epoch,
            "train_loss": last.train_loss if last else None,
            "val_loss": last.val_loss if last else None,
        },
    )


@cli.command()
@click.option("--ckpt", required=True, help="Trained checkpoint.")
@click.option("-d", "--data", required=True, help="Event CSV.")
@checkpoint_schema_option
@click.option("-o", "--out", required=True, help="Embedding CSV to write.")
@click.option("--states", default=None, help="Also write raw states for incremental updates.")
@handle_errors
def embed(ckpt: str, data: str, schema_path: str | None, out: str, states: str | None):
    """Export one unit-norm embedding per person."""
    checkpoint = load_checkpoint(ckpt)
    schema = resolve_schema(schema_path, checkpoint)
    state_file = export_states(checkpoint, load_dataset(data, schema), schema)
    write_embeddings(out, table_from_states(state_file))
    if states:
        save_states(states, state_file)


@cli.command()
@click.option("--ckpt", required=True, help="Trained checkpoint.")
@click.option(
    "--state", "state_path", required=True, help="State file written by `embed --states`."
)
@click.option("--new-events", required=True, help="CSV of events that follow the stored history.")
@checkpoint_schema_option
@click.option("-o", "--out", required=True, help="Embedding CSV to write.")
@click.option("--states-out", default=None, help="Updated state file.  [default: <out>.states]")
@handle_errors
def update(
    ckpt: str,
    state_path: str,
    new_events: str,
    schema_path: str | None,
    out: str,
    states_out: str | None,
):
    """Fold new events into stored states without re-encoding history."""
    checkpoint = load_checkpoint(ckpt)
    schema = resolve_schema(schema_path, checkpoint)
    state_file = load_states(state_path)
    events = load_dataset(new_events, schema, allow_empty=True)
    updated = update_states(checkpoint, state_file, events, schema)
    write_embeddings(out, table_from_states(updated))
    save_states(states_out or sibling_path(out, ".states"), updated)


@cli.command(name="eval")
@click.option("-e", "--embeddings", required=True, help="Embedding CSV.")
@click.option(
    "-p", "--probe", type=click.Choice(["linear", "knn"]), default="linear", help="Probe model."
)
@click.option("-f", "--folds", default=5, help="Cross-validation folds.")
@click.option("-k", "--neighbors", default=5, help="Neighbors for the kNN probe.")
@click.option("-o", "--out", default=None, help="Write the report as JSON here.")
@handle_errors
def evaluate(embeddings: str, probe: str, folds: int, neighbors: int, out: str | None):
    """Cross-validated probe of embedding quality."""
    table = read_embeddings(embeddings)
    if probe == "linear":
        reports = linear_probe(table, folds)
    else:
        reports = knn_probe(table, neighbors, folds)

    rows = [(r.metric, round(r.mean, 4), round(r.ci95, 4), r.folds, r.n) for r in reports]
    print(tabulate(rows, headers=["Metric", "Mean", "CI95", "Folds", "N"], tablefmt="mysql"))
    if out:
        write_reports(out, reports)
        log.info(f"Wrote probe report to {out}")
    experiment_logger.log_run(
        "eval", f"{probe}:{folds}", embeddings, {r.metric: r.mean for r in reports}
    )


@cli.command()
@click.option("-e", "--embeddings", required=True, help="Embedding CSV.")
@click.option("-o", "--out", required=True, help="Projection CSV (person_id,label,x,y).")
@click.option("--dims", default=2, help="Number of principal components.")
@handle_errors
def project(embeddings: str, out: str, dims: int):
    """Project embeddings onto their leading principal components for plotting."""
    projection = pca_project(read_embeddings(embeddings), dims)
    write_projection(out, projection)
    log.info(f"Explained variance: {projection.explained_variance.round(6).tolist()}")


@cli.command()
@click.option("--ckpt", default=None, help="Pre-trained checkpoint.")
@click.option("-d", "--data", required=True, help="Labelled event CSV.")
@checkpoint_schema_option
@click.option(
    "-c", "--config", "config_path", default=None, help="Encoder config for --from-scratch."
)
@click.option("-o", "--out", required=True, help="Fine-tuned checkpoint to write.")
@click.option("--freeze-encoder", is_flag=True, help="Train the head only.")
@click.option("--from-scratch", is_flag=True, help="Supervised baseline without pre-training.")
@click.option(
    "--label-fraction", default=1.0, help="Fraction of training persons that keep labels."
)
@click.option("--zero-head", is_flag=True, help="Start the head at zero instead of a logistic fit.")
@click.option(
    "--selection-fraction",
    default=0.2,
    help="Training persons held aside to pick the best epoch (0 keeps the last).",
)
@click.option("--epochs", default=10, help="Fine-tuning epochs.")
@click.option("--lr", default=0.0005, help="Learning rate.")
@click.option("--batch-persons", default=64, help="Persons per step.")
@click.option("--test-fraction", default=0.1, help="Held-out persons for the report.")
@click.option("--seed", default=0, help="Random seed.")
@click.option("--report", "report_path", default=None, help="Write the result as JSON here.")
@handle_errors
def finetune(
    ckpt: str | None,
    data: str,
    schema_path: str | None,
    config_path: str | None,
    out: str,
    freeze_encoder: bool,
    from_scratch: bool,
    label_fraction: float,
    zero_head: bool,
    selection_fraction: float,
    epochs: int,
    lr: float,
    batch_persons: int,
    test_fraction: float,
    seed: int,
    report_path: str | None,
):
    """Train a classification head on top of the encoder."""
    ft_config = trainer.FineTuneConfig(
        learning_rate=lr,
        epochs=epochs,
        batch_persons=batch_persons,
        test_fraction=test_fraction,
        freeze_encoder=freeze_encoder,
        pretrained=not from_scratch,
        label_fraction=label_fraction,
        warm_start=not zero_head,
        selection_fraction=selection_fraction,
        seed=seed,
    )
    checkpoint = load_checkpoint(ckpt) if ckpt and not from_scratch else None
    if checkpoint is None and schema_path is None:
        raise ConfigError("--schema is required without a checkpoint")
    schema = resolve_schema(schema_path, checkpoint)
    config = load_config(config_path) if from_scratch else None

    finetuned, report = trainer.fine_tune(
        load_dataset(data, schema), schema, ft_config, checkpoint=checkpoint, config=config
    )
    save_checkpoint(out, finetuned)
    print(tabulate(report.to_dict().items(), headers=["Key", "Value"], tablefmt="mysql"))
    if report_path:
        with open(report_path, "w") as f:
            json.dump(report.to_dict(), f, indent=2)
    experiment_logger.log_run("fine_tune", ft_config.digest(), data, report.to_dict())


@cli.command()
@handle_errors
def report():
    """Report runs recorded in the experiment log."""
    log.info(f"Total number of runs logged: {experiment_logger.count_runs()}")

    log.info("Runs per kind:")
    summary = experiment_logger.summarize_runs()
    print(tabulate(summary, headers=["Kind", "Count", "Latest"], tablefmt="mysql"))

    runs = experiment_logger.get_runs()
    headers = ["Id", "Kind", "Config", "Source", "Metrics", "Created"]
    print(tabulate(runs, headers=headers, tablefmt="mysql"))


if __name__ == "__main__":
    cli()
