"""Command-line entry point: `vit-export export ...`."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import default_cache_dir
from .backbones import available_backbones
from .errors import ExportError
from .export import export_stream


@click.group()
def cli():
    """Export frozen backbone features as a trainable stream."""


@cli.command("export")
@click.option("--backbone", "backbones", multiple=True, required=True,
              help="Backbone name; repeat for a multi-source stream. "
                   "Known: " + ", ".join(available_backbones()) + " (plus any registered at runtime).")
@click.option("--dataset", "datasets", multiple=True, required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Image-folder dataset; repeat for several domains, order = domain order.")
@click.option("--split", "splits", multiple=True, type=click.Choice(["train", "test"]),
              help="Deprecated selector kept for symmetry; both splits are always exported.")
@click.option("--classes", "class_specs", multiple=True,
              help="Comma-separated class folder names for the matching --dataset "
                   "(repeat per dataset; omit or pass '' for every class).")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Output directory [default: a per-stream folder under the cache dir].")
@click.option("--classes-per-task", type=int, default=None,
              help="Split each domain into tasks of this many classes [default: one task per domain].")
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--force", is_flag=True, help="Re-extract even if the feature files already exist.")
def cmd_export(backbones, datasets, splits, class_specs, out, classes_per_task,
               batch_size, device, force):
    """Write one feature file per (backbone, domain, split) plus a manifest."""
    if splits and set(splits) != {"train", "test"}:
        raise ExportError("the training engine needs both splits; --split cannot drop one")
    if len(class_specs) > len(datasets):
        raise ExportError(f"{len(class_specs)} --classes for {len(datasets)} --dataset")
    classes = {}
    for dataset, spec in zip(datasets, class_specs):
        names = tuple(s.strip() for s in spec.split(",") if s.strip())
        classes[dataset] = names or None
    if out is None:
        out = default_cache_dir() / "-".join(d.name for d in datasets)
    manifest = export_stream(
        list(backbones), list(datasets), out,
        classes=classes, classes_per_task=classes_per_task,
        batch_size=batch_size, device=device, force=force,
    )
    click.echo(f"wrote {manifest}")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        print(f"error: usage: {exc.format_message()}", file=sys.stderr)
        return 2
    except click.exceptions.Abort:
        print("error: aborted", file=sys.stderr)
        return 130
    except (ExportError, OSError) as exc:
        message = "; ".join(part.strip() for part in str(exc).splitlines() if part.strip())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
