"""Command-line surface: synthetic data, training, evaluation, inspection.

Every command exits 0 on success and nonzero with a single ``error:``
line on stderr otherwise. All numeric outputs are delimited text with
full-precision floats; figures are rendered next to them as a view of
the same numbers.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np
import yaml

from . import figures
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, MsdemError, ValidationError
from .metrics import (
    evaluate_task,
    forgetting_curves,
    pca_project,
    report_from_rows,
    router_dependency,
)
from .model import ModelConfig, MsdemModel
from .stream import (
    TaskStream,
    build_stream,
    generate_synthetic_dataset,
    synth_config_from_dict,
    synth_config_to_dict,
    SynthStreamConfig,
)
from .trainer import TrainConfig, train_stream, write_train_log

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


# ----------------------------------------------------------------------
# config plumbing


def _read_yaml(path) -> dict:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping, got {type(doc).__name__}")
    return doc


def _build_run_configs(doc: dict) -> tuple[ModelConfig, TrainConfig]:
    """Build model and train configs from one document, listing every problem."""
    problems = []
    for key in set(doc) - {"model", "train"}:
        problems.append(f"unknown top-level section {key!r} (expected 'model' and/or 'train')")
    sections = {}
    for name, fields in (("model", _MODEL_FIELDS), ("train", _TRAIN_FIELDS)):
        section = doc.get(name) or {}
        if not isinstance(section, dict):
            problems.append(f"section {name!r} must be a mapping")
            section = {}
        for key in set(section) - fields:
            problems.append(f"unknown key {key!r} in section {name!r}")
        sections[name] = {k: v for k, v in section.items() if k in fields}
    model_cfg = ModelConfig(**sections["model"])
    train_cfg = TrainConfig(**sections["train"])
    for cfg in (model_cfg, train_cfg):
        try:
            cfg.validate()
        except ConfigError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError("invalid run config:\n  " + "\n  ".join(problems))
    return model_cfg, train_cfg


def _load_run_config(path, seed, epochs, tau, sigma) -> tuple[ModelConfig, TrainConfig]:
    doc = _read_yaml(path) if path else {}
    model_cfg, train_cfg = _build_run_configs(doc)
    if seed is not None:
        model_cfg = replace(model_cfg, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
    if epochs is not None:
        train_cfg = replace(train_cfg, epochs_per_task=epochs)
    if tau is not None:
        model_cfg = replace(model_cfg, tau=tau)
    if sigma is not None:
        model_cfg = replace(model_cfg, sigma=sigma)
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def _echo_run_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    click.echo(yaml.safe_dump({"model": asdict(model_cfg), "train": asdict(train_cfg)}, sort_keys=False), nl=False)


# ----------------------------------------------------------------------
# numeric table IO (full-precision floats so values round-trip exactly)


def _write_rows(path, rows) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_rows(path) -> list[list[float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append([float(v) for v in line.split(",")])
    return rows


def _write_report_yaml(path, final_row: list[float]) -> None:
    doc = {
        "n_tasks": len(final_row),
        "average": float(np.mean(final_row)),
        "last": float(final_row[-1]),
        "final_accuracies": [float(v) for v in final_row],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def _export_dependencies(model: MsdemModel, out: Path) -> None:
    raw, norm = router_dependency(model)
    _write_rows(out / "dependency_raw.csv", [row[: i + 1] for i, row in enumerate(raw)])
    _write_rows(out / "dependency_normalized.csv", [row[: i + 1] for i, row in enumerate(norm)])
    figures.render_matrix_heatmap(raw, out / "dependency_raw.png", "deterministic router weights")
    figures.render_matrix_heatmap(norm, out / "dependency_normalized.png", "router weights relative to self")


def _export_feature_map(stream: TaskStream, out: Path) -> None:
    blocks, labels = [], []
    for t in range(1, stream.n_tasks + 1):
        x, _ = stream.test_data(t)
        blocks.append(x.astype(np.float64))
        labels.append(np.full(x.shape[0], t))
    projected = pca_project(np.concatenate(blocks, axis=0), k=2)
    figures.render_feature_map(
        projected, np.concatenate(labels), out / "feature_map.png", "fused test features by task"
    )


def _check_compatible(model: MsdemModel, stream: TaskStream) -> None:
    problems = []
    got = [(bb.name, bb.dim) for bb in model.backbones]
    want = [(bb.name, bb.dim) for bb in stream.backbones]
    if got != want:
        problems.append(f"backbones {got} != manifest backbones {want}")
    if model.current_task != stream.n_tasks:
        problems.append(f"checkpoint holds {model.current_task} task(s), manifest defines {stream.n_tasks}")
    else:
        for t in range(1, stream.n_tasks + 1):
            a, b = model.task_specs[t], stream.spec(t)
            if (a.domain_id, a.class_ids) != (b.domain_id, b.class_ids):
                problems.append(
                    f"task {t}: checkpoint (domain {a.domain_id}, classes {list(a.class_ids)}) "
                    f"!= manifest (domain {b.domain_id}, classes {list(b.class_ids)})"
                )
    if problems:
        raise ValidationError("checkpoint does not match manifest:\n  " + "\n  ".join(problems))


def _make_out_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


# ----------------------------------------------------------------------
# commands


@click.group()
def cli() -> None:
    """Multi-source dynamic-expansion training over precomputed features."""


@cli.command("gen-synth")
@click.argument("out_dir", type=click.Path(file_okay=False), required=False)
@click.option("--config", "config_path", type=click.Path(), default=None, help="YAML synthetic-stream config.")
@click.option("--seed", type=int, default=None, help="Override the stream seed.")
@click.option("--print-config", is_flag=True, help="Print the effective config and exit.")
def gen_synth(out_dir, config_path, seed, print_config) -> None:
    """Generate a synthetic multi-domain feature stream into OUT_DIR."""
    cfg = synth_config_from_dict(_read_yaml(config_path)) if config_path else SynthStreamConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if print_config:
        click.echo(yaml.safe_dump(synth_config_to_dict(cfg), sort_keys=False), nl=False)
        return
    if out_dir is None:
        raise ConfigError("OUT_DIR is required unless --print-config is given")
    out = _make_out_dir(out_dir)
    manifest_path = generate_synthetic_dataset(cfg, out)

    classes = cfg.tasks_per_domain * cfg.classes_per_task
    n_train = int(0.8 * cfg.samples_per_class) * classes
    n_test = cfg.samples_per_class * classes - n_train
    for d in range(cfg.n_domains):
        origin = ""
        if d in cfg.domain_clones:
            base, scale = cfg.domain_clones[d]
            origin = f" (clone of domain {base}, perturb {scale})"
        names = " ".join(f"d{d}_{bb.name}_{split}.msfv" for bb in cfg.backbones for split in ("train", "test"))
        click.echo(
            f"domain {d}: {cfg.tasks_per_domain} task(s), {classes} classes, "
            f"{n_train} train / {n_test} test records{origin}"
        )
        click.echo(f"  {names}")
    click.echo(f"wrote {manifest_path} with {cfg.n_domains * cfg.tasks_per_domain} task(s)")


@cli.command("train")
@click.argument("manifest", type=click.Path(), required=False)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--train-config", "config_path", type=click.Path(), default=None, help="YAML with model:/train: sections.")
@click.option("--seed", type=int, default=None, help="Master seed for both model init and training.")
@click.option("--epochs", type=int, default=None, help="Epochs per task.")
@click.option("--tau", type=float, default=None, help="Routing temperature.")
@click.option("--sigma", type=float, default=None, help="Routing noise scale.")
@click.option("--resume", is_flag=True, help="Continue from the newest task checkpoint in --out.")
@click.option("--stop-after", type=int, default=None, help="Stop once this task id has been trained.")
@click.option("--print-config", is_flag=True, help="Print the effective config and exit.")
def train(manifest, out_dir, config_path, seed, epochs, tau, sigma, resume, stop_after, print_config) -> None:
    """Train one expert column per task of the stream MANIFEST describes."""
    model_cfg, train_cfg = _load_run_config(config_path, seed, epochs, tau, sigma)
    if print_config:
        _echo_run_config(model_cfg, train_cfg)
        return
    if manifest is None or out_dir is None:
        raise ConfigError("MANIFEST and --out are required unless --print-config is given")
    stream = build_stream(Path(manifest))
    out = _make_out_dir(out_dir)

    prior_rows: list[list[float]] = []
    model = None
    if resume:
        done = sorted(out.glob("task[0-9][0-9].ckpt"))
        if done:
            model, ckpt = load_checkpoint(done[-1])
            if asdict(model.config) != asdict(model_cfg):
                raise ConfigError(
                    "resume config mismatch: checkpoint model config "
                    f"{asdict(model.config)} != requested {asdict(model_cfg)}"
                )
            stored_seed = ckpt.header["train_seed"]
            if stored_seed is not None and stored_seed != train_cfg.seed:
                raise ConfigError(
                    f"resume seed mismatch: checkpoint was trained with seed {stored_seed}, "
                    f"requested {train_cfg.seed}"
                )
            prior_rows = _read_rows(out / "accuracy_matrix.csv")[: model.current_task]
            if len(prior_rows) != model.current_task:
                raise ConfigError(
                    f"accuracy_matrix.csv holds {len(prior_rows)} row(s) but the checkpoint "
                    f"finished task {model.current_task}"
                )
            click.echo(f"resuming after task {model.current_task} from {done[-1].name}")
    if model is None:
        model = MsdemModel(stream.backbones, model_cfg)

    def after_task(m, t, logs, acc_rows):
        log = logs[-1]
        save_checkpoint(m, out / f"task{t:02d}.ckpt", optimizers=log.optimizers, train_seed=train_cfg.seed)
        write_train_log(log, out / f"task{t:02d}_log.csv")
        _write_rows(out / "accuracy_matrix.csv", prior_rows + acc_rows)
        row = ", ".join(f"{a:.3f}" for a in acc_rows[-1])
        click.echo(
            f"task {t:02d}: loss {log.losses[0]:.3f} -> {log.losses[-1]:.3f} "
            f"in {log.wall_time_s:.1f}s, accuracies [{row}]"
        )

    logs, new_rows = train_stream(model, stream, train_cfg, after_task=after_task, stop_after=stop_after)
    rows = prior_rows + new_rows

    if model.current_task < stream.n_tasks:
        click.echo(f"stopped after task {model.current_task} of {stream.n_tasks}; use --resume to continue")
        return

    report = report_from_rows(rows)
    _write_report_yaml(out / "report.yaml", report.accuracy[-1])
    _write_rows(out / "final_accuracies.csv", [report.accuracy[-1]])
    curves = forgetting_curves(report)
    _write_rows(out / "forgetting_curves.csv", [curves[t] for t in sorted(curves)])
    summary = {
        "average_over_history": report.average_over_history,
        "tasks_trained_this_run": [log.task_id for log in logs],
        "wall_times_s": {f"task{log.task_id:02d}": round(log.wall_time_s, 3) for log in logs},
        "epochs_per_task": train_cfg.epochs_per_task,
        "seed": train_cfg.seed,
    }
    (out / "training_summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))

    acc = np.zeros((report.n_tasks, report.n_tasks))
    for i, r in enumerate(report.accuracy):
        acc[i, : len(r)] = r
    figures.render_matrix_heatmap(acc, out / "accuracy_matrix.png", "accuracy after each task")
    figures.render_forgetting_curves(curves, out / "forgetting_curves.png")
    _export_dependencies(model, out)
    _export_feature_map(stream, out)
    click.echo(f"average {report.average:.4f}, last {report.last:.4f}; report in {out}")


@cli.command("eval")
@click.argument("checkpoint_path", type=click.Path())
@click.argument("manifest", type=click.Path())
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory.")
def eval_cmd(checkpoint_path, manifest, out_dir) -> None:
    """Evaluate a trained checkpoint on every task of MANIFEST."""
    model, _ = load_checkpoint(checkpoint_path)
    stream = build_stream(Path(manifest))
    _check_compatible(model, stream)
    out = _make_out_dir(out_dir)
    while stream.cursor <= stream.n_tasks:
        stream.advance()
    final_row = []
    for t in range(1, stream.n_tasks + 1):
        x, y = stream.test_data(t)
        final_row.append(evaluate_task(model, t, x, y))
        click.echo(f"task {t:02d}: accuracy {final_row[-1]:.4f} on {len(y)} records")
    _write_report_yaml(out / "report.yaml", final_row)
    _write_rows(out / "final_accuracies.csv", [final_row])
    _export_dependencies(model, out)
    _export_feature_map(stream, out)
    click.echo(f"average {float(np.mean(final_row)):.4f}, last {final_row[-1]:.4f}; report in {out}")


@cli.command("inspect")
@click.argument("checkpoint_path", type=click.Path())
def inspect(checkpoint_path) -> None:
    """Print a human-readable summary of a checkpoint."""
    ckpt = Checkpoint.load(checkpoint_path)
    model = ckpt.build_model()
    h = ckpt.header

    cfg = model.config
    click.echo(f"checkpoint: {checkpoint_path}")
    click.echo(f"format: version 1, arrays {h['array_dtype']}")
    click.echo(
        f"model: d_e={cfg.d_e} heads={cfg.heads} tau={cfg.tau} sigma={cfg.sigma} "
        f"graph_attention_mode={cfg.graph_attention_mode} dtype={cfg.dtype} seed={cfg.seed}"
    )
    click.echo(
        "backbones: "
        + ", ".join(f"{bb.name}({bb.dim})" for bb in model.backbones)
        + f"; fused dim {sum(bb.dim for bb in model.backbones)}, token width {model.token_dim}"
    )
    if h["train_seed"] is not None:
        click.echo(f"train seed: {h['train_seed']}")

    rows = ckpt.parameter_rows()
    total = sum(r[3] for r in rows)
    frozen = sum(r[3] for r in rows if r[2])
    click.echo(f"parameters: {total} total, {total - frozen} trainable, {frozen} frozen")

    click.echo(f"tasks: {model.current_task}")
    for t in range(1, model.current_task + 1):
        spec = model.task_specs[t]
        count = sum(r[3] for r in rows if r[0].startswith(f"task{t:02d}."))
        state = "frozen" if t < model.current_task else "trainable"
        ids = spec.class_ids
        span = f"{ids[0]}..{ids[-1]}" if list(ids) == list(range(ids[0], ids[-1] + 1)) else str(list(ids))
        click.echo(
            f"  task {t:02d}: domain {spec.domain_id}, classes {span} "
            f"({len(ids)}), {count} params, {state}"
        )

    click.echo("router weights (deterministic):")
    for t in range(1, model.current_task + 1):
        w = model.relation.deterministic_weights(t, cfg.tau, cfg.clamp_lo)
        click.echo(f"  task {t:02d}: [" + ", ".join(f"{v:.4f}" for v in w) + "]")

    opt = ckpt.optimizer_summary()
    if opt:
        click.echo("optimizer state (last trained task):")
        for name, lr, steps in opt:
            click.echo(f"  {name}: lr {lr}, {steps} step(s)")


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
    except MsdemError as exc:
        message = "; ".join(part.strip() for part in str(exc).splitlines() if part.strip())
        message = message.replace(":;", ":")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
