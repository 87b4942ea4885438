"""Command-line entry point: train, eval, gradcheck, synth and dump-attention."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pandas as pd
import yaml
from filelock import FileLock, Timeout
from pydantic import ValidationError

from app.config import load_run_config, read_config_document
from app.logging_config import configure_logging, run_log
from app.models.schemas import Condition, Dimension, GeneratorConfig, RunConfig
from app.services.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from app.services.data import (
    DatasetError,
    DatasetIndex,
    SilhouetteSequence,
    export_dataset,
    load_dataset,
    sample_batch,
    synthesize,
)
from app.services.evaluation import evaluate, write_csv
from app.services.gradcheck import SUITES, GradCheckError, run_suites
from app.services.model import GaitModel, NonFiniteLossError, train_step
from app.services.mtp import BETA_ORDER
from app.services.optim import Adam

logger = logging.getLogger("scripts.gait_cli")

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_USAGE = 2
EXIT_NON_FINITE = 3

METRICS_COLUMNS = ["step", "L_tri", "L_ce", "L_total"]


class CommandError(RuntimeError):
    """A command cannot run with the given inputs (exit 2)."""


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Gait recognition with meta-generated triple attention and temporal pooling",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train on the synthetic walkers described in a run config
  python scripts/gait_cli.py train --config app/config/tiny.json

  # Cross-view evaluation of the final checkpoint
  python scripts/gait_cli.py eval --config app/config/tiny.json

  # Finite-difference gradient suites
  python scripts/gait_cli.py gradcheck --config app/config/tiny.json
        """,
    )
    parser.add_argument("--log-level", type=str, help="Override GAIT_LOG_LEVEL for this run")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, help="Run config JSON (defaults to GAIT_DEFAULT_CONFIG)")
        sub.add_argument("--output-dir", type=Path, help="Directory for artifacts")
        return sub

    train = add_command("train", "Train a model and write checkpoints plus a metrics CSV")
    train.add_argument("--steps", type=int, help="Number of optimisation steps")
    train.add_argument("--seed", type=int, help="Override the model init and batch sampling seeds")

    evaluate_cmd = add_command("eval", "Cross-view rank-1 / mAP of a checkpoint on the test split")
    evaluate_cmd.add_argument("--checkpoint", type=Path, help="Checkpoint (defaults to <output-dir>/model.ckpt)")
    evaluate_cmd.add_argument("--gallery-sequences", type=int, help="Gallery sequences per test identity")
    evaluate_cmd.add_argument("--max-rank", type=int, help="Report CMC up to this rank")

    gradcheck = add_command("gradcheck", "Compare autodiff gradients with central finite differences")
    gradcheck.add_argument("--suite", action="append", choices=SUITES, help="Suite to run (repeatable)")

    synth = add_command("synth", "Render a synthetic dataset to disk")
    synth.add_argument("--generator", type=Path, help="Generator-only JSON document")
    synth.add_argument("--out", type=Path, help="Dataset directory (defaults to <output-dir>/dataset)")

    dump = add_command("dump-attention", "Write attention, gate and pooling weights for one sequence")
    dump.add_argument("--checkpoint", type=Path, help="Checkpoint (defaults to <output-dir>/model.ckpt)")
    dump.add_argument("--sequence", type=str, help="Sequence key ID/condition-seq/view, e.g. 001/nm-01/090")
    return parser.parse_args(argv)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {
        "output_dir": str(args.output_dir) if args.output_dir else None,
        "model.seed": getattr(args, "seed", None),
        "train.seed": getattr(args, "seed", None),
    }
    if getattr(args, "steps", None) is not None:
        overrides["train.steps"] = args.steps
    if getattr(args, "gallery_sequences", None) is not None:
        overrides["eval.gallery_sequences"] = args.gallery_sequences
    if getattr(args, "max_rank", None) is not None:
        overrides["eval.max_rank"] = args.max_rank
    return overrides


def build_index(run: RunConfig) -> DatasetIndex:
    if run.data.root is not None:
        return load_dataset(run.data.root, run.model.resolution, run.data.train_ids)
    assert run.data.generator is not None
    return synthesize(run.data.generator, run.data.train_ids)


def acquire_lock(output_dir: Path) -> FileLock:
    output_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(output_dir / ".gait.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise CommandError(f"{output_dir} is in use by another run") from exc
    return lock


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def cmd_train(run: RunConfig) -> int:
    index = build_index(run)
    output_dir = run.output_dir
    lock = acquire_lock(output_dir)
    try:
        model = GaitModel(run.model, index.num_classes)
        optimizer = Adam(model, lr=run.model.learning_rate)
        rng = np.random.default_rng(run.train.seed)
        rows: list[dict[str, float]] = []
        status = EXIT_OK
        for step in range(1, run.train.steps + 1):
            batch = sample_batch(index, run.train.batch_ids, run.train.batch_sequences, run.model.clip_length, rng)
            try:
                result = train_step(model, batch, optimizer)
            except NonFiniteLossError as exc:
                logger.error("Aborting at step %d: %s", step, exc)
                status = EXIT_NON_FINITE
                break
            rows.append(
                {"step": step, "L_tri": result.triplet, "L_ce": result.cross_entropy, "L_total": result.total}
            )
            if step % run.train.log_every == 0 or step == run.train.steps:
                logger.info(
                    "step %d | tri=%.4f ce=%.4f total=%.4f | active triplets=%d",
                    step,
                    result.triplet,
                    result.cross_entropy,
                    result.total,
                    result.active_triplets,
                )
            if step % run.train.checkpoint_every == 0:
                save_checkpoint(output_dir / "checkpoints" / f"step_{step:06d}.ckpt", model, optimizer, step)

        write_csv(pd.DataFrame(rows, columns=METRICS_COLUMNS), output_dir / "metrics.csv")
        if status == EXIT_OK:
            save_checkpoint(output_dir / "model.ckpt", model, optimizer, run.train.steps)
        return status
    finally:
        lock.release()


def _checkpoint_path(run: RunConfig, given: Path | None) -> Path:
    return given if given is not None else run.output_dir / "model.ckpt"


def cmd_eval(run: RunConfig, checkpoint: Path | None) -> int:
    model, _, step = load_checkpoint(_checkpoint_path(run, checkpoint), expected=run.model)
    index = build_index(run)
    report = evaluate(model, index, run.eval)
    per_view_path, summary_path = report.write_csv(run.output_dir)
    for row in report.summary:
        print(f"{row.condition.value}: mean rank-1 {row.mean_rank1:.2f}%  mAP {row.mAP:.2f}%")
    logger.info("Wrote %s and %s (checkpoint step %d)", per_view_path, summary_path, step)
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, suites: Sequence[str] | None) -> int:
    errors = run_suites(run.gradcheck, run.model, suites or SUITES)
    failed = False
    for name, error in errors.items():
        verdict = "ok" if error < run.gradcheck.tolerance else "FAIL"
        failed = failed or verdict == "FAIL"
        print(f"{name}: max relative error {error:.3e} {verdict}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_synth(run: RunConfig, generator_path: Path | None, out: Path | None) -> int:
    if generator_path is not None:
        generator = GeneratorConfig.model_validate(read_config_document(generator_path))
    elif run.data.generator is not None:
        generator = run.data.generator
    else:
        raise CommandError("synth needs a generator document (--generator or data.generator)")
    index = synthesize(generator, run.data.train_ids)
    target = out if out is not None else run.output_dir / "dataset"
    written = export_dataset(index, target)
    print(f"Wrote {len(index.sequences)} sequences ({written} frames) to {target}")
    return EXIT_OK


def _find_sequence(index: DatasetIndex, key: str | None) -> SilhouetteSequence:
    if key is None:
        test = index.split("test")
        if not test:
            raise CommandError("the test split is empty")
        return test[0]
    try:
        identity, folder, view = key.strip("/").split("/")
        condition, seq = folder.split("-")
        group_key = (identity, Condition(condition.upper()), int(view))
        number = int(seq)
    except ValueError as exc:
        raise CommandError(f"sequence key {key!r} is not ID/condition-seq/view") from exc
    for sequence in index.grouped().get(group_key, []):
        if sequence.seq == number:
            return sequence
    raise CommandError(f"sequence {key} not found")


def cmd_dump_attention(run: RunConfig, checkpoint: Path | None, key: str | None) -> int:
    model, _, _ = load_checkpoint(_checkpoint_path(run, checkpoint), expected=run.model)
    index = build_index(run)
    sequence = _find_sequence(index, key)
    record = model.inspect(sequence.frames)

    attention_rows: dict[Dimension, list[dict[str, Any]]] = {dim: [] for dim in Dimension}
    gate_rows = []
    for stage, dim, calibration in record.calibrations:
        values = calibration.attention.numpy().reshape(calibration.attention.shape[0], -1)
        for frame, row in enumerate(values):
            for position, value in enumerate(row):
                attention_rows[dim].append({"stage": stage, "frame": frame, "index": position, "attention": value})
        gates = calibration.gate.g.numpy()
        for frame, row in enumerate(gates):
            for stream, weight in enumerate(row, start=1):
                gate_rows.append(
                    {"stage": stage, "dimension": dim.value, "frame": frame, "stream": stream, "weight": weight}
                )

    out_dir = run.output_dir / "attention"
    out_dir.mkdir(parents=True, exist_ok=True)
    for dim, rows in attention_rows.items():
        write_csv(pd.DataFrame(rows, columns=["stage", "frame", "index", "attention"]), out_dir / f"{dim.value}.csv")
    write_csv(pd.DataFrame(gate_rows, columns=["stage", "dimension", "frame", "stream", "weight"]), out_dir / "gates.csv")
    pooling = [{"name": f"beta_{method.value}", "value": float(b)} for method, b in zip(BETA_ORDER, record.beta)]
    pooling.append({"name": "p", "value": record.p})
    write_csv(pd.DataFrame(pooling, columns=["name", "value"]), out_dir / "pooling.csv")
    print(f"Wrote attention for {sequence.id}/{sequence.condition.value.lower()}-{sequence.seq:02d}/{sequence.view:03d} to {out_dir}")
    return EXIT_OK


RUN_COMMANDS = ("train", "eval", "dump-attention")


def _dispatch(args: argparse.Namespace, run: RunConfig) -> int:
    if args.command == "train":
        return cmd_train(run)
    if args.command == "eval":
        return cmd_eval(run, args.checkpoint)
    if args.command == "gradcheck":
        return cmd_gradcheck(run, args.suite)
    if args.command == "synth":
        return cmd_synth(run, args.generator, args.out)
    return cmd_dump_attention(run, args.checkpoint, args.sequence)


def _execute(args: argparse.Namespace, run: RunConfig) -> int:
    try:
        return _dispatch(args, run)
    except (ValidationError, yaml.YAMLError, OSError) as exc:
        logger.error("Invalid configuration: %s", exc)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, CommandError, GradCheckError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        logger.error("%s", exc)
        return EXIT_NON_FINITE


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    configure_logging(args.log_level)
    try:
        run = load_run_config(args.config, _overrides(args))
    except (ValidationError, yaml.YAMLError, OSError) as exc:
        logger.error("Invalid configuration: %s", exc)
        return EXIT_USAGE
    if args.command not in RUN_COMMANDS:
        return _execute(args, run)
    try:
        with run_log(run.output_dir):
            return _execute(args, run)
    except OSError as exc:
        logger.error("Cannot write to %s: %s", run.output_dir, exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
