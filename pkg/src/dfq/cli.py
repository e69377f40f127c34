"""Command-line interface.

Verbs: train-teacher, train-generator, generate, ptq, qat, evaluate,
run-plan, export-stats, export-grid. The dataset root comes from
``--data-dir`` or the ``DFQ_DATA_DIR`` environment variable.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .bnstats import extract_reference_stats
from .data import DataStore, class_names
from .distill import kd_config, train_data_dependent_qat, train_data_free_qat
from .errors import ContractError
from .gentrain import gen_config, sample_synthetic, train_generator
from .models import (TeacherConfig, build_desk_teacher, build_generator_for_teacher,
                     load_generator, load_teacher, save_generator, save_teacher)
from .pipeline import ExperimentPlan, evaluate as evaluate_model, run_plan
from .quant import apply_quant_spec, calibrate_ptq, load_student, save_student

_data_dir_option = click.option(
    "--data-dir", type=click.Path(), default=None,
    help="Dataset root (defaults to $DFQ_DATA_DIR).",
)


@click.group()
@click.version_option(version=__version__, prog_name="dfq")
def main():
    """Data-free network quantization toolkit."""


@main.command("train-teacher")
@click.option("--dataset", default="shapes10", show_default=True)
@click.option("--arch", default="bncnn", show_default=True)
@click.option("--epochs", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@_data_dir_option
def train_teacher_cmd(dataset, arch, epochs, seed, out, data_dir):
    """Train a desk-scale BN classifier and export a frozen checkpoint."""
    store = DataStore(data_dir)
    train = store.load(dataset, "train", context="cli.train-teacher")
    test = store.load(dataset, "test", context="cli.train-teacher")
    cfg = TeacherConfig(dataset=dataset, arch=arch, epochs=epochs, seed=seed)
    teacher = build_desk_teacher(cfg, train, test)
    save_teacher(teacher, out)
    click.echo(f"teacher accuracy {teacher.recorded_accuracy:.4f} -> {out}")


@main.command("train-generator")
@click.option("--teacher", "teacher_dir", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["ce+bns", "ce", "bns"]),
              default="ce+bns", show_default=True)
@click.option("--profile", type=click.Choice(["desk", "paper", "ci"]),
              default="desk", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--grid-every", default=5, show_default=True,
              help="Emit a sample-grid PNG every N epochs (0 disables).")
@click.option("--out", required=True, type=click.Path())
def train_generator_cmd(teacher_dir, mode, profile, seed, grid_every, out):
    """Train the conditional generator against a frozen teacher."""
    teacher = load_teacher(teacher_dir)
    g = build_generator_for_teacher(teacher)
    cfg = gen_config(profile, loss_mode=mode, seed=seed)
    out = Path(out)

    def on_epoch(epoch, gen, row):
        click.echo(f"epoch {epoch}: total={row.total:.4f} ce={row.ce:.4f} "
                   f"bns={row.bns:.4f} fidelity={row.fidelity:.3f}")
        if grid_every and ((epoch + 1) % grid_every == 0 or epoch + 1 == cfg.epochs):
            from .viz import export_sample_grid
            export_sample_grid(gen, teacher, range(teacher.num_classes), 8,
                               out / "grids" / f"epoch{epoch:04d}.png", seed=seed)
            gen.train()

    g, opt_state, report = train_generator(g, teacher, cfg, on_epoch=on_epoch)
    save_generator(g, out, optimizer_state=opt_state,
                   extra={"loss_mode": mode, "seed": seed,
                          "final_fidelity": report.final_fidelity})
    report.to_csv(out / "report.csv")
    status = "aborted (non-finite loss; last good checkpoint kept)" if report.aborted else "done"
    click.echo(f"{status}; final fidelity {report.final_fidelity:.3f} -> {out}")


@main.command("generate")
@click.option("--generator", "gen_dir", required=True, type=click.Path(exists=True))
@click.option("--teacher", "teacher_dir", required=True, type=click.Path(exists=True))
@click.option("-n", "--count", default=10000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def generate_cmd(gen_dir, teacher_dir, count, seed, out):
    """Sample labeled synthetic images plus teacher soft outputs (npz)."""
    teacher = load_teacher(teacher_dir)
    g, _ = load_generator(gen_dir)
    batch = sample_synthetic(g, teacher, count, seed=seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, images=batch.images.numpy(),
                        labels=batch.labels.numpy(),
                        teacher_probs=batch.teacher_probs.numpy())
    click.echo(f"wrote {count} samples -> {out}")


@main.command("ptq")
@click.option("--teacher", "teacher_dir", required=True, type=click.Path(exists=True))
@click.option("--generator", "gen_dir", default=None, type=click.Path(exists=True),
              help="Calibrate on synthetic samples from this generator (data-free).")
@click.option("--calibration", "calib_npz", default=None, type=click.Path(exists=True),
              help="Calibrate on a saved synthetic npz instead.")
@click.option("--bits", type=click.Choice(["8", "6"]), default="8", show_default=True)
@click.option("--samples", default=10000, show_default=True)
@click.option("--keep-io-8bit", is_flag=True, default=False)
@click.option("--per-channel-weights", is_flag=True, default=False)
@click.option("--evaluate/--no-evaluate", "do_eval", default=True, show_default=True)
@click.option("--out", required=True, type=click.Path())
@_data_dir_option
def ptq_cmd(teacher_dir, gen_dir, calib_npz, bits, samples, keep_io_8bit,
            per_channel_weights, do_eval, out, data_dir):
    """Min/max post-training quantization from calibration data."""
    teacher = load_teacher(teacher_dir)
    bits = int(bits)
    if (gen_dir is None) == (calib_npz is None):
        raise click.UsageError("provide exactly one of --generator / --calibration")
    if gen_dir is not None:
        g, _ = load_generator(gen_dir)
        synth = sample_synthetic(g, teacher, samples, seed=101)
        batches = synth.batches(256)
    else:
        with np.load(calib_npz) as z:
            images = torch.from_numpy(z["images"])
        batches = (images[i:i + 256] for i in range(0, images.shape[0], 256))
    spec = calibrate_ptq(teacher, batches, bits, keep_io_8bit=keep_io_8bit,
                         per_channel_weights=per_channel_weights)
    student = apply_quant_spec(teacher, spec)
    save_student(student, out)
    msg = f"INT{bits} spec ({len(spec.sites())} sites) -> {out}"
    if do_eval:
        store = DataStore(data_dir)
        test = store.load(teacher.dataset, "test", context="cli.ptq")
        msg += f"; test accuracy {evaluate_model(student, test):.4f}"
    click.echo(msg)


@main.command("qat")
@click.option("--mode", type=click.Choice(["data-free", "data-dependent"]),
              default="data-free", show_default=True)
@click.option("--bits", type=click.Choice(["8", "6"]), default="8", show_default=True)
@click.option("--student-from", "teacher_dir", required=True,
              type=click.Path(exists=True), help="Teacher checkpoint to clone.")
@click.option("--generator", "gen_dir", default=None, type=click.Path(exists=True))
@click.option("--profile", type=click.Choice(["desk", "paper", "ci"]),
              default="desk", show_default=True)
@click.option("--samples", default=10000, show_default=True,
              help="Calibration sample count for the initial ranges.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@_data_dir_option
def qat_cmd(mode, bits, teacher_dir, gen_dir, profile, samples, seed, out, data_dir):
    """Quantization-aware training of the student via distillation."""
    teacher = load_teacher(teacher_dir)
    bits = int(bits)
    store = DataStore(data_dir)
    test = store.load(teacher.dataset, "test", context="cli.qat")
    cfg = kd_config(profile, seed=seed)
    out = Path(out)

    if mode == "data-free":
        if gen_dir is None:
            raise click.UsageError("data-free QAT needs --generator")
        with store.embargo("train"):
            g, opt_state = load_generator(gen_dir)
            synth = sample_synthetic(g, teacher, samples, seed=seed + 101)
            spec = calibrate_ptq(teacher, synth.batches(256), bits)
            student = apply_quant_spec(teacher, spec)
            gen_manifest = json.loads((Path(gen_dir) / "manifest.json").read_text())
            gcfg = gen_config(profile, loss_mode=gen_manifest.get("loss_mode", "ce+bns"),
                              seed=seed)
            student, report = train_data_free_qat(
                student, teacher, g, cfg,
                eval_images=test.images, eval_labels=test.labels,
                gen_cfg=gcfg, gen_optimizer_state=opt_state,
            )
    else:
        train = store.load(teacher.dataset, "train", context="cli.qat")
        spec = calibrate_ptq(teacher, train.batches(256), bits)
        student = apply_quant_spec(teacher, spec)
        student, report = train_data_dependent_qat(
            student, teacher, train, cfg,
            eval_images=test.images, eval_labels=test.labels,
        )

    save_student(student, out)
    report.to_csv(out / "report.csv")
    acc = evaluate_model(student, test)
    (out / "metrics.json").write_text(json.dumps(
        {"mode": mode, "bits": bits, "accuracy": acc,
         "teacher_accuracy": teacher.recorded_accuracy,
         "aborted": report.aborted}, indent=2))
    click.echo(f"{mode} INT{bits} QAT accuracy {acc:.4f} "
               f"(teacher {teacher.recorded_accuracy:.4f}) -> {out}")


@main.command("evaluate")
@click.option("--teacher", "teacher_dir", required=True, type=click.Path(exists=True))
@click.option("--student", "student_dir", default=None, type=click.Path(exists=True),
              help="Evaluate this student checkpoint instead of the teacher.")
@click.option("--split", default="test", show_default=True)
@_data_dir_option
def evaluate_cmd(teacher_dir, student_dir, split, data_dir):
    """Top-1 accuracy on a dataset split."""
    teacher = load_teacher(teacher_dir)
    model = teacher if student_dir is None else load_student(student_dir, teacher)
    store = DataStore(data_dir)
    ds = store.load(teacher.dataset, split, context="cli.evaluate")
    click.echo(f"top-1 accuracy on {teacher.dataset}/{split}: "
               f"{evaluate_model(model, ds):.4f}")


@main.command("run-plan")
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_data_dir_option
def run_plan_cmd(plan_path, out, data_dir):
    """Execute an experiment plan (resumable) and render the tables."""
    plan = ExperimentPlan.from_json(Path(plan_path).read_text())
    records = run_plan(plan, out, data_dir=data_dir)
    click.echo((Path(out) / "results.txt").read_text())
    click.echo(f"{len(records)} cells -> {out}")


@main.command("export-stats")
@click.option("--teacher", "teacher_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def export_stats_cmd(teacher_dir, out):
    """Write the teacher's BN reference statistics as JSON rows."""
    teacher = load_teacher(teacher_dir)
    table = extract_reference_stats(teacher)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps(table.to_json_rows(), indent=2))
    click.echo(f"{table.num_entries()} (layer, channel) entries -> {out}")


@main.command("export-grid")
@click.option("--generator", "gen_dir", required=True, type=click.Path(exists=True))
@click.option("--teacher", "teacher_dir", required=True, type=click.Path(exists=True))
@click.option("--classes", default="all", show_default=True,
              help="Comma-separated class indices, or 'all'.")
@click.option("--samples", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def export_grid_cmd(gen_dir, teacher_dir, classes, samples, seed, out):
    """Render a labeled sample grid PNG from a trained generator."""
    from .viz import export_sample_grid

    teacher = load_teacher(teacher_dir)
    g, _ = load_generator(gen_dir)
    if classes == "all":
        cls = range(teacher.num_classes)
    else:
        cls = [int(c) for c in classes.split(",")]
    path = export_sample_grid(g, teacher, cls, samples, out, seed=seed)
    click.echo(f"grid -> {path}")


if __name__ == "__main__":
    main()
