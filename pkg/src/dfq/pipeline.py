"""End-to-end experiment orchestration.

A plan is a grid of quantization cells (method x bits x generator loss mode
x seed) over one desk teacher. ``run_plan`` executes cells in dependency
order (teacher -> generators -> PTQ/QAT -> eval), writes one metrics record
per cell, renders the accuracy tables, and is resumable: a cell whose
``done.json`` carries a matching config digest is skipped.

Data-free cells run inside the training-split embargo; the run-level access
log written next to the results proves the training split was never opened
for them.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .data import DataStore, DeskDataset
from .distill import KDConfig, kd_config, train_data_dependent_qat, train_data_free_qat
from .errors import ContractError, IngestionError
from .gentrain import (GenTrainConfig, gen_config, label_fidelity, sample_synthetic,
                       train_generator)
from .models import (TeacherConfig, TeacherModel, build_desk_teacher,
                     build_generator_for_teacher, evaluate_top1, load_generator,
                     load_teacher, save_generator, save_teacher)
from .quant import QuantizedModelSpec, apply_quant_spec, calibrate_ptq

DF_METHODS = ("DF-PTQ", "DF-QAT")
DD_METHODS = ("DD-PTQ", "DD-QAT")
METHODS = DF_METHODS + DD_METHODS


def evaluate(model, test_set) -> float:
    """Top-1 accuracy of a model over a test split (deterministic)."""
    if isinstance(test_set, DeskDataset):
        images, labels = test_set.images, test_set.labels
    else:
        images, labels = test_set
    if images.shape[0] == 0:
        raise ContractError("evaluation stream is empty")
    return evaluate_top1(model, images, labels)


@dataclass
class PlanCell:
    method: str
    bits: int
    gen_mode: str = "ce+bns"  # generator loss mode; ignored for DD cells
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; known: {METHODS}")
        if self.bits not in (6, 8):
            raise ContractError(f"bits must be 6 or 8, got {self.bits}")

    @property
    def data_free(self) -> bool:
        return self.method in DF_METHODS

    @property
    def cell_id(self) -> str:
        if self.data_free:
            return f"{self.method}_int{self.bits}_{self.gen_mode}_s{self.seed}"
        return f"{self.method}_int{self.bits}_s{self.seed}"


@dataclass
class ExperimentPlan:
    name: str = "desk"
    dataset: str = "shapes10"
    arch: str = "bncnn"
    teacher_epochs: int = 8
    teacher_seed: int = 0
    gen_profile: str = "ci"
    kd_profile: str = "ci"
    gen_overrides: dict = field(default_factory=dict)
    kd_overrides: dict = field(default_factory=dict)
    generator_base: int = 16
    calibration_samples: int = 10000
    keep_io_8bit: bool = False
    cells: list = field(default_factory=list)

    def __post_init__(self):
        self.cells = [
            c if isinstance(c, PlanCell) else PlanCell(**c) for c in self.cells
        ]

    def to_json(self) -> str:
        payload = asdict(self)
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        return cls(**json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def gen_cfg(self, mode: str, seed: int) -> GenTrainConfig:
        return gen_config(self.gen_profile, loss_mode=mode, seed=seed,
                          **self.gen_overrides)

    def kd_cfg(self, seed: int) -> KDConfig:
        return kd_config(self.kd_profile, seed=seed, **self.kd_overrides)


def table_plan(bits=(8, 6), seeds=(0,), gen_mode: str = "ce+bns",
               **plan_kwargs) -> ExperimentPlan:
    """Headline grid: DF-PTQ/DF-QAT/DD-PTQ/DD-QAT per bit width."""
    cells = []
    for b in bits:
        for s in seeds:
            cells += [
                PlanCell("DF-PTQ", b, gen_mode, s), PlanCell("DF-QAT", b, gen_mode, s),
                PlanCell("DD-PTQ", b, gen_mode, s), PlanCell("DD-QAT", b, gen_mode, s),
            ]
    return ExperimentPlan(cells=cells, **plan_kwargs)


def ablation_plan(bits: int = 8, seeds=(0, 1, 2), **plan_kwargs) -> ExperimentPlan:
    """Generator-loss ablation: one DF-QAT cell per loss mode per seed."""
    cells = [
        PlanCell("DF-QAT", bits, mode, s)
        for mode in ("ce+bns", "ce", "bns") for s in seeds
    ]
    return ExperimentPlan(cells=cells, **plan_kwargs)


@dataclass
class MetricsRecord:
    cell_id: str
    kind: str  # teacher | generator | quant
    accuracy: float
    wall_clock: float
    config_digest: str
    code_version: str
    artifacts: list
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)


def _digest_of(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class PlanRunner:
    """Executes a plan against an output directory, cell by cell."""

    def __init__(self, plan: ExperimentPlan, out_dir, store: DataStore):
        self.plan = plan
        self.out = Path(out_dir)
        self.store = store
        self.records: dict[str, MetricsRecord] = {}

    # -- cell plumbing ------------------------------------------------------

    def _run_cell(self, cell_dir: Path, cell_id: str, kind: str,
                  config_digest: str, builder) -> MetricsRecord:
        done = cell_dir / "done.json"
        if done.exists():
            payload = json.loads(done.read_text())
            if payload["record"]["config_digest"] == config_digest:
                record = MetricsRecord.from_dict(payload["record"])
                self.records[cell_id] = record
                return record
            shutil.rmtree(cell_dir)
        elif cell_dir.exists():
            shutil.rmtree(cell_dir)
        cell_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        accuracy, extra = builder(cell_dir)
        wall = time.perf_counter() - t0
        artifacts = sorted(
            str(p.relative_to(self.out)) for p in cell_dir.rglob("*") if p.is_file()
        ) + [str((cell_dir / "done.json").relative_to(self.out))]
        record = MetricsRecord(cell_id, kind, accuracy, wall, config_digest,
                               __version__, artifacts, extra)
        done.write_text(json.dumps({"record": asdict(record)}, indent=2))
        self._append_metrics(record)
        self.records[cell_id] = record
        return record

    def _append_metrics(self, record: MetricsRecord) -> None:
        with open(self.out / "metrics.jsonl", "a") as f:
            f.write(record.to_json() + "\n")

    # -- stages -------------------------------------------------------------

    def teacher_cell(self) -> TeacherModel:
        plan = self.plan
        digest = _digest_of({
            "dataset": plan.dataset, "arch": plan.arch,
            "epochs": plan.teacher_epochs, "seed": plan.teacher_seed,
        })

        def build(cell_dir):
            train = self.store.load(plan.dataset, "train", context="teacher")
            test = self.store.load(plan.dataset, "test", context="teacher")
            cfg = TeacherConfig(dataset=plan.dataset, arch=plan.arch,
                                epochs=plan.teacher_epochs, seed=plan.teacher_seed)
            teacher = build_desk_teacher(cfg, train, test)
            save_teacher(teacher, cell_dir)
            return teacher.recorded_accuracy, {"param_digest": teacher.digest()}

        self._run_cell(self.out / "teacher", "teacher", "teacher", digest, build)
        return load_teacher(self.out / "teacher")

    def generator_cell(self, teacher: TeacherModel, mode: str, seed: int) -> Path:
        plan = self.plan
        cfg = plan.gen_cfg(mode, seed)
        cell_id = f"gen_{mode}_s{seed}"
        cell_dir = self.out / cell_id
        digest = _digest_of({
            "gen": {k: str(v) for k, v in asdict(cfg).items()},
            "base": plan.generator_base,
            "teacher": teacher.digest(),
        })

        def build(cell_dir):
            g = build_generator_for_teacher(teacher, base=plan.generator_base)
            with self.store.embargo("train"):
                g, opt_state, report = train_generator(g, teacher, cfg)
            save_generator(g, cell_dir, optimizer_state=opt_state,
                           extra={"loss_mode": str(cfg.loss_mode.value),
                                  "seed": seed,
                                  "final_fidelity": report.final_fidelity})
            report.to_csv(cell_dir / "report.csv")
            return report.final_fidelity, {
                "fidelity": report.final_fidelity,
                "aborted": report.aborted,
                "teacher_unchanged":
                    report.teacher_digest_before == report.teacher_digest_after,
            }

        self._run_cell(cell_dir, cell_id, "generator", digest, build)
        return cell_dir

    def _calibration_spec(self, teacher, cell: PlanCell, gen_dir: Path | None,
                          train_set: DeskDataset | None) -> QuantizedModelSpec:
        plan = self.plan
        if cell.data_free:
            g, _ = load_generator(gen_dir)
            synth = sample_synthetic(g, teacher, plan.calibration_samples,
                                     seed=cell.seed + 101)
            return calibrate_ptq(teacher, synth.batches(256), cell.bits,
                                 keep_io_8bit=plan.keep_io_8bit)
        return calibrate_ptq(teacher, train_set.batches(256), cell.bits,
                             keep_io_8bit=plan.keep_io_8bit)

    def quant_cell(self, teacher: TeacherModel, cell: PlanCell,
                   gen_dir: Path | None) -> MetricsRecord:
        plan = self.plan
        kd_cfg_ = plan.kd_cfg(cell.seed)
        upstream = {"teacher": teacher.digest()}
        if cell.data_free:
            gen_manifest = json.loads((gen_dir / "manifest.json").read_text())
            upstream["generator"] = gen_manifest["param_digest"]
        digest = _digest_of({
            "cell": asdict(cell),
            "kd": asdict(kd_cfg_) if "QAT" in cell.method else {},
            "calibration_samples": plan.calibration_samples,
            "keep_io_8bit": plan.keep_io_8bit,
            "upstream": upstream,
        })

        def build(cell_dir):
            test = self.store.load(plan.dataset, "test", context=cell.cell_id)
            extra = {"method": cell.method, "bits": cell.bits,
                     "gen_mode": cell.gen_mode if cell.data_free else "",
                     "seed": cell.seed}

            if cell.data_free:
                with self.store.embargo("train"):
                    spec = self._calibration_spec(teacher, cell, gen_dir, None)
                    student = apply_quant_spec(teacher, spec)
                    if cell.method == "DF-QAT":
                        g, opt_state = load_generator(gen_dir)
                        gcfg = plan.gen_cfg(cell.gen_mode, cell.seed)
                        student, report = train_data_free_qat(
                            student, teacher, g, kd_cfg_,
                            eval_images=test.images, eval_labels=test.labels,
                            gen_cfg=gcfg, gen_optimizer_state=opt_state,
                        )
                        report.to_csv(cell_dir / "report.csv")
                        extra["aborted"] = report.aborted
            else:
                train = self.store.load(plan.dataset, "train", context=cell.cell_id)
                spec = self._calibration_spec(teacher, cell, None, train)
                student = apply_quant_spec(teacher, spec)
                if cell.method == "DD-QAT":
                    student, report = train_data_dependent_qat(
                        student, teacher, train, kd_cfg_,
                        eval_images=test.images, eval_labels=test.labels,
                    )
                    report.to_csv(cell_dir / "report.csv")
                    extra["aborted"] = report.aborted

            (cell_dir / "quant_spec.json").write_text(student.export_spec().to_json())
            if "QAT" in cell.method:
                torch.save(student.state_dict(), cell_dir / "student.pt")
            acc = evaluate(student, test)
            extra["teacher_accuracy"] = teacher.recorded_accuracy
            return acc, extra

        return self._run_cell(self.out / "cells" / cell.cell_id, cell.cell_id,
                              "quant", digest, build)

    # -- main ---------------------------------------------------------------

    def run(self) -> list[MetricsRecord]:
        plan = self.plan
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "plan.json").write_text(plan.to_json())

        teacher = self.teacher_cell()

        gen_dirs: dict[tuple, Path] = {}
        for cell in plan.cells:
            if cell.data_free:
                key = (cell.gen_mode, cell.seed)
                if key not in gen_dirs:
                    gen_dirs[key] = self.generator_cell(teacher, *key)

        for cell in plan.cells:
            gen_dir = gen_dirs.get((cell.gen_mode, cell.seed)) if cell.data_free else None
            self.quant_cell(teacher, cell, gen_dir)

        self.store.log.save(self.out / "audit.json")
        records = list(self.records.values())
        write_tables(records, self.out)
        return records


def run_plan(plan: ExperimentPlan, out_dir, data_dir=None,
             store: DataStore | None = None) -> list[MetricsRecord]:
    store = store if store is not None else DataStore(data_dir)
    return PlanRunner(plan, out_dir, store).run()


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def quant_records(records) -> list[MetricsRecord]:
    return [r for r in records if r.kind == "quant"]


def render_text_table(records) -> str:
    """Aligned accuracy grid with a DF-QAT >= DF-PTQ flag per pairing."""
    rows = []
    header = ("cell", "method", "bits", "gen-mode", "seed", "accuracy", "qat>=ptq")
    by_id = {r.cell_id: r for r in records}
    for r in sorted(quant_records(records), key=lambda r: r.cell_id):
        e = r.extra
        flag = ""
        if e["method"] == "DF-QAT":
            ptq_id = r.cell_id.replace("DF-QAT", "DF-PTQ")
            if ptq_id in by_id:
                flag = "pass" if r.accuracy >= by_id[ptq_id].accuracy else "FAIL"
        rows.append((r.cell_id, e["method"], str(e["bits"]), e.get("gen_mode", ""),
                     str(e["seed"]), f"{r.accuracy:.4f}", flag))
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_tables(records, out_dir) -> None:
    out_dir = Path(out_dir)
    import csv as _csv

    with open(out_dir / "results.csv", "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["cell", "kind", "method", "bits", "gen_mode", "seed",
                    "accuracy", "wall_clock", "config_digest", "code_version"])
        for r in sorted(records, key=lambda r: (r.kind, r.cell_id)):
            e = r.extra
            w.writerow([r.cell_id, r.kind, e.get("method", ""), e.get("bits", ""),
                        e.get("gen_mode", ""), e.get("seed", ""),
                        f"{r.accuracy:.6f}", f"{r.wall_clock:.2f}",
                        r.config_digest, r.code_version])
    (out_dir / "results.txt").write_text(render_text_table(records))


def load_records(out_dir) -> list[MetricsRecord]:
    """Read back every cell's metrics record from a finished run directory."""
    out_dir = Path(out_dir)
    records = []
    for done in sorted(out_dir.rglob("done.json")):
        payload = json.loads(done.read_text())
        records.append(MetricsRecord.from_dict(payload["record"]))
    if not records:
        raise IngestionError(f"no cell records under {out_dir}")
    return records
