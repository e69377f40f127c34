"""Knowledge-distillation losses and the quantization-aware training loops.

The student is a fake-quantized clone of the teacher. Data-free QAT draws a
fresh synthetic batch every step (optionally advancing the conditional
generator by one of its own objective steps first) and minimizes the
soft-target cross-entropy between teacher and student outputs; gradients
reach the student's weights through the straight-through estimator. The
data-dependent variant runs the same loop on real training images and serves
as the reference column.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch.nn.modules.batchnorm import _BatchNorm

from .data import DeskDataset
from .errors import ContractError
from .gentrain import (GenTrainConfig, GeneratorStepper, conditional_cross_entropy,
                       sample_latents)
from .models import TeacherModel, evaluate_top1
from .quant import StudentModel


@dataclass
class KDConfig:
    lam: float = 1.0  # weight of the soft-target term; data-free mode needs 1
    temperature: float = 1.0
    epochs: int = 50
    batches_per_epoch: int = 1000
    batch_size: int = 128
    lr: float = 1e-4
    momentum: float = 0.9  # Nesterov
    continue_generator_updates: bool = True
    freeze_bn_stats: bool = True  # keep the clone's BN statistics fixed
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        if self.epochs < 0 or self.batches_per_epoch <= 0 or self.batch_size <= 0:
            raise ContractError("schedule counts must be positive")


KD_PROFILES = {
    "paper": dict(epochs=50, batches_per_epoch=1000, batch_size=128),
    "desk": dict(epochs=30, batches_per_epoch=200, batch_size=128),
    "ci": dict(epochs=8, batches_per_epoch=100, batch_size=128),
}


def kd_config(profile: str, **overrides) -> KDConfig:
    if profile not in KD_PROFILES:
        raise ContractError(f"unknown profile {profile!r}; known: {sorted(KD_PROFILES)}")
    kwargs = dict(KD_PROFILES[profile])
    kwargs.update(overrides)
    return KDConfig(**kwargs)


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
            cfg: KDConfig) -> torch.Tensor:
    """Soft-target cross-entropy between temperature-softened outputs.

    The teacher distribution is a constant target (detached); gradients flow
    to the student logits only. No temperature-squared rescaling is applied.
    """
    if cfg.temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {cfg.temperature}")
    if teacher_logits.shape != student_logits.shape:
        raise ContractError(
            f"logit shapes differ: {tuple(teacher_logits.shape)} vs "
            f"{tuple(student_logits.shape)}"
        )
    t = cfg.temperature
    target = F.softmax(teacher_logits.detach() / t, dim=1)
    log_pred = F.log_softmax(student_logits / t, dim=1)
    return -(target * log_pred).sum(dim=1).mean()


def kd_mixed_loss(labels: torch.Tensor, teacher_logits: torch.Tensor,
                  student_logits: torch.Tensor, cfg: KDConfig) -> torch.Tensor:
    """(1 - lambda) * H(y, student) + lambda * H(teacher, student).

    The endpoints reduce exactly to plain label cross-entropy and to
    :func:`kd_loss` respectively.
    """
    if cfg.lam == 0.0:
        return conditional_cross_entropy(labels, student_logits)
    if cfg.lam == 1.0:
        return kd_loss(teacher_logits, student_logits, cfg)
    ce = conditional_cross_entropy(labels, student_logits)
    soft = kd_loss(teacher_logits, student_logits, cfg)
    return (1.0 - cfg.lam) * ce + cfg.lam * soft


@dataclass
class DistillEpoch:
    epoch: int
    kd: float
    accuracy: float
    gen_total: float
    seconds: float


@dataclass
class DistillReport:
    config: KDConfig
    mode: str
    rows: list = field(default_factory=list)
    aborted: bool = False
    teacher_digest_before: str = ""
    teacher_digest_after: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].accuracy if self.rows else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "kd", "accuracy", "gen_total", "seconds"])
            for r in self.rows:
                w.writerow([r.epoch, r.kd, r.accuracy, r.gen_total, r.seconds])


def _run_qat(student: StudentModel, teacher, cfg: KDConfig, mode: str,
             batch_source, gen_stepper: GeneratorStepper | None,
             eval_images, eval_labels) -> DistillReport:
    report = DistillReport(config=cfg, mode=mode)
    if isinstance(teacher, TeacherModel):
        report.teacher_digest_before = teacher.digest()
    if cfg.epochs == 0:
        if isinstance(teacher, TeacherModel):
            report.teacher_digest_after = teacher.digest()
        return report

    torch.manual_seed(cfg.seed)
    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr,
                          momentum=cfg.momentum, nesterov=True)
    total_steps = cfg.epochs * cfg.batches_per_epoch
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total_steps))

    snapshot = (copy.deepcopy(student.state_dict()), copy.deepcopy(opt.state_dict()))
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        kd_sum = 0.0
        gen_sum = 0.0
        diverged = False
        student.train()
        if cfg.freeze_bn_stats:
            # weights keep training through the STE; normalization stays on
            # the stored real-data statistics in both training and evaluation
            for m in student.modules():
                if isinstance(m, _BatchNorm):
                    m.eval()
        for step in range(cfg.batches_per_epoch):
            if gen_stepper is not None:
                g_total, _, _ = gen_stepper.step()
                gen_sum += float(g_total)
            x = batch_source(epoch, step)
            with torch.no_grad():
                t_logits = teacher(x)
            opt.zero_grad()
            loss = kd_loss(t_logits, student(x), cfg)
            if not torch.isfinite(loss):
                diverged = True
                break
            loss.backward()
            opt.step()
            sched.step()
            kd_sum += float(loss.detach())
        if diverged:
            student.load_state_dict(snapshot[0])
            opt.load_state_dict(snapshot[1])
            report.aborted = True
            break
        n = cfg.batches_per_epoch
        acc = (evaluate_top1(student, eval_images, eval_labels)
               if eval_images is not None else float("nan"))
        report.rows.append(DistillEpoch(
            epoch, kd_sum / n, acc, gen_sum / n if gen_stepper else float("nan"),
            time.perf_counter() - t0,
        ))
        snapshot = (copy.deepcopy(student.state_dict()), copy.deepcopy(opt.state_dict()))

    student.refresh_weight_qparams()
    student.eval()
    if isinstance(teacher, TeacherModel):
        report.teacher_digest_after = teacher.digest()
    return report


def train_data_free_qat(student: StudentModel, teacher, generator, cfg: KDConfig,
                        eval_images=None, eval_labels=None,
                        gen_cfg: GenTrainConfig | None = None,
                        gen_optimizer_state: dict | None = None):
    """Distill the fake-quantized student on freshly generated samples.

    Every batch draws new (z, y); with ``continue_generator_updates`` the
    generator takes one of its own objective steps per student step, with its
    optimizer state carried over from pre-training.
    """
    if cfg.lam != 1.0:
        raise ContractError(
            "data-free distillation requires lambda = 1 "
            "(ground-truth labels for synthetic samples do not exist)"
        )
    stepper = None
    if cfg.continue_generator_updates:
        if gen_cfg is None:
            gen_cfg = GenTrainConfig(batch_size=cfg.batch_size, seed=cfg.seed)
        stepper = GeneratorStepper(generator, teacher, gen_cfg,
                                   optimizer_state=gen_optimizer_state,
                                   seed=cfg.seed + 1)
    rng = torch.Generator().manual_seed(cfg.seed + 2)
    generator.train()

    def batch_source(epoch, step):
        z, y = sample_latents(cfg.batch_size, generator.noise_dim,
                              generator.num_classes, rng)
        with torch.no_grad():
            return generator(z, y).detach()

    report = _run_qat(student, teacher, cfg, "data-free", batch_source,
                      stepper, eval_images, eval_labels)
    generator.eval()
    return student, report


def train_data_dependent_qat(student: StudentModel, teacher,
                             train_set: DeskDataset, cfg: KDConfig,
                             eval_images=None, eval_labels=None):
    """Same distillation loop with real training images in place of G(z, y)."""
    if len(train_set) == 0:
        raise ContractError("training split is empty")
    order_rng = torch.Generator().manual_seed(cfg.seed + 3)

    state = {"perm": None, "pos": 0}

    def batch_source(epoch, step):
        n = len(train_set)
        if state["perm"] is None or state["pos"] + cfg.batch_size > n:
            state["perm"] = torch.randperm(n, generator=order_rng)
            state["pos"] = 0
        idx = state["perm"][state["pos"]:state["pos"] + cfg.batch_size]
        state["pos"] += cfg.batch_size
        return train_set.images[idx]

    return student, _run_qat(student, teacher, cfg, "data-dependent",
                             batch_source, None, eval_images, eval_labels)
