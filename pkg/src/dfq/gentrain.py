"""Data-free training of the conditional generator.

The frozen teacher plays the fixed critic: each step draws fresh (noise,
label) pairs, decodes them to images, and minimizes the cross-entropy
between the conditioning label and the teacher's prediction plus the
batch-norm-statistics matching loss. There is no discriminator update and no
real data anywhere in the loop.
"""

from __future__ import annotations

import copy
import csv
import enum
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn.functional as F

from .bnstats import BnInputCapture, BNStatsTable, bns_loss, extract_reference_stats
from .errors import ContractError, DomainError, NumericError, StructuralError
from .models import ConditionalGenerator, TeacherModel

class LossMode(str, enum.Enum):
    CE_ONLY = "ce"
    BNS_ONLY = "bns"
    CE_PLUS_BNS = "ce+bns"


@dataclass
class GenTrainConfig:
    epochs: int = 200
    batches_per_epoch: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.5  # Adam momentum
    beta2: float = 0.999
    loss_mode: LossMode = LossMode.CE_PLUS_BNS
    bns_weight: float = 1.0
    seed: int = 0
    fidelity_samples: int = 512

    def __post_init__(self):
        self.loss_mode = LossMode(self.loss_mode)
        if min(self.epochs, self.batches_per_epoch, self.batch_size) <= 0:
            raise ContractError("epochs, batches_per_epoch, batch_size must be positive")
        if self.bns_weight < 0:
            raise ContractError(f"bns_weight must be >= 0, got {self.bns_weight}")


# Named schedules: the full-scale recipe plus scaled-down desk/CI profiles.
GEN_PROFILES = {
    "paper": dict(epochs=200, batches_per_epoch=1000, batch_size=128),
    "desk": dict(epochs=60, batches_per_epoch=200, batch_size=128),
    "ci": dict(epochs=10, batches_per_epoch=100, batch_size=128),
}


def gen_config(profile: str, **overrides) -> GenTrainConfig:
    if profile not in GEN_PROFILES:
        raise ContractError(f"unknown profile {profile!r}; known: {sorted(GEN_PROFILES)}")
    kwargs = dict(GEN_PROFILES[profile])
    kwargs.update(overrides)
    return GenTrainConfig(**kwargs)


def conditional_cross_entropy(labels: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if not torch.isfinite(teacher_logits).all():
        raise NumericError("non-finite logits in cross-entropy")
    k = teacher_logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    return F.cross_entropy(teacher_logits, labels)


def sample_latents(batch_size: int, noise_dim: int, num_classes: int,
                   rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Fresh (z, y): standard-normal noise, uniform class labels."""
    z = torch.randn(batch_size, noise_dim, generator=rng)
    y = torch.randint(0, num_classes, (batch_size,), generator=rng)
    return z, y


def generator_loss(g: ConditionalGenerator, teacher, z: torch.Tensor,
                   y: torch.Tensor, cfg: GenTrainConfig,
                   reference: BNStatsTable | None = None):
    """One objective evaluation; returns (total, ce_term, bns_term).

    Both terms are always computed for reporting when the teacher has BN
    layers; the mode only controls which enter the total.
    """
    images = g(z, y)
    bns_term = None
    try:
        if reference is None:
            reference = extract_reference_stats(teacher)
        with BnInputCapture(teacher) as cap:
            logits = teacher(images)
            empirical = cap.stats()
        bns_term = bns_loss(empirical, reference)
    except StructuralError:
        if cfg.loss_mode != LossMode.CE_ONLY:
            raise
        logits = teacher(images)
        bns_term = torch.zeros(())
    ce_term = conditional_cross_entropy(y, logits)

    if cfg.loss_mode == LossMode.CE_ONLY:
        total = ce_term
    elif cfg.loss_mode == LossMode.BNS_ONLY:
        total = cfg.bns_weight * bns_term
    else:
        total = ce_term + cfg.bns_weight * bns_term
    return total, ce_term, bns_term


@torch.no_grad()
def label_fidelity(g: ConditionalGenerator, teacher, n: int, seed: int = 0) -> float:
    """Fraction of samples whose teacher-predicted class equals the label."""
    rng = torch.Generator().manual_seed(seed)
    was_training = g.training
    g.eval()
    hits = 0
    for start in range(0, n, 256):
        b = min(256, n - start)
        z, y = sample_latents(b, g.noise_dim, g.num_classes, rng)
        pred = teacher(g(z, y)).argmax(dim=1)
        hits += (pred == y).sum().item()
    if was_training:
        g.train()
    return hits / n


@dataclass
class EpochStats:
    epoch: int
    total: float
    ce: float
    bns: float
    fidelity: float
    seconds: float


@dataclass
class GenTrainReport:
    config: GenTrainConfig
    rows: list = field(default_factory=list)
    aborted: bool = False
    teacher_digest_before: str = ""
    teacher_digest_after: str = ""

    @property
    def final_fidelity(self) -> float:
        return self.rows[-1].fidelity if self.rows else 0.0

    def moving_average_total(self, window: int, end_epoch: int) -> float:
        sel = [r.total for r in self.rows if r.epoch <= end_epoch][-window:]
        return sum(sel) / len(sel)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "total", "ce", "bns", "fidelity", "seconds"])
            for r in self.rows:
                w.writerow([r.epoch, r.total, r.ce, r.bns, r.fidelity, r.seconds])


class GeneratorStepper:
    """One-objective-step driver, reusable inside the distillation loop.

    Holds the Adam optimizer (optionally restored from a generator
    checkpoint's saved state, with the learning rate reset to the configured
    value) and an RNG for fresh (z, y) draws.
    """

    def __init__(self, g: ConditionalGenerator, teacher, cfg: GenTrainConfig,
                 reference: BNStatsTable | None = None,
                 optimizer_state: dict | None = None, seed: int | None = None):
        self.g = g
        self.teacher = teacher
        self.cfg = cfg
        self.reference = reference if reference is not None else extract_reference_stats(teacher)
        self.opt = torch.optim.Adam(g.parameters(), lr=cfg.lr,
                                    betas=(cfg.beta1, cfg.beta2))
        if optimizer_state is not None:
            self.opt.load_state_dict(optimizer_state)
            for group in self.opt.param_groups:
                group["lr"] = cfg.lr
        self.rng = torch.Generator().manual_seed(cfg.seed if seed is None else seed)

    def step(self):
        z, y = sample_latents(self.cfg.batch_size, self.g.noise_dim,
                              self.g.num_classes, self.rng)
        self.opt.zero_grad()
        total, ce, bns = generator_loss(self.g, self.teacher, z, y,
                                        self.cfg, self.reference)
        if torch.isfinite(total):
            total.backward()
            self.opt.step()
        return total.detach(), ce.detach(), bns.detach()


def train_generator(g: ConditionalGenerator, teacher, cfg: GenTrainConfig,
                    on_epoch=None):
    """Full training run; returns (generator, optimizer_state, report).

    Fresh (z, y) are sampled every batch; the learning rate follows cosine
    decay over the whole run. A non-finite loss aborts the run and restores
    the last end-of-epoch snapshot.
    """
    torch.manual_seed(cfg.seed)
    report = GenTrainReport(config=cfg)
    if isinstance(teacher, TeacherModel):
        report.teacher_digest_before = teacher.digest()
    reference = extract_reference_stats(teacher)
    opt = torch.optim.Adam(g.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    total_steps = cfg.epochs * cfg.batches_per_epoch
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total_steps))
    rng = torch.Generator().manual_seed(cfg.seed)

    snapshot = (copy.deepcopy(g.state_dict()), copy.deepcopy(opt.state_dict()))
    g.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = dict(total=0.0, ce=0.0, bns=0.0)
        diverged = False
        for _ in range(cfg.batches_per_epoch):
            z, y = sample_latents(cfg.batch_size, g.noise_dim, g.num_classes, rng)
            opt.zero_grad()
            try:
                total, ce, bns = generator_loss(g, teacher, z, y, cfg, reference)
            except (NumericError, DomainError):
                # non-finite activations upstream of the loss itself
                diverged = True
                break
            if not torch.isfinite(total):
                diverged = True
                break
            total.backward()
            opt.step()
            sched.step()
            sums["total"] += float(total.detach())
            sums["ce"] += float(ce.detach())
            sums["bns"] += float(bns.detach())
        if diverged:
            g.load_state_dict(snapshot[0])
            opt.load_state_dict(snapshot[1])
            report.aborted = True
            break
        n = cfg.batches_per_epoch
        fid = label_fidelity(g, teacher, cfg.fidelity_samples,
                             seed=cfg.seed * 7919 + epoch)
        row = EpochStats(epoch, sums["total"] / n, sums["ce"] / n,
                         sums["bns"] / n, fid, time.perf_counter() - t0)
        report.rows.append(row)
        snapshot = (copy.deepcopy(g.state_dict()), copy.deepcopy(opt.state_dict()))
        g.train()
        if on_epoch is not None:
            on_epoch(epoch, g, row)

    g.eval()
    if isinstance(teacher, TeacherModel):
        report.teacher_digest_after = teacher.digest()
    return g, opt.state_dict(), report


@dataclass
class SyntheticBatch:
    """Generated images with conditioning labels and teacher soft outputs."""

    images: torch.Tensor
    labels: torch.Tensor
    teacher_probs: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield (self.images[start:start + batch_size],
                   self.labels[start:start + batch_size])


@torch.no_grad()
def sample_synthetic(g: ConditionalGenerator, teacher, n: int,
                     seed: int = 0, batch_size: int = 256) -> SyntheticBatch:
    """Draw n labeled synthetic samples plus the teacher's softmax rows."""
    if n <= 0:
        raise ContractError(f"sample count must be positive, got {n}")
    rng = torch.Generator().manual_seed(seed)
    g.eval()
    images, labels, probs = [], [], []
    for start in range(0, n, batch_size):
        b = min(batch_size, n - start)
        z, y = sample_latents(b, g.noise_dim, g.num_classes, rng)
        x = g(z, y)
        images.append(x)
        labels.append(y)
        probs.append(F.softmax(teacher(x), dim=1))
    return SyntheticBatch(torch.cat(images), torch.cat(labels), torch.cat(probs))
