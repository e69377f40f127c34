"""Model contracts: frozen teacher classifiers, the conditional generator,
desk-scale reference architectures, checkpoints, and parameter digests.

The teacher is a plain BN-bearing CNN wrapped in :class:`TeacherModel`, which
freezes parameters, pins evaluation mode (so batch-norm running statistics
never move), and checks input shapes. The generator decodes a noise vector
into an image, with the class label injected purely through conditional batch
normalization; its tanh output is affinely mapped into the teacher's
normalized input range.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.modules.batchnorm import _BatchNorm

from .data import DeskDataset, normalization_bounds
from .errors import ContractError, IngestionError

# ---------------------------------------------------------------------------
# Digests and small helpers
# ---------------------------------------------------------------------------


def param_digest(module: nn.Module) -> str:
    """SHA-256 over the module's full state (parameters and buffers)."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def evaluate_top1(model: nn.Module, images: torch.Tensor, labels: torch.Tensor,
                  batch_size: int = 512) -> float:
    """Fraction of argmax matches over the given tensors."""
    was_training = model.training
    model.eval()
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        logits = model(images[start:start + batch_size])
        correct += (logits.argmax(dim=1) == labels[start:start + batch_size]).sum().item()
    if was_training:
        model.train()
    return correct / images.shape[0]


def bn_layer_names(module: nn.Module) -> list[str]:
    """Ordered names of batch-norm layers that track running statistics."""
    return [
        name for name, m in module.named_modules()
        if isinstance(m, _BatchNorm) and m.track_running_stats
    ]


# ---------------------------------------------------------------------------
# Desk architectures
# ---------------------------------------------------------------------------


class ConvBNAct(nn.Module):
    """conv -> batch norm -> relu, with an optional trailing 2x2 max-pool."""

    def __init__(self, cin: int, cout: int, pool: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.ReLU()
        self.pool = nn.MaxPool2d(2) if pool else nn.Identity()

    def forward(self, x):
        return self.pool(self.act(self.bn(self.conv(x))))


class SmallBnCnn(nn.Module):
    """Three conv/BN blocks plus a linear head; the fast-CI teacher."""

    def __init__(self, num_classes: int, in_channels: int = 1,
                 widths: tuple = (12, 24, 48)):
        super().__init__()
        w1, w2, w3 = widths
        self.block1 = ConvBNAct(in_channels, w1, pool=True)
        self.block2 = ConvBNAct(w1, w2, pool=True)
        self.block3 = ConvBNAct(w2, w3)
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(w3, num_classes)

    def forward(self, x):
        x = self.block3(self.block2(self.block1(x)))
        return self.head(self.gap(x).flatten(1))


class DeepBnCnn(nn.Module):
    """Five narrow conv/BN blocks; deeper chain of quantization sites."""

    def __init__(self, num_classes: int, in_channels: int = 1,
                 widths: tuple = (8, 12, 16, 24, 32)):
        super().__init__()
        w1, w2, w3, w4, w5 = widths
        self.block1 = ConvBNAct(in_channels, w1)
        self.block2 = ConvBNAct(w1, w2, pool=True)
        self.block3 = ConvBNAct(w2, w3)
        self.block4 = ConvBNAct(w3, w4, pool=True)
        self.block5 = ConvBNAct(w4, w5)
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(w5, num_classes)

    def forward(self, x):
        x = self.block1(x)
        x = self.block3(self.block2(x))
        x = self.block5(self.block4(x))
        return self.head(self.gap(x).flatten(1))


class BasicBlock(nn.Module):
    """Pre-activationless residual block for the CIFAR-style ResNet."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.act1 = nn.ReLU()
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act2 = nn.ReLU()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.act1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act2(out + self.shortcut(x))


class ResNetSmall(nn.Module):
    """ResNet-style CIFAR classifier (2 blocks per stage, widths 16/32/64)."""

    def __init__(self, num_classes: int, in_channels: int = 3):
        super().__init__()
        self.stem = ConvBNAct(in_channels, 16)
        self.stage1 = nn.Sequential(BasicBlock(16, 16), BasicBlock(16, 16))
        self.stage2 = nn.Sequential(BasicBlock(16, 32, stride=2), BasicBlock(32, 32))
        self.stage3 = nn.Sequential(BasicBlock(32, 64, stride=2), BasicBlock(64, 64))
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(64, num_classes)

    def forward(self, x):
        x = self.stage3(self.stage2(self.stage1(self.stem(x))))
        return self.head(self.gap(x).flatten(1))


ARCHS = {
    "bncnn": lambda k, c: SmallBnCnn(k, c),
    "bncnn_narrow": lambda k, c: SmallBnCnn(k, c, widths=(8, 16, 32)),
    "bncnn_tiny": lambda k, c: SmallBnCnn(k, c, widths=(4, 8, 16)),
    "bncnn_deep": lambda k, c: DeepBnCnn(k, c),
    "resnet14": lambda k, c: ResNetSmall(k, c),
}


def build_arch(arch_id: str, num_classes: int, in_channels: int) -> nn.Module:
    if arch_id not in ARCHS:
        raise ContractError(f"unknown architecture {arch_id!r}; known: {sorted(ARCHS)}")
    return ARCHS[arch_id](num_classes, in_channels)


# ---------------------------------------------------------------------------
# Frozen teacher
# ---------------------------------------------------------------------------


class TeacherModel(nn.Module):
    """A frozen classifier exposing logits and batch-norm internals.

    Parameters are gradient-free and the module is pinned to evaluation mode:
    ``train()`` is a no-op, so batch-norm always uses its stored statistics
    and nothing in the model can mutate during downstream training runs.
    Gradients still flow through the *input*, which is what generator
    training needs.
    """

    def __init__(self, net: nn.Module, arch_id: str, num_classes: int,
                 input_shape: tuple, dataset: str, recorded_accuracy: float,
                 mean: tuple, std: tuple):
        super().__init__()
        self.net = net
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.dataset = dataset
        self.recorded_accuracy = recorded_accuracy
        self.mean = tuple(mean)
        self.std = tuple(std)
        self.bn_layers = bn_layer_names(net)
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    @property
    def frozen(self) -> bool:
        return True

    def train(self, mode: bool = True):
        # Frozen: evaluation mode is permanent.
        return super().train(False)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        if tuple(batch.shape[1:]) != self.input_shape:
            raise ContractError(
                f"teacher expects input shape (B, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(batch.shape)}"
            )
        return self.net(batch)

    def digest(self) -> str:
        return param_digest(self.net)

    def manifest(self) -> dict:
        return {
            "kind": "teacher",
            "arch": self.arch_id,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "dataset": self.dataset,
            "recorded_accuracy": self.recorded_accuracy,
            "mean": list(self.mean),
            "std": list(self.std),
            "param_digest": self.digest(),
        }


def save_teacher(teacher: TeacherModel, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(teacher.net.state_dict(), out_dir / "weights.pt")
    (out_dir / "manifest.json").write_text(json.dumps(teacher.manifest(), indent=2))
    return out_dir


def load_teacher(ckpt_dir) -> TeacherModel:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"no teacher manifest at {manifest_path}")
    m = json.loads(manifest_path.read_text())
    net = build_arch(m["arch"], m["num_classes"], m["input_shape"][0])
    net.load_state_dict(torch.load(ckpt_dir / "weights.pt", weights_only=True))
    teacher = TeacherModel(
        net, m["arch"], m["num_classes"], tuple(m["input_shape"]), m["dataset"],
        m["recorded_accuracy"], tuple(m["mean"]), tuple(m["std"]),
    )
    if teacher.digest() != m["param_digest"]:
        raise IngestionError(
            f"teacher checkpoint digest mismatch in {ckpt_dir}: "
            f"expected {m['param_digest']}, got {teacher.digest()}"
        )
    return teacher


# ---------------------------------------------------------------------------
# Conditional generator
# ---------------------------------------------------------------------------


class CondBatchNorm2d(nn.Module):
    """Batch norm whose affine scale/shift row is selected by class label."""

    def __init__(self, num_features: int, num_classes: int):
        super().__init__()
        self.num_features = num_features
        self.num_classes = num_classes
        self.bn = nn.BatchNorm2d(num_features, affine=False)
        self.gamma = nn.Embedding(num_classes, num_features)
        self.beta = nn.Embedding(num_classes, num_features)
        nn.init.ones_(self.gamma.weight)
        nn.init.zeros_(self.beta.weight)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        out = self.bn(x)
        g = self.gamma(y).unsqueeze(-1).unsqueeze(-1)
        b = self.beta(y).unsqueeze(-1).unsqueeze(-1)
        return g * out + b


class GenBlock(nn.Module):
    """2x nearest-neighbor upsample -> conv -> conditional BN -> relu."""

    def __init__(self, cin: int, cout: int, num_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.cbn = CondBatchNorm2d(cout, num_classes)

    def forward(self, x, y):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.cbn(self.conv(x), y))


class ConditionalGenerator(nn.Module):
    """Decodes (noise, label) into an image in the teacher's input space.

    The label enters only through conditional batch normalization. The tanh
    output in [-1, 1] is mapped affinely onto the per-channel bounds of the
    teacher's normalized pixel range, so outputs are always valid inputs.
    """

    def __init__(self, noise_dim: int, num_classes: int, out_shape: tuple,
                 out_lo: torch.Tensor, out_hi: torch.Tensor, base: int = 24):
        super().__init__()
        c, h, w = out_shape
        if h % 4 or w % 4:
            raise ContractError(f"output spatial dims must be multiples of 4, got {(h, w)}")
        self.noise_dim = noise_dim
        self.num_classes = num_classes
        self.out_shape = tuple(out_shape)
        self.base = base
        self.h0, self.w0 = h // 4, w // 4
        self.proj_ch = base * 2
        self.fc = nn.Linear(noise_dim, self.proj_ch * self.h0 * self.w0)
        self.cbn0 = CondBatchNorm2d(self.proj_ch, num_classes)
        self.block1 = GenBlock(self.proj_ch, self.proj_ch, num_classes)
        self.block2 = GenBlock(self.proj_ch, base, num_classes)
        self.to_img = nn.Conv2d(base, c, 3, padding=1)
        self.register_buffer("out_lo", out_lo.view(1, c, 1, 1).clone())
        self.register_buffer("out_hi", out_hi.view(1, c, 1, 1).clone())

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.noise_dim:
            raise ContractError(
                f"noise must be (B, {self.noise_dim}), got {tuple(z.shape)}"
            )
        if not torch.isfinite(z).all():
            raise ContractError("noise contains non-finite values")
        if y.shape != z.shape[:1]:
            raise ContractError(f"labels must be (B,), got {tuple(y.shape)}")
        if y.numel() and (y.min() < 0 or y.max() >= self.num_classes):
            raise ContractError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{int(y.min())}, {int(y.max())}]"
            )
        h = self.fc(z).view(-1, self.proj_ch, self.h0, self.w0)
        h = F.relu(self.cbn0(h, y))
        h = self.block1(h, y)
        h = self.block2(h, y)
        t = torch.tanh(self.to_img(h))
        return self.out_lo + (t + 1.0) * 0.5 * (self.out_hi - self.out_lo)

    def manifest(self) -> dict:
        return {
            "kind": "generator",
            "noise_dim": self.noise_dim,
            "num_classes": self.num_classes,
            "out_shape": list(self.out_shape),
            "base": self.base,
            "param_digest": param_digest(self),
        }


def build_generator_for_teacher(teacher: TeacherModel, noise_dim: int = 128,
                                base: int = 24) -> ConditionalGenerator:
    lo, hi = normalization_bounds(teacher.dataset)
    return ConditionalGenerator(
        noise_dim, teacher.num_classes, teacher.input_shape, lo, hi, base=base
    )


def save_generator(gen: ConditionalGenerator, out_dir,
                   optimizer_state: dict | None = None,
                   extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"model": gen.state_dict()}
    if optimizer_state is not None:
        payload["optimizer"] = optimizer_state
    torch.save(payload, out_dir / "weights.pt")
    manifest = gen.manifest()
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir


def load_generator(ckpt_dir):
    """Load a generator checkpoint; returns (generator, optimizer_state|None)."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"no generator manifest at {manifest_path}")
    m = json.loads(manifest_path.read_text())
    c = m["out_shape"][0]
    gen = ConditionalGenerator(
        m["noise_dim"], m["num_classes"], tuple(m["out_shape"]),
        torch.zeros(c), torch.ones(c),
    )
    payload = torch.load(ckpt_dir / "weights.pt", weights_only=True)
    gen.load_state_dict(payload["model"])
    return gen, payload.get("optimizer")


# ---------------------------------------------------------------------------
# Desk teacher training
# ---------------------------------------------------------------------------


@dataclass
class TeacherConfig:
    dataset: str = "shapes10"
    arch: str = "bncnn"
    epochs: int = 4
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0


def train_teacher_net(net: nn.Module, train_set: DeskDataset,
                      test_set: DeskDataset, cfg: TeacherConfig) -> float:
    """Supervised training of a raw classifier net; returns test accuracy."""
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, cfg.epochs * steps_per_epoch)
    )
    net.train()
    for epoch in range(cfg.epochs):
        for xb, yb in train_set.batches(cfg.batch_size, shuffle=True,
                                        seed=cfg.seed * 1000 + epoch):
            opt.zero_grad()
            loss = F.cross_entropy(net(xb), yb)
            loss.backward()
            opt.step()
            sched.step()
    net.eval()
    return evaluate_top1(net, test_set.images, test_set.labels)


def build_desk_teacher(cfg: TeacherConfig, train_set: DeskDataset,
                       test_set: DeskDataset) -> TeacherModel:
    """Train a desk-scale BN classifier and wrap it as a frozen teacher."""
    if cfg.epochs <= 0:
        raise ContractError("teacher must be trained before export")
    in_channels = train_set.image_shape[0]
    net = build_arch(cfg.arch, train_set.num_classes, in_channels)
    acc = train_teacher_net(net, train_set, test_set, cfg)
    return TeacherModel(
        net, cfg.arch, train_set.num_classes, train_set.image_shape,
        train_set.name, acc, train_set.mean, train_set.std,
    )
