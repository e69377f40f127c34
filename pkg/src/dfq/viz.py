"""Sample-grid rendering: one row per class, teacher verdict on every tile."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch
import torch.nn.functional as F

from .data import class_names as dataset_class_names
from .errors import ContractError
from .gentrain import sample_latents


@torch.no_grad()
def export_sample_grid(generator, teacher, classes, samples_per_class: int,
                       path, seed: int = 0) -> Path:
    """Render a PNG grid of synthetic samples.

    Rows are the requested classes, columns independent samples. Pixels are
    mapped back from the teacher's normalized input space to display range,
    and each tile is annotated with the teacher's predicted class and
    confidence.
    """
    if samples_per_class <= 0:
        raise ContractError("samples_per_class must be positive")
    classes = list(classes)
    if not classes:
        raise ContractError("need at least one class row")
    names = dataset_class_names(teacher.dataset)

    rng = torch.Generator().manual_seed(seed)
    generator.eval()
    rows = []
    for cls in classes:
        z, _ = sample_latents(samples_per_class, generator.noise_dim,
                              generator.num_classes, rng)
        y = torch.full((samples_per_class,), cls, dtype=torch.long)
        images = generator(z, y)
        probs = F.softmax(teacher(images), dim=1)
        rows.append((cls, images, probs))

    mean = torch.tensor(teacher.mean).view(1, -1, 1, 1)
    std = torch.tensor(teacher.std).view(1, -1, 1, 1)

    n_rows, n_cols = len(classes), samples_per_class
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(1.4 * n_cols, 1.6 * n_rows), squeeze=False)
    for r, (cls, images, probs) in enumerate(rows):
        display = (images * std + mean).clamp(0.0, 1.0)
        for c in range(n_cols):
            ax = axes[r][c]
            img = display[c]
            if img.shape[0] == 1:
                ax.imshow(img[0].numpy(), cmap="gray", vmin=0.0, vmax=1.0)
            else:
                ax.imshow(img.permute(1, 2, 0).numpy())
            pred = int(probs[c].argmax())
            conf = float(probs[c, pred])
            ax.set_title(f"{names[pred]} {conf:.2f}", fontsize=6)
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(names[cls], fontsize=7)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
