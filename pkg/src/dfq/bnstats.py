"""Batch-norm statistics matching.

The teacher's BN layers store per-channel running means and variances of
their inputs, accumulated when the teacher was trained on real data. Feeding
a generator batch through the frozen teacher yields empirical statistics of
the same tensors; the matching loss sums, over every (layer, channel), the
KL divergence between the Gaussians described by the empirical and stored
moments. Driving it down pushes synthetic batches toward the activation
statistics of the original training data.
"""

from __future__ import annotations

import numbers

import torch
import torch.nn as nn
from torch.nn.modules.batchnorm import _BatchNorm

from .errors import ContractError, DomainError, StructuralError

EPS = 1e-6

_NO_BN_MSG = "BNS loss undefined: no batch normalization layers"


class BNStatsTable:
    """Per-(layer, channel) means and variances, keyed by BN layer name."""

    def __init__(self, layers: dict):
        # name -> (mean[C], var[C]); insertion order follows the model.
        self.layers = dict(layers)

    def layer_names(self) -> list[str]:
        return list(self.layers)

    def num_entries(self) -> int:
        return sum(mean.numel() for mean, _ in self.layers.values())

    def entries(self):
        """Iterate (layer, channel, mean, variance) scalars."""
        for name, (mean, var) in self.layers.items():
            for c in range(mean.numel()):
                yield name, c, float(mean[c]), float(var[c])

    def subset(self, names) -> "BNStatsTable":
        return BNStatsTable({n: self.layers[n] for n in names})

    def to_json_rows(self) -> list:
        return [
            {"layer": layer, "channel": channel, "mean": mean, "variance": var}
            for layer, channel, mean, var in self.entries()
        ]


class EmpiricalBNStats(BNStatsTable):
    """Batch statistics of the teacher's BN-layer inputs for one batch."""

    def __init__(self, layers: dict, batch_size: int):
        super().__init__(layers)
        self.batch_size = batch_size


def _bn_modules(model: nn.Module):
    net = getattr(model, "net", model)
    return [
        (name, m) for name, m in net.named_modules()
        if isinstance(m, _BatchNorm) and m.track_running_stats
    ]


def extract_reference_stats(model: nn.Module) -> BNStatsTable:
    """Read the stored running mean/variance of every BN layer."""
    mods = _bn_modules(model)
    if not mods:
        raise StructuralError(_NO_BN_MSG)
    layers = {}
    for name, m in mods:
        var = m.running_var.detach().clone()
        if (var < 0).any():
            raise DomainError(f"negative running variance in BN layer {name!r}")
        layers[name] = (m.running_mean.detach().clone(), var.clamp_min(EPS))
    return BNStatsTable(layers)


class BnInputCapture:
    """Capture per-channel moments of BN-layer inputs during one forward.

    Means and biased variances are reduced over every dimension except the
    channel axis. The captured tensors stay on the autograd graph, so losses
    built from them differentiate back to the batch. BN layers must be in
    evaluation mode: running statistics are read, never written.
    """

    def __init__(self, model: nn.Module):
        self._mods = _bn_modules(model)
        if not self._mods:
            raise StructuralError(_NO_BN_MSG)
        self._handles = []
        self._stats: dict = {}
        self.batch_size = 0

    def __enter__(self):
        for name, m in self._mods:
            if m.training:
                raise ContractError(
                    f"BN layer {name!r} is in training mode; capture requires "
                    "evaluation mode so running statistics stay untouched"
                )
            self._handles.append(
                m.register_forward_pre_hook(self._make_hook(name))
            )
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles.clear()
        return False

    def _make_hook(self, name):
        def hook(module, inputs):
            x = inputs[0]
            if x.shape[0] < 2:
                raise ContractError(
                    f"empirical BN statistics need batch size >= 2, got {x.shape[0]}"
                )
            self.batch_size = x.shape[0]
            dims = [d for d in range(x.ndim) if d != 1]
            mean = x.mean(dim=dims)
            var = x.var(dim=dims, unbiased=False)
            self._stats[name] = (mean, var)
        return hook

    def stats(self) -> EmpiricalBNStats:
        if len(self._stats) != len(self._mods):
            missing = [n for n, _ in self._mods if n not in self._stats]
            raise StructuralError(f"no statistics captured for BN layers: {missing}")
        return EmpiricalBNStats(dict(self._stats), self.batch_size)


def capture_empirical_stats(model: nn.Module, batch: torch.Tensor) -> EmpiricalBNStats:
    """Run one forward pass and return the BN-input moments for the batch."""
    if batch.shape[0] < 2:
        raise ContractError(
            f"empirical BN statistics need batch size >= 2, got {batch.shape[0]}"
        )
    with BnInputCapture(model) as cap:
        model(batch)
        return cap.stats()


def gaussian_kl(mu_hat, var_hat, mu, var, eps: float = EPS):
    """KL divergence between N(mu_hat, var_hat) and N(mu, var), elementwise.

    ((mu_hat - mu)^2 + var_hat) / (2 var) - log(sigma_hat / sigma) - 1/2,
    with var_hat floored at ``eps`` so constant channels (zero variance)
    stay finite. Accepts scalars or same-shape tensors; python-number inputs
    are computed in float64.
    """
    scalar_in = all(isinstance(v, numbers.Number) for v in (mu_hat, var_hat, mu, var))
    dtype = torch.float64 if scalar_in else None
    mu_hat = torch.as_tensor(mu_hat, dtype=dtype)
    var_hat = torch.as_tensor(var_hat, dtype=dtype)
    mu = torch.as_tensor(mu, dtype=dtype)
    var = torch.as_tensor(var, dtype=dtype)
    if not bool((torch.as_tensor(var) > 0).all()):
        raise DomainError("reference variance must be > 0")
    if not bool((var_hat >= 0).all()):
        raise DomainError("empirical variance must be >= 0")
    vh = var_hat.clamp_min(eps)
    return ((mu_hat - mu) ** 2 + vh) / (2.0 * var) - 0.5 * torch.log(vh / var) - 0.5


def bns_loss(empirical: BNStatsTable, reference: BNStatsTable,
             eps: float = EPS) -> torch.Tensor:
    """Sum of per-channel Gaussian KLs over all (layer, channel) pairs."""
    emp_names, ref_names = set(empirical.layers), set(reference.layers)
    if emp_names != ref_names:
        raise StructuralError(
            "BN stats key mismatch; "
            f"missing from empirical: {sorted(ref_names - emp_names)}, "
            f"missing from reference: {sorted(emp_names - ref_names)}"
        )
    total = None
    for name in reference.layers:
        mu_hat, var_hat = empirical.layers[name]
        mu, var = reference.layers[name]
        if mu_hat.shape != mu.shape:
            raise StructuralError(
                f"channel count mismatch at layer {name!r}: "
                f"{tuple(mu_hat.shape)} vs {tuple(mu.shape)}"
            )
        term = gaussian_kl(mu_hat, var_hat, mu, var, eps=eps).sum()
        total = term if total is None else total + term
    return total
