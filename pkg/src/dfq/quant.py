"""Affine fake-quantization: parameter computation, quantize/dequantize,
straight-through-estimator nodes, min/max PTQ calibration, and the
fake-quantized student model for QAT.

Scheme: asymmetric affine, per-tensor, unsigned integer grid [0, 2^bits - 1],
with the observed range always widened to include zero so that zero is
exactly representable. Rounding is half-away-from-zero everywhere (it decides
zero_point = round(127.5)). Per-channel weight quantization exists behind a
flag, default off.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NumericError, StructuralError

EMA_DECAY = 0.99


def _round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def _round_half_away_scalar(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


@dataclass(frozen=True)
class QuantParams:
    """Affine quantization parameters for one tensor site."""

    num_bits: int
    scale: float
    zero_point: int
    observed_min: float
    observed_max: float

    @property
    def qmin(self) -> int:
        return 0

    @property
    def qmax(self) -> int:
        return (1 << self.num_bits) - 1

    def __post_init__(self):
        if self.num_bits not in (6, 8):
            raise ContractError(f"bit width must be 6 or 8, got {self.num_bits}")
        if not (self.scale > 0):
            raise ContractError(f"scale must be positive, got {self.scale}")
        if not (self.qmin <= self.zero_point <= self.qmax):
            raise ContractError(
                f"zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]"
            )
        if not (self.observed_min <= 0.0 <= self.observed_max):
            raise ContractError(
                "observed range must include zero, got "
                f"[{self.observed_min}, {self.observed_max}]"
            )


def compute_qparams(min_val: float, max_val: float, bits: int) -> QuantParams:
    """Derive affine parameters from an observed range.

    The range is widened to include zero; a degenerate all-zero range falls
    back to scale 1.0 so constant-zero tensors quantize losslessly.
    """
    if not (math.isfinite(min_val) and math.isfinite(max_val)):
        raise NumericError(f"non-finite range [{min_val}, {max_val}]")
    if min_val > max_val:
        raise ContractError(f"min {min_val} exceeds max {max_val}")
    lo = min(float(min_val), 0.0)
    hi = max(float(max_val), 0.0)
    qmax = (1 << bits) - 1
    if hi == lo:  # both exactly zero after forcing zero into range
        return QuantParams(bits, 1.0, 0, lo, hi)
    scale = (hi - lo) / qmax
    zero_point = _round_half_away_scalar(0 - lo / scale)
    zero_point = min(max(zero_point, 0), qmax)
    return QuantParams(bits, scale, zero_point, lo, hi)


def quantize(x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    """q = clamp(round(x / scale) + zero_point, qmin, qmax), as int32."""
    q = _round_half_away(x / p.scale) + p.zero_point
    return q.clamp(p.qmin, p.qmax).to(torch.int32)


def dequantize(q: torch.Tensor, p: QuantParams,
               dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """dq = (q - zero_point) * scale."""
    return (q.to(dtype) - p.zero_point) * p.scale


class _FakeQuantSTE(torch.autograd.Function):
    """Quantize-then-dequantize forward; straight-through gradient gated to
    the observed range (1 inside [observed_min, observed_max], 0 outside)."""

    @staticmethod
    def forward(ctx, x, p: QuantParams):
        ctx.save_for_backward((x >= p.observed_min) & (x <= p.observed_max))
        return dequantize(quantize(x, p), p, dtype=x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (mask,) = ctx.saved_tensors
        return grad_out * mask.to(grad_out.dtype), None


def fake_quant(x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    return _FakeQuantSTE.apply(x, p)


class _FakeQuantPerChannelSTE(torch.autograd.Function):
    """Per-output-channel variant for weight tensors (channel axis 0)."""

    @staticmethod
    def forward(ctx, w, scale, zero_point, lo, hi, qmax):
        shape = (-1,) + (1,) * (w.ndim - 1)
        s = scale.view(shape).to(w.dtype)
        z = zero_point.view(shape).to(w.dtype)
        ctx.save_for_backward(
            (w >= lo.view(shape)) & (w <= hi.view(shape))
        )
        q = (_round_half_away(w / s) + z).clamp(0, qmax)
        return (q - z) * s

    @staticmethod
    def backward(ctx, grad_out):
        (mask,) = ctx.saved_tensors
        return grad_out * mask.to(grad_out.dtype), None, None, None, None, None


def per_channel_ranges(w: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-forced (lo, hi) per output channel of a weight tensor."""
    flat = w.detach().reshape(w.shape[0], -1)
    return flat.min(dim=1).values.clamp_max(0.0), flat.max(dim=1).values.clamp_min(0.0)


def fake_quant_weight_per_channel(w: torch.Tensor, bits: int) -> torch.Tensor:
    lo, hi = per_channel_ranges(w)
    qmax = (1 << bits) - 1
    width = hi - lo
    scale = torch.where(width > 0, width / qmax, torch.ones_like(width))
    zp = _round_half_away(0 - lo / scale).clamp(0, qmax)
    return _FakeQuantPerChannelSTE.apply(w, scale, zp, lo, hi, qmax)


# ---------------------------------------------------------------------------
# Observers
# ---------------------------------------------------------------------------


class MinMaxObserver:
    """Running min/max accumulator for calibration (single-writer)."""

    def __init__(self):
        self.min = math.inf
        self.max = -math.inf
        self.batches = 0

    def update(self, t: torch.Tensor) -> None:
        with torch.no_grad():
            lo = float(t.min())
            hi = float(t.max())
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise NumericError("non-finite values during calibration")
        self.min = min(self.min, lo)
        self.max = max(self.max, hi)
        self.batches += 1

    def merge(self, other: "MinMaxObserver") -> "MinMaxObserver":
        """Element-wise min/max reduction, for parallel calibration shards."""
        merged = MinMaxObserver()
        merged.min = min(self.min, other.min)
        merged.max = max(self.max, other.max)
        merged.batches = self.batches + other.batches
        return merged

    def qparams(self, bits: int) -> QuantParams:
        if self.batches == 0:
            raise ContractError("observer saw no batches")
        return compute_qparams(self.min, self.max, bits)


# ---------------------------------------------------------------------------
# Quantized model spec
# ---------------------------------------------------------------------------


@dataclass
class SiteEntry:
    site: str
    kind: str  # "weight" | "activation"
    bits: int
    # Scalars for per-tensor sites; equal-length lists for per-channel weights.
    scale: object
    zero_point: object
    min: object
    max: object

    def qparams(self) -> QuantParams:
        if isinstance(self.scale, list):
            raise StructuralError(f"site {self.site} is per-channel")
        return QuantParams(self.bits, self.scale, self.zero_point, self.min, self.max)


@dataclass
class QuantizedModelSpec:
    """Per-tensor quantization parameters for every quantizable site."""

    bits: int
    entries: dict  # site -> SiteEntry
    granularity: str = "per-tensor"
    bypass: bool = False

    def sites(self) -> list[str]:
        return list(self.entries)

    def to_json(self) -> str:
        payload = {
            "bits": self.bits,
            "granularity": self.granularity,
            "bypass": self.bypass,
            "entries": [
                {
                    "site": e.site, "kind": e.kind, "bits": e.bits,
                    "scale": e.scale, "zero_point": e.zero_point,
                    "min": e.min, "max": e.max,
                }
                for e in self.entries.values()
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "QuantizedModelSpec":
        payload = json.loads(text)
        entries = {
            row["site"]: SiteEntry(
                row["site"], row["kind"], row["bits"],
                row["scale"], row["zero_point"], row["min"], row["max"],
            )
            for row in payload["entries"]
        }
        return cls(payload["bits"], entries, payload["granularity"], payload["bypass"])


# ---------------------------------------------------------------------------
# Site enumeration
# ---------------------------------------------------------------------------

INPUT_SITE = "input"
OUTPUT_SITE = "output"


def weight_site_names(net: nn.Module) -> list[str]:
    return [
        f"{name}.weight" for name, m in net.named_modules()
        if isinstance(m, (nn.Conv2d, nn.Linear))
    ]


def activation_site_names(net: nn.Module) -> list[str]:
    inner = [name for name, m in net.named_modules() if isinstance(m, nn.ReLU)]
    return [INPUT_SITE] + inner + [OUTPUT_SITE]


def quantizable_sites(net: nn.Module) -> list[tuple[str, str]]:
    """All (site, kind) pairs: conv/linear weights plus designated
    activations (model input, every ReLU output, final logits)."""
    return (
        [(s, "weight") for s in weight_site_names(net)]
        + [(s, "activation") for s in activation_site_names(net)]
    )


def _site_bits(site: str, kind: str, bits: int, keep_io_8bit: bool,
               first_w: str, last_w: str) -> int:
    if not keep_io_8bit:
        return bits
    io_sites = {INPUT_SITE, OUTPUT_SITE, first_w, last_w}
    return max(bits, 8) if site in io_sites else bits


# ---------------------------------------------------------------------------
# PTQ calibration
# ---------------------------------------------------------------------------


def calibrate_ptq(teacher, batches, bits: int, keep_io_8bit: bool = False,
                  per_channel_weights: bool = False) -> QuantizedModelSpec:
    """Min/max calibration over a stream of (synthetic) image batches.

    Weight ranges come from each weight tensor's own extrema; activation
    ranges are the running min/max over all calibration batches at each
    designated site.
    """
    net = getattr(teacher, "net", teacher)
    wnames = weight_site_names(net)
    first_w, last_w = wnames[0], wnames[-1]

    entries: dict = {}
    for name, m in net.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            site = f"{name}.weight"
            site_bits = _site_bits(site, "weight", bits, keep_io_8bit, first_w, last_w)
            w = m.weight.detach()
            if per_channel_weights:
                lo, hi = per_channel_ranges(w)
                qmax = (1 << site_bits) - 1
                width = hi - lo
                scale = torch.where(width > 0, width / qmax, torch.ones_like(width))
                zp = _round_half_away(0 - lo / scale).clamp(0, qmax)
                entries[site] = SiteEntry(
                    site, "weight", site_bits,
                    scale.double().tolist(),
                    [int(v) for v in zp.tolist()],
                    lo.double().tolist(), hi.double().tolist(),
                )
            else:
                p = compute_qparams(float(w.min()), float(w.max()), site_bits)
                entries[site] = SiteEntry(
                    site, "weight", site_bits,
                    p.scale, p.zero_point, p.observed_min, p.observed_max,
                )

    observers = {s: MinMaxObserver() for s in activation_site_names(net)}
    handles = []
    for name, m in net.named_modules():
        if isinstance(m, nn.ReLU):
            handles.append(m.register_forward_hook(
                lambda mod, inp, out, s=name: observers[s].update(out)
            ))
    try:
        n_batches = 0
        with torch.no_grad():
            for batch in batches:
                x = batch[0] if isinstance(batch, (tuple, list)) else batch
                observers[INPUT_SITE].update(x)
                logits = teacher(x)
                observers[OUTPUT_SITE].update(logits)
                n_batches += 1
    finally:
        for h in handles:
            h.remove()
    if n_batches == 0:
        raise ContractError("calibration requires at least one batch")

    for site, obs in observers.items():
        site_bits = _site_bits(site, "activation", bits, keep_io_8bit, first_w, last_w)
        p = obs.qparams(site_bits)
        entries[site] = SiteEntry(
            site, "activation", site_bits,
            p.scale, p.zero_point, p.observed_min, p.observed_max,
        )

    granularity = "per-channel-weights" if per_channel_weights else "per-tensor"
    return QuantizedModelSpec(bits=bits, entries=entries, granularity=granularity)


# ---------------------------------------------------------------------------
# Fake-quantized student
# ---------------------------------------------------------------------------


class WeightFakeQuant(nn.Module):
    """Wraps a conv/linear; quantizes the weight on the fly.

    In training mode the range is re-read from the live weight each forward
    (the weight is what the optimizer moves); stored params refresh on
    :meth:`refresh`. Disabled wrappers call the wrapped module untouched.
    """

    def __init__(self, wrapped: nn.Module, params, enabled: bool = True,
                 per_channel: bool = False):
        super().__init__()
        self.wrapped = wrapped
        self.params = params
        self.enabled = enabled
        self.per_channel = per_channel
        self.bits = params.bits if isinstance(params, SiteEntry) else params.num_bits

    def _quantized_weight(self) -> torch.Tensor:
        w = self.wrapped.weight
        if self.per_channel:
            return fake_quant_weight_per_channel(w, self.bits)
        if self.training:
            with torch.no_grad():
                self.params = compute_qparams(
                    float(w.min()), float(w.max()), self.params.num_bits
                )
        return fake_quant(w, self.params)

    def refresh(self) -> None:
        if not self.per_channel:
            w = self.wrapped.weight
            with torch.no_grad():
                self.params = compute_qparams(
                    float(w.min()), float(w.max()), self.params.num_bits
                )

    def forward(self, x):
        if not self.enabled:
            return self.wrapped(x)
        w = self._quantized_weight()
        m = self.wrapped
        if isinstance(m, nn.Conv2d):
            return F.conv2d(x, w, m.bias, m.stride, m.padding, m.dilation, m.groups)
        return F.linear(x, w, m.bias)


class ActFakeQuant(nn.Module):
    """Fake-quantizes an activation tensor, optionally after an inner module.

    During training the observed range tracks an exponential moving average
    of per-batch min/max (decay 0.99); evaluation freezes it.
    """

    def __init__(self, inner: nn.Module | None, params: QuantParams,
                 enabled: bool = True, ema_decay: float = EMA_DECAY):
        super().__init__()
        self.inner = inner
        self.params = params
        self.enabled = enabled
        self.ema_decay = ema_decay

    def _ema_update(self, x: torch.Tensor) -> None:
        with torch.no_grad():
            lo = float(x.min())
            hi = float(x.max())
        d = self.ema_decay
        new_min = d * self.params.observed_min + (1.0 - d) * lo
        new_max = d * self.params.observed_max + (1.0 - d) * hi
        self.params = compute_qparams(new_min, new_max, self.params.num_bits)

    def forward(self, x):
        if self.inner is not None:
            x = self.inner(x)
        if not self.enabled:
            return x
        if self.training:
            self._ema_update(x)
        return fake_quant(x, self.params)


def _replace_module(root: nn.Module, dotted: str, new: nn.Module) -> None:
    parts = dotted.split(".")
    parent = root
    for p in parts[:-1]:
        parent = getattr(parent, p)
    setattr(parent, parts[-1], new)


class StudentModel(nn.Module):
    """A clone of the teacher with fake-quantization at every covered site.

    With ``bypass=True`` (or all wrappers disabled) the forward pass is the
    teacher's arithmetic path unchanged, so logits match bit-for-bit.
    """

    def __init__(self, base: nn.Module, spec: QuantizedModelSpec,
                 input_fq: ActFakeQuant, output_fq: ActFakeQuant,
                 arch_id: str, num_classes: int, input_shape: tuple):
        super().__init__()
        self.base = base
        self.spec_bits = spec.bits
        self.granularity = spec.granularity
        self.bypass = spec.bypass
        self.input_fq = input_fq
        self.output_fq = output_fq
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)

    def forward(self, x):
        x = self.input_fq(x)
        logits = self.base(x)
        return self.output_fq(logits)

    def _wrappers(self):
        for m in self.modules():
            if isinstance(m, (WeightFakeQuant, ActFakeQuant)):
                yield m

    def set_enabled(self, enabled: bool) -> None:
        for m in self._wrappers():
            m.enabled = enabled

    def refresh_weight_qparams(self) -> None:
        for m in self.modules():
            if isinstance(m, WeightFakeQuant):
                m.refresh()

    def export_spec(self) -> QuantizedModelSpec:
        """Current parameters of every site as a serializable spec."""
        entries: dict = {}
        for name, m in self.named_modules():
            if isinstance(m, WeightFakeQuant):
                site = f"{name.removeprefix('base.')}.weight"
                if self.granularity == "per-channel-weights":
                    e = m.params  # SiteEntry carried through
                    entries[site] = e
                else:
                    p = m.params
                    entries[site] = SiteEntry(site, "weight", p.num_bits, p.scale,
                                              p.zero_point, p.observed_min, p.observed_max)
        for name, m in self.named_modules():
            if isinstance(m, ActFakeQuant):
                if m is self.input_fq:
                    site = INPUT_SITE
                elif m is self.output_fq:
                    site = OUTPUT_SITE
                else:
                    site = name.removeprefix("base.")
                p = m.params
                entries[site] = SiteEntry(site, "activation", p.num_bits, p.scale,
                                          p.zero_point, p.observed_min, p.observed_max)
        return QuantizedModelSpec(self.spec_bits, entries, self.granularity, self.bypass)

    def digest(self) -> str:
        """SHA-256 over network state plus current quantization parameters."""
        import hashlib

        from .models import param_digest

        h = hashlib.sha256()
        h.update(param_digest(self).encode())
        h.update(self.export_spec().to_json().encode())
        return h.hexdigest()


def save_student(student: StudentModel, out_dir) -> None:
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "quant_spec.json").write_text(student.export_spec().to_json())
    torch.save(student.state_dict(), out_dir / "student.pt")


def load_student(ckpt_dir, teacher) -> StudentModel:
    from pathlib import Path

    ckpt_dir = Path(ckpt_dir)
    spec = QuantizedModelSpec.from_json((ckpt_dir / "quant_spec.json").read_text())
    student = apply_quant_spec(teacher, spec)
    state_path = ckpt_dir / "student.pt"
    if state_path.exists():
        student.load_state_dict(torch.load(state_path, weights_only=True))
    return student


def apply_quant_spec(teacher, spec: QuantizedModelSpec) -> StudentModel:
    """Clone the teacher and attach fake-quant nodes per the spec."""
    net = getattr(teacher, "net", teacher)
    base = copy.deepcopy(net)
    for p in base.parameters():
        p.requires_grad_(True)
    base.train(False)

    expected = dict(quantizable_sites(base))
    missing = [s for s in expected if s not in spec.entries]
    if missing:
        raise StructuralError(f"quant spec does not cover sites: {missing}")
    unknown = [s for s in spec.entries if s not in expected]
    if unknown:
        raise StructuralError(f"quant spec names unknown sites: {unknown}")

    enabled = not spec.bypass
    per_channel = spec.granularity == "per-channel-weights"
    for name, m in list(base.named_modules()):
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            entry = spec.entries[f"{name}.weight"]
            params = entry if per_channel else entry.qparams()
            _replace_module(base, name, WeightFakeQuant(
                m, params, enabled=enabled, per_channel=per_channel))
        elif isinstance(m, nn.ReLU):
            entry = spec.entries[name]
            _replace_module(base, name, ActFakeQuant(m, entry.qparams(), enabled=enabled))

    input_fq = ActFakeQuant(None, spec.entries[INPUT_SITE].qparams(), enabled=enabled)
    output_fq = ActFakeQuant(None, spec.entries[OUTPUT_SITE].qparams(), enabled=enabled)
    return StudentModel(
        base, spec, input_fq, output_fq,
        getattr(teacher, "arch_id", "net"),
        getattr(teacher, "num_classes", 0),
        getattr(teacher, "input_shape", ()),
    )
