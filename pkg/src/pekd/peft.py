"""Parameter-efficient attachments: bottleneck adapters, deep prompts, LoRA.

An attachment owns its own learnable tensors and, once attached, freezes
every backbone tensor of the host model except the classifier head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

BRANCHES = ("vision", "text")
VARIANTS = ("adapter", "prompt", "lora")


class AttachmentError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck: int | None = None  # None -> width // 4

    def width_for(self, width: int) -> int:
        return self.bottleneck if self.bottleneck is not None else max(1, width // 4)


@dataclass(frozen=True)
class PromptConfig:
    length: int = 4


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    scale: float | None = None  # None -> 2 / rank

    @property
    def gamma(self) -> float:
        return self.scale if self.scale is not None else 2.0 / self.rank


def adapter_forward(h: Tensor, down: Tensor, up: Tensor) -> Tensor:
    """``relu(h @ down) @ up``: down-project, ReLU, up-project."""
    if h.shape[-1] != down.shape[0] or down.shape[1] != up.shape[0]:
        raise ShapeError(
            f"adapter shapes do not chain: h {h.shape}, down {down.shape}, up {up.shape}"
        )
    return dc.matmul(dc.relu(dc.matmul(h, down)), up)


def lora_forward(x: Tensor, w: Tensor, a: Tensor, b: Tensor, gamma: float) -> Tensor:
    """``x @ w + gamma * (x @ a.T) @ b.T`` without forming ``b @ a``.

    ``w`` is (d_in, d_out) in row-vector convention, ``a`` is (r, d_in) and
    ``b`` is (d_out, r), so the low-rank delta is ``b @ a`` transposed.
    """
    d_in, d_out = w.shape
    if a.shape[1] != d_in or b.shape[0] != d_out or a.shape[0] != b.shape[1]:
        raise ShapeError(
            f"LoRA factors do not match: w {w.shape}, a {a.shape}, b {b.shape}"
        )
    base = dc.matmul(x, w)
    low = dc.matmul(dc.matmul(x, dc.transpose(a, (1, 0))), dc.transpose(b, (1, 0)))
    return dc.add(base, dc.scale(low, gamma))


class PeftAttachment:
    """Learnable blocks for one PEFT variant plus the freeze mask it imposes."""

    def __init__(self, variant: str, config, params: dict[str, Tensor]):
        if variant not in VARIANTS:
            raise AttachmentError(f"unknown PEFT variant {variant!r}")
        self.variant = variant
        self.config = config
        self.params = params
        self.mask_prompts = False  # test hook: hide prompt positions from attention

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def block(self, branch: str, layer: int, name: str) -> Tensor | None:
        return self.params.get(f"peft/{branch}.{layer}.{name}")

    def lora(self, branch: str, layer: int) -> dict[str, tuple[Tensor, Tensor]] | None:
        if self.variant != "lora":
            return None
        return {
            m: (self.block(branch, layer, f"{m}.A"), self.block(branch, layer, f"{m}.B"))
            for m in ("q", "k", "v")
        }

    def adapter(self, branch: str, layer: int) -> tuple[Tensor, Tensor] | None:
        if self.variant != "adapter":
            return None
        return self.block(branch, layer, "down"), self.block(branch, layer, "up")

    def prompt(self, branch: str, layer: int) -> Tensor | None:
        if self.variant != "prompt":
            return None
        return self.block(branch, layer, "prompt")

    @property
    def gamma(self) -> float:
        return self.config.gamma

    def config_dict(self) -> dict:
        return {"variant": self.variant, **asdict(self.config)}


def _widths(model) -> dict[str, int]:
    cfg = model.config
    return {"vision": cfg.d_v, "text": cfg.d_t}


def _freeze(model, attachment: PeftAttachment) -> PeftAttachment:
    if getattr(model, "attachment", None) is not None:
        raise AttachmentError("model already carries a PEFT attachment")
    for name, t in model.named_parameters(include_peft=False):
        t.set_trainable(name.startswith("head."))
    model.attachment = attachment
    return attachment


def _materialize(model) -> bool:
    return getattr(model, "materialized", True)


def _normal(rng, shape, std, real: bool) -> Tensor:
    if not real:
        return Tensor(np.broadcast_to(np.float64(0.0), shape), trainable=True)
    return Tensor(rng.normal(0.0, std, size=shape), trainable=True)


def _zeros(shape, real: bool) -> Tensor:
    if not real:
        return Tensor(np.broadcast_to(np.float64(0.0), shape), trainable=True)
    return Tensor(np.zeros(shape), trainable=True)


def attach_adapters(model, cfg: AdapterConfig = AdapterConfig(), seed: int = 0) -> PeftAttachment:
    """Parallel bottleneck adapter on every layer of both branches (up-projection zeroed)."""
    rng = np.random.default_rng(seed)
    real = _materialize(model)
    params = {}
    for branch, width in _widths(model).items():
        r = cfg.width_for(width)
        if not 1 <= r < width:
            raise AttachmentError(f"adapter bottleneck {r} must be in [1, {width})")
        for i in range(model.config.L):
            params[f"peft/{branch}.{i}.down"] = _normal(rng, (width, r), 1.0 / np.sqrt(width), real)
            params[f"peft/{branch}.{i}.up"] = _zeros((r, width), real)
    return _freeze(model, PeftAttachment("adapter", cfg, params))


def attach_prompts(model, cfg: PromptConfig = PromptConfig(), seed: int = 0) -> PeftAttachment:
    """Fresh learnable prompt vectors at the input of every layer of both branches."""
    p = cfg.length
    mc = model.config
    if p < 1:
        raise AttachmentError("prompt length must be >= 1")
    if mc.m + 1 + p > mc.max_positions or mc.n + p > mc.max_positions:
        raise AttachmentError(
            f"{p} prompts overflow sequence capacity {mc.max_positions} "
            f"(vision {mc.m + 1}, text {mc.n})"
        )
    rng = np.random.default_rng(seed)
    real = _materialize(model)
    params = {}
    for branch, width in _widths(model).items():
        for i in range(mc.L):
            params[f"peft/{branch}.{i}.prompt"] = _normal(rng, (p, width), 0.02, real)
    return _freeze(model, PeftAttachment("prompt", cfg, params))


def attach_lora(model, cfg: LoraConfig = LoraConfig(), seed: int = 0) -> PeftAttachment:
    """Low-rank deltas on W_q, W_k, W_v of every attention layer; A ~ N(0, 0.02), B = 0."""
    rng = np.random.default_rng(seed)
    real = _materialize(model)
    params = {}
    for branch, width in _widths(model).items():
        if not 1 <= cfg.rank <= width // 2:
            raise AttachmentError(f"LoRA rank {cfg.rank} must be in [1, {width // 2}]")
        for i in range(model.config.L):
            for m in ("q", "k", "v"):
                params[f"peft/{branch}.{i}.{m}.A"] = _normal(rng, (cfg.rank, width), 0.02, real)
                params[f"peft/{branch}.{i}.{m}.B"] = _zeros((width, cfg.rank), real)
    return _freeze(model, PeftAttachment("lora", cfg, params))


def attach(model, variant: str, cfg=None, seed: int = 0) -> PeftAttachment:
    if variant == "adapter":
        return attach_adapters(model, cfg or AdapterConfig(), seed)
    if variant == "prompt":
        return attach_prompts(model, cfg or PromptConfig(), seed)
    if variant == "lora":
        return attach_lora(model, cfg or LoraConfig(), seed)
    raise AttachmentError(f"unknown PEFT variant {variant!r}")


def detach(model) -> None:
    """Remove the attachment and make every backbone tensor trainable again."""
    model.attachment = None
    for _, t in model.named_parameters(include_peft=False):
        t.set_trainable(True)


def trainable_parameter_count(model, attachment: PeftAttachment | None = None) -> int:
    """Exact number of scalars held in trainable tensors."""
    total = sum(t.size for _, t in model.named_parameters(include_peft=False) if t.trainable)
    att = attachment if attachment is not None else getattr(model, "attachment", None)
    if att is not None:
        total += sum(t.size for _, t in att.named_parameters() if t.trainable)
    return total


def expected_trainable(model_config, variant: str, cfg) -> int:
    """Closed-form PEFT parameter count (classifier head excluded)."""
    L, widths = model_config.L, (model_config.d_v, model_config.d_t)
    if variant == "adapter":
        return sum(L * 2 * w * cfg.width_for(w) for w in widths)
    if variant == "prompt":
        return sum(L * cfg.length * w for w in widths)
    if variant == "lora":
        return sum(L * 3 * cfg.rank * (w + w) for w in widths)
    raise AttachmentError(f"unknown PEFT variant {variant!r}")
