"""Desk-scale dual-encoder classifier.

A vision transformer over pre-extracted patch features (with a learnable
classification token) and a text transformer over token ids, each projected
into a shared space; a linear head scores the concatenated embeddings.
Layers are pre-norm with GELU feed-forward blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .peft import PeftAttachment, adapter_forward, lora_forward

PAD_ID = 0
MASK_VALUE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    L: int = 4
    d_v: int = 64
    d_t: int = 64
    d: int = 32
    heads: int = 4
    m: int = 16
    n: int = 24
    vocab: int = 256
    C: int = 2
    mlp_ratio: int = 2
    max_positions: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.C < 2:
            raise ValueError("C must be >= 2")
        if self.d_v % self.heads or self.d_t % self.heads:
            raise ValueError(f"widths {self.d_v}/{self.d_t} not divisible by {self.heads} heads")
        if self.m + 1 > self.max_positions or self.n > self.max_positions:
            raise ValueError("sequence lengths exceed max_positions")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown encoder keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    patches: np.ndarray  # (B, m, d_v)
    tokens: np.ndarray  # (B, n) int, PAD_ID padded at the end
    labels: np.ndarray | None = None  # (B,) in {0, 1}
    ids: np.ndarray | None = None

    def __len__(self) -> int:
        return self.patches.shape[0]


class _Init:
    def __init__(self, rng: np.random.Generator | None):
        self.rng = rng

    def __call__(self, shape, std: float) -> Tensor:
        if self.rng is None:
            return Tensor(np.broadcast_to(np.float64(0.0), shape), trainable=True)
        return Tensor(self.rng.normal(0.0, std, size=shape), trainable=True)

    def const(self, shape, value: float) -> Tensor:
        if self.rng is None:
            return Tensor(np.broadcast_to(np.float64(value), shape), trainable=True)
        return Tensor(np.full(shape, value, dtype=np.float64), trainable=True)


class TransformerLayer:
    """Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(x))."""

    names = (
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
        "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    )

    def __init__(self, width: int, heads: int, mlp_ratio: int, init: _Init):
        self.width = width
        self.heads = heads
        hidden = width * mlp_ratio
        fan = 1.0 / np.sqrt(width)
        self.params = {
            "ln1.g": init.const((width,), 1.0),
            "ln1.b": init.const((width,), 0.0),
            "attn.wq": init((width, width), fan),
            "attn.bq": init.const((width,), 0.0),
            "attn.wk": init((width, width), fan),
            "attn.bk": init.const((width,), 0.0),
            "attn.wv": init((width, width), fan),
            "attn.bv": init.const((width,), 0.0),
            "attn.wo": init((width, width), fan),
            "attn.bo": init.const((width,), 0.0),
            "ln2.g": init.const((width,), 1.0),
            "ln2.b": init.const((width,), 0.0),
            "mlp.w1": init((width, hidden), fan),
            "mlp.b1": init.const((hidden,), 0.0),
            "mlp.w2": init((hidden, width), 1.0 / np.sqrt(hidden)),
            "mlp.b2": init.const((width,), 0.0),
        }

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _project(x: Tensor, w: Tensor, b: Tensor, lora, gamma: float) -> Tensor:
    if lora is None:
        return dc.add(dc.matmul(x, w), b)
    a, bb = lora
    return dc.add(lora_forward(x, w, a, bb, gamma), b)


def attention(
    x: Tensor,
    layer: TransformerLayer,
    mask: np.ndarray | None = None,
    lora: dict | None = None,
    gamma: float = 1.0,
) -> Tensor:
    """Multi-head scaled dot-product self-attention with output projection.

    ``mask`` is additive, broadcastable to (B, heads, S, S). With ``lora``,
    the query/key/value projections carry their low-rank deltas.
    """
    if x.shape[-1] != layer.width:
        raise ShapeError(f"attention input width {x.shape[-1]} != layer width {layer.width}")
    B, S, D = x.shape
    H = layer.heads
    dk = D // H
    lora = lora or {}
    q = _project(x, layer["attn.wq"], layer["attn.bq"], lora.get("q"), gamma)
    k = _project(x, layer["attn.wk"], layer["attn.bk"], lora.get("k"), gamma)
    v = _project(x, layer["attn.wv"], layer["attn.bv"], lora.get("v"), gamma)
    q = dc.transpose(dc.reshape(q, (B, S, H, dk)), (0, 2, 1, 3))
    kt = dc.transpose(dc.reshape(k, (B, S, H, dk)), (0, 2, 3, 1))
    v = dc.transpose(dc.reshape(v, (B, S, H, dk)), (0, 2, 1, 3))
    scores = dc.scale(dc.matmul(q, kt), 1.0 / np.sqrt(dk))
    if mask is not None:
        scores = dc.add(scores, Tensor(mask))
    weights = dc.softmax(scores, axis=-1)
    out = dc.reshape(dc.transpose(dc.matmul(weights, v), (0, 2, 1, 3)), (B, S, D))
    return dc.add(dc.matmul(out, layer["attn.wo"]), layer["attn.bo"])


def layer_forward(x, layer, mask=None, lora=None, gamma=1.0, eps=1e-5) -> Tensor:
    h = dc.layer_norm(x, layer["ln1.g"], layer["ln1.b"], eps)
    x = dc.add(x, attention(h, layer, mask, lora, gamma))
    h = dc.layer_norm(x, layer["ln2.g"], layer["ln2.b"], eps)
    h = dc.gelu(dc.add(dc.matmul(h, layer["mlp.w1"]), layer["mlp.b1"]))
    return dc.add(x, dc.add(dc.matmul(h, layer["mlp.w2"]), layer["mlp.b2"]))


class DualEncoderModel:
    """Vision branch, text branch, projections and classification head.

    ``materialize=False`` builds zero-stride placeholder tensors: shapes and
    parameter counts are exact, but no memory is spent (used for counting at
    full CLIP sizes).
    """

    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0, materialize: bool = True):
        self.config = config
        self.seed = seed
        self.materialized = materialize
        self.attachment: PeftAttachment | None = None
        init = _Init(np.random.default_rng(seed) if materialize else None)
        c = config
        self.params: dict[str, Tensor] = {}
        p = self.params
        p["vision.patch_w"] = init((c.d_v, c.d_v), 0.02)
        p["vision.patch_b"] = init.const((c.d_v,), 0.0)
        p["vision.cls"] = init.const((c.d_v,), 0.0)
        p["vision.pos"] = init((c.m + 1, c.d_v), 0.02)
        self.vision_layers = [TransformerLayer(c.d_v, c.heads, c.mlp_ratio, init) for _ in range(c.L)]
        for i, layer in enumerate(self.vision_layers):
            for k, t in layer.params.items():
                p[f"vision.layers.{i}.{k}"] = t
        p["vision.ln_post.g"] = init.const((c.d_v,), 1.0)
        p["vision.ln_post.b"] = init.const((c.d_v,), 0.0)
        p["vision.proj"] = init((c.d_v, c.d), 0.02)
        p["text.token_emb"] = init((c.vocab, c.d_t), 0.02)
        p["text.pos"] = init((c.n, c.d_t), 0.02)
        self.text_layers = [TransformerLayer(c.d_t, c.heads, c.mlp_ratio, init) for _ in range(c.L)]
        for i, layer in enumerate(self.text_layers):
            for k, t in layer.params.items():
                p[f"text.layers.{i}.{k}"] = t
        p["text.ln_final.g"] = init.const((c.d_t,), 1.0)
        p["text.ln_final.b"] = init.const((c.d_t,), 0.0)
        p["text.proj"] = init((c.d_t, c.d), 0.02)
        p["head.w"] = init((c.C, 2 * c.d), 0.02)
        p["head.b"] = init.const((c.C,), 0.0)

    # -- parameters -------------------------------------------------------

    def named_parameters(self, include_peft: bool = True) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()
        if include_peft and self.attachment is not None:
            yield from self.attachment.named_parameters()

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.trainable]

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    def state_dict(self, include_peft: bool = True) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters(include_peft)}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            t = own[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {t.shape}")
            t.data = value.copy()

    # -- forward ----------------------------------------------------------

    def forward(self, batch: Batch, collect: dict | None = None) -> Tensor:
        h_img = encode_image(self, batch.patches, collect=collect)
        h_txt = encode_text(self, batch.tokens, collect=collect)
        return classify(h_img, h_txt, self)

    __call__ = forward


def _broadcast_rows(t: Tensor, batch: int) -> Tensor:
    """(k, w) parameter -> (batch, k, w) on the tape."""
    return dc.add(Tensor(np.zeros((batch,) + t.shape)), t)


def _run_branch(model, branch, layers, x, key_mask, peft, collect, pool):
    """Shared layer loop. ``pool(x)`` picks the pooled row per example."""
    cfg = model.config
    B, S, _ = x.shape
    gamma = peft.gamma if peft is not None and peft.variant == "lora" else 1.0
    pooled = []
    for i, layer in enumerate(layers):
        prompt = peft.prompt(branch, i) if peft is not None else None
        if prompt is not None:
            p = prompt.shape[0]
            pb = _broadcast_rows(prompt, B)
            pmask = np.full((B, 1, 1, p), MASK_VALUE if peft.mask_prompts else 0.0)
            base = key_mask if key_mask is not None else np.zeros((B, 1, 1, S))
            if branch == "vision":
                x_in = dc.concat([x, pb], axis=1)
                mask = np.concatenate([base, pmask], axis=-1)
            else:
                x_in = dc.concat([pb, x], axis=1)
                mask = np.concatenate([pmask, base], axis=-1)
        else:
            x_in, mask = x, key_mask
        lora = peft.lora(branch, i) if peft is not None else None
        h = layer_forward(x_in, layer, mask, lora, gamma, cfg.ln_eps)
        adapter = peft.adapter(branch, i) if peft is not None else None
        if adapter is not None:
            h = dc.add(h, adapter_forward(x_in, *adapter))
        if prompt is not None:
            start = 0 if branch == "vision" else prompt.shape[0]
            h = dc.slice_axis(h, 1, start, start + S)
        x = h
        if collect is not None:
            pooled.append(pool(x).data.copy())
    if collect is not None:
        collect[branch] = pooled
    return pool(x)


def encode_image(model: DualEncoderModel, patches, peft: PeftAttachment | None = None, collect=None) -> Tensor:
    """Image embedding (B, d) from patch features (B, m, d_v)."""
    cfg = model.config
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[1:] != (cfg.m, cfg.d_v):
        raise ShapeError(f"patches must be (batch, {cfg.m}, {cfg.d_v}), got {patches.shape}")
    peft = peft if peft is not None else model.attachment
    p = model.params
    B = patches.shape[0]
    x = dc.add(dc.matmul(Tensor(patches), p["vision.patch_w"]), p["vision.patch_b"])
    cls = dc.add(Tensor(np.zeros((B, 1, cfg.d_v))), p["vision.cls"])
    x = dc.add(dc.concat([cls, x], axis=1), p["vision.pos"])

    def pool(t):
        return dc.reshape(dc.slice_axis(t, 1, 0, 1), (B, cfg.d_v))

    z = _run_branch(model, "vision", model.vision_layers, x, None, peft, collect, pool)
    z = dc.layer_norm(z, p["vision.ln_post.g"], p["vision.ln_post.b"], cfg.ln_eps)
    return dc.matmul(z, p["vision.proj"])


def last_token_index(tokens: np.ndarray) -> np.ndarray:
    real = tokens != PAD_ID
    if not real.any(axis=1).all():
        raise ValueError("text row with only padding")
    return tokens.shape[1] - 1 - np.argmax(real[:, ::-1], axis=1)


def encode_text(model: DualEncoderModel, tokens, peft: PeftAttachment | None = None, collect=None) -> Tensor:
    """Text embedding (B, d) taken at the last non-padding token."""
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or not 1 <= tokens.shape[1] <= cfg.n:
        raise ShapeError(f"tokens must be (batch, <= {cfg.n}), got {tokens.shape}")
    peft = peft if peft is not None else model.attachment
    p = model.params
    B, S = tokens.shape
    last = last_token_index(tokens)
    x = dc.embed(p["text.token_emb"], tokens)
    x = dc.add(x, dc.slice_axis(p["text.pos"], 0, 0, S))
    key_mask = np.where(tokens == PAD_ID, MASK_VALUE, 0.0)[:, None, None, :]

    def pool(t):
        return dc.gather_rows(t, last)

    z = _run_branch(model, "text", model.text_layers, x, key_mask, peft, collect, pool)
    z = dc.layer_norm(z, p["text.ln_final.g"], p["text.ln_final.b"], cfg.ln_eps)
    return dc.matmul(z, p["text.proj"])


def classify(h_img: Tensor, h_txt: Tensor, model: DualEncoderModel) -> Tensor:
    """Logits ``(h_img ++ h_txt) @ W_head.T + b``, shape (B, C)."""
    w, b = model.params["head.w"], model.params["head.b"]
    if h_img.shape[-1] + h_txt.shape[-1] != w.shape[1]:
        raise ShapeError(
            f"embedding widths {h_img.shape[-1]}+{h_txt.shape[-1]} do not match head {w.shape}"
        )
    joint = dc.concat([h_img, h_txt], axis=-1)
    return dc.add(dc.matmul(joint, dc.transpose(w, (1, 0))), b)


def predict_proba(model: DualEncoderModel, batch: Batch, temperature: float = 1.0) -> np.ndarray:
    """Class probabilities without recording anything."""
    logits = model.forward(batch).data / temperature
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
