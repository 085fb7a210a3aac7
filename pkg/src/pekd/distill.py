"""Entropy-gated distillation objective.

The student loss per example is ``g * CE + (1 - g) * KD`` where ``g`` is the
teacher's normalized entropy at temperature 1 and KD is the temperature-scaled
KL divergence from teacher to student. Two ablation policies are provided:
``hard`` (drop KD wherever the teacher mislabels the example) and ``none``
(fixed equal weighting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from . import diffcore as dc
from .diffcore import Tensor

PROB_FLOOR = 1e-12
GATE_MODES = ("entropy", "hard", "none")


@dataclass(frozen=True)
class GatePolicy:
    mode: str = "entropy"
    temperature: float = 2.0
    kd: bool = True
    batch_gate: bool = False  # average g over the batch instead of per example

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ValueError(f"gate mode must be one of {GATE_MODES}, got {self.mode!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def softmax_np(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    return -xlogy(p, p).sum(axis=-1)


def entropy_gate(y_teacher: np.ndarray) -> np.ndarray:
    """Normalized teacher entropy ``H(y) / log C`` in [0, 1], per row."""
    y = np.asarray(y_teacher, dtype=np.float64)
    C = y.shape[-1]
    g = entropy(y) / np.log(C)
    return np.clip(g, 0.0, 1.0)


def kd_loss(y_teacher, y_student, temperature: float, diagnostics: dict | None = None) -> np.ndarray:
    """``T^2 * KL(y_teacher || y_student)`` per row, from probability rows.

    Student probabilities are floored at 1e-12; the number of floored entries
    that met positive teacher mass is written to ``diagnostics['clamped']``.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    yt = np.asarray(y_teacher, dtype=np.float64)
    ys = np.asarray(y_student, dtype=np.float64)
    floored = np.maximum(ys, PROB_FLOOR)
    if diagnostics is not None:
        diagnostics["clamped"] = int(((ys < PROB_FLOOR) & (yt > 0)).sum())
    kl = (xlogy(yt, yt) - xlogy(yt, floored)).sum(axis=-1)
    return temperature**2 * kl


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-example ``-log softmax(logits)[label]``, shape (B,)."""
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C or not np.issubdtype(labels.dtype, np.integer)):
        raise ValueError(f"labels must be integers in [0, {C})")
    return dc.scale(dc.take(dc.log_softmax(logits, axis=-1), labels, axis=-1), -1.0)


def kd_loss_from_logits(teacher_logits: np.ndarray, student_logits: Tensor, temperature: float) -> Tensor:
    """Differentiable KD term; teacher logits are constants, so only the student gets gradient."""
    T = temperature
    yt = softmax_np(teacher_logits, T)
    log_s = dc.log_softmax(dc.scale(student_logits, 1.0 / T), axis=-1)
    neg_entropy = xlogy(yt, yt).sum(axis=-1)
    cross = dc.sum(dc.mul(log_s, Tensor(yt)), axis=-1)
    return dc.scale(dc.sub(Tensor(neg_entropy), cross), T * T)


@dataclass
class DistillSignal:
    """Everything the student needs from one teacher forward pass."""

    logits: np.ndarray
    probs: np.ndarray
    soft: np.ndarray
    entropy: np.ndarray
    gate: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray, temperature: float, batch_gate: bool = False) -> "DistillSignal":
        logits = np.asarray(logits, dtype=np.float64)
        probs = softmax_np(logits)
        gate = entropy_gate(probs)
        if batch_gate:
            gate = np.full_like(gate, gate.mean())
        return cls(logits, probs, softmax_np(logits, temperature), entropy(probs), gate)

    @property
    def prediction(self) -> np.ndarray:
        return self.probs.argmax(axis=-1)


def loss_weights(policy: GatePolicy, gate, teacher_pred=None, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-example (CE weight, KD weight) under ``policy``."""
    gate = np.asarray(gate, dtype=np.float64)
    if not policy.kd:
        return np.ones_like(gate), np.zeros_like(gate)
    if policy.mode == "entropy":
        if gate.size and (gate.min() < 0 or gate.max() > 1):
            raise ValueError("entropy gate must lie in [0, 1]")
        return gate, 1.0 - gate
    if policy.mode == "hard":
        if teacher_pred is None or labels is None:
            raise ValueError("hard gating needs teacher predictions and labels")
        keep = (np.asarray(teacher_pred) == np.asarray(labels)).astype(np.float64)
        return np.ones_like(gate), keep * np.ones_like(gate)
    return np.full_like(gate, 0.5), np.full_like(gate, 0.5)


def combined_terms(ce, kd, gate, policy: GatePolicy, teacher_pred=None, labels=None) -> Tensor:
    """Per-example combined loss (Tensor of shape (B,))."""
    ce = ce if isinstance(ce, Tensor) else Tensor(ce)
    kd = kd if isinstance(kd, Tensor) else Tensor(kd)
    w_ce, w_kd = loss_weights(policy, gate, teacher_pred, labels)
    return dc.add(dc.mul(ce, Tensor(w_ce)), dc.mul(kd, Tensor(w_kd)))


def combined_loss(ce, kd, gate, policy: GatePolicy, teacher_pred=None, labels=None) -> Tensor:
    """Batch mean of :func:`combined_terms`."""
    return dc.mean(combined_terms(ce, kd, gate, policy, teacher_pred, labels))


def student_objective(student_logits: Tensor, signal: DistillSignal, labels, policy: GatePolicy):
    """Build the batch loss; also return per-example (g, ce, kd, combined) rows."""
    ce = cross_entropy(student_logits, labels)
    if policy.kd:
        kd = kd_loss_from_logits(signal.logits, student_logits, policy.temperature)
    else:
        kd = Tensor(np.zeros(len(labels)))
    terms = combined_terms(ce, kd, signal.gate, policy, signal.prediction, labels)
    rows = np.stack([signal.gate, ce.data, kd.data, terms.data], axis=1)
    return dc.mean(terms), rows
