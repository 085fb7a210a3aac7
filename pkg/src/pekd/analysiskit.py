"""Teacher/student comparisons: layer-wise CCA, gate curve, error and confidence breakdowns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .distill import entropy_gate
from .encoder import DualEncoderModel
from .synthdata import Dataset

QUARTILE_METHOD = "linear"


@dataclass
class ActivationDump:
    """Pooled hidden state after every layer, per branch: ``layers[branch][i]`` is (N, width)."""

    tag: str
    ids: np.ndarray
    layers: dict[str, list[np.ndarray]]


def dump_activations(model: DualEncoderModel, data: Dataset, tag: str, batch_size: int = 256) -> ActivationDump:
    chunks: dict[str, list[list[np.ndarray]]] = {"vision": [], "text": []}
    for b in data.batches(batch_size):
        collect: dict = {}
        model.forward(b, collect=collect)
        for branch in chunks:
            chunks[branch].append(collect[branch])
    layers = {
        branch: [np.concatenate([c[i] for c in per_batch]) for i in range(len(per_batch[0]))]
        for branch, per_batch in chunks.items()
    }
    return ActivationDump(tag, data.ids.copy(), layers)


def save_dump(dump: ActivationDump, path) -> None:
    """Store a dump in the checkpoint container: ``ids``, ``tag/<tag>`` and ``<branch>/<layer>`` blocks."""
    if "/" in dump.tag or not dump.tag:
        raise ValueError(f"bad dump tag {dump.tag!r}")
    blocks = {"ids": dump.ids.astype(np.float64), f"tag/{dump.tag}": np.array(0.0)}
    for branch, layers in dump.layers.items():
        for i, a in enumerate(layers):
            blocks[f"{branch}/{i}"] = a
    with open(path, "wb") as fh:
        fh.write(checkpoint.dumps(blocks))


def load_dump(path) -> ActivationDump:
    blocks = checkpoint.read_blocks(path)
    tags = [k[4:] for k in blocks if k.startswith("tag/")]
    if "ids" not in blocks or len(tags) != 1:
        raise checkpoint.CheckpointError("not an activation dump")
    layers: dict[str, list[np.ndarray]] = {}
    for branch in ("vision", "text"):
        count = sum(1 for k in blocks if k.startswith(branch + "/"))
        layers[branch] = [blocks[f"{branch}/{i}"] for i in range(count)]
    return ActivationDump(tags[0], blocks["ids"].astype(np.uint64), layers)


def _inv_sqrt(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return (v / np.sqrt(np.maximum(w, 1e-300))) @ v.T


def canonical_correlations(X: np.ndarray, Y: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    N = X.shape[0]
    if Y.shape[0] != N:
        raise ValueError("X and Y need the same number of rows")
    if N <= max(X.shape[1], Y.shape[1]):
        raise ValueError(f"need more samples ({N}) than dimensions {X.shape[1]}, {Y.shape[1]}")
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    sxx = Xc.T @ Xc / (N - 1) + ridge * np.eye(X.shape[1])
    syy = Yc.T @ Yc / (N - 1) + ridge * np.eye(Y.shape[1])
    sxy = Xc.T @ Yc / (N - 1)
    T = _inv_sqrt(sxx) @ sxy @ _inv_sqrt(syy)
    rho = np.linalg.svd(T, compute_uv=False)
    return np.clip(rho[: min(X.shape[1], Y.shape[1])], 0.0, 1.0)


def mean_cca(X: np.ndarray, Y: np.ndarray, ridge: float = 1e-6) -> float:
    """Mean canonical correlation over ``min(d1, d2)`` directions."""
    return float(canonical_correlations(X, Y, ridge).mean())


def cca_profile(teacher: ActivationDump, student: ActivationDump, ridge: float = 1e-6) -> list[dict]:
    """One row per (branch, layer) with the mean CCA between the two dumps."""
    if not np.array_equal(teacher.ids, student.ids):
        raise ValueError("activation dumps are not aligned on example ids")
    rows = []
    for branch in ("vision", "text"):
        t_layers, s_layers = teacher.layers[branch], student.layers[branch]
        if len(t_layers) != len(s_layers):
            raise ValueError(f"{branch}: layer counts differ ({len(t_layers)} vs {len(s_layers)})")
        for i, (a, b) in enumerate(zip(t_layers, s_layers)):
            rows.append({"branch": branch, "layer": i + 1, "cca": mean_cca(a, b, ridge),
                         "teacher": teacher.tag, "student": student.tag})
    return rows


def gate_curve(teacher_probs: np.ndarray) -> list[tuple[float, float]]:
    """(max teacher probability, KD weight 1 - g) pairs, sorted by confidence."""
    probs = np.asarray(teacher_probs, dtype=np.float64)
    conf = probs.max(axis=1)
    weight = 1.0 - entropy_gate(probs)
    order = np.lexsort((weight, conf))
    return [(float(conf[i]), float(weight[i])) for i in order]


def error_breakdown(student: list[dict], teacher: list[dict], n_classes: int = 2) -> list[dict]:
    """Per true class: student errors and student-only errors (teacher right, student wrong)."""
    if [r["id"] for r in student] != [r["id"] for r in teacher]:
        raise ValueError("student and teacher records are not aligned on ids")
    rows = []
    for c in range(n_classes):
        errors = only = 0
        for s, t in zip(student, teacher):
            if s["label"] != c:
                continue
            if s["pred"] != s["label"]:
                errors += 1
                if t["pred"] == t["label"]:
                    only += 1
        rows.append({"class": c, "student_errors": errors, "student_only_errors": only})
    return rows


def confidence_stats(records: list[dict], n_classes: int = 2) -> list[dict]:
    """Median and interquartile range of predicted-class probability per true class."""
    rows = []
    for c in range(n_classes):
        conf = np.array([r["confidence"] for r in records if r["label"] == c], dtype=np.float64)
        if conf.size == 0:
            rows.append({"class": c, "count": 0, "q1": float("nan"), "median": float("nan"),
                         "q3": float("nan"), "iqr": float("nan")})
            continue
        q1, med, q3 = np.percentile(conf, [25, 50, 75], method=QUARTILE_METHOD)
        rows.append({"class": c, "count": int(conf.size), "q1": float(q1), "median": float(med),
                     "q3": float(q3), "iqr": float(q3 - q1)})
    return rows


def export_embeddings(model: DualEncoderModel, data: Dataset, tag: str, batch_size: int = 256) -> list[dict]:
    """Per-example logits with label and model tag, for external plotting."""
    if model.config.C != 2:
        raise ValueError("embedding export is defined for two classes")
    out = []
    for b in data.batches(batch_size):
        logits = model.forward(b).data
        for i in range(len(b)):
            out.append({"id": int(b.ids[i]), "logit0": float(logits[i, 0]), "logit1": float(logits[i, 1]),
                        "label": int(b.labels[i]), "model": tag})
    return out
