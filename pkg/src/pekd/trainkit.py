"""Base pretraining, teacher and student optimization loops, evaluation and the ablation protocol.

Teacher and students start from one shared base: a dual encoder pretrained
to recognise scene attributes (shape, color, condition level on the image
side; shape, color, claimed level on the caption side) on a generator stream
disjoint from the task data. The base never sees incongruity labels.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from . import peft as peftlib
from .diffcore import NumericalError  # noqa: F401  (re-exported for callers of the training loops)
from .distill import DistillSignal, GatePolicy, cross_entropy, student_objective
from .encoder import DualEncoderModel, EncoderConfig, encode_image, encode_text, predict_proba
from .synthdata import Dataset, GenSpec, SplitSpec, generate, split

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_backbone: float = 3e-4
    lr_head: float = 1e-3
    lr_student: float = 3e-3
    batch_size: int = 32
    teacher_epochs: int = 3
    student_epochs: int = 20
    patience: int = 0  # 0 disables early stopping; the best epoch is still returned
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    cache_teacher: bool = True
    eval_batch: int = 256

    def __post_init__(self):
        if min(self.lr_backbone, self.lr_head, self.lr_student) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PretrainConfig:
    n_examples: int = 10000
    epochs: int = 2
    lr: float = 1e-3
    stream_offset: int = 2_000_003  # pretraining stream seed = data seed + offset

    def __post_init__(self):
        if self.n_examples < 1 or self.epochs < 0 or not self.lr > 0:
            raise ValueError("pretraining needs examples, epochs >= 0 and a positive rate")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown pretrain keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam with per-tensor learning rates."""

    def __init__(self, groups: list[tuple[list, float]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = groups
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for tensors, lr in self.groups:
            for t in tensors:
                if t.grad is None:
                    continue
                key = id(t)
                m = self.m.get(key)
                if m is None:
                    m = self.m[key] = np.zeros_like(t.data)
                    self.v[key] = np.zeros_like(t.data)
                v = self.v[key]
                m *= self.b1
                m += (1 - self.b1) * t.grad
                v *= self.b2
                v += (1 - self.b2) * t.grad * t.grad
                t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for tensors, _ in self.groups:
            for t in tensors:
                t.zero_grad()


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    macro_f1: float
    labels: np.ndarray
    preds: np.ndarray
    probs: np.ndarray
    ids: np.ndarray
    teacher_preds: np.ndarray | None = None

    def records(self) -> list[dict]:
        rows = []
        for i in range(len(self.ids)):
            row = {
                "id": int(self.ids[i]),
                "label": int(self.labels[i]),
                "pred": int(self.preds[i]),
                "confidence": float(self.probs[i].max()),
                "p1": float(self.probs[i, 1]),
            }
            if self.teacher_preds is not None:
                row["teacher_pred"] = int(self.teacher_preds[i])
            rows.append(row)
        return rows


def macro_f1(labels: np.ndarray, preds: np.ndarray, n_classes: int = 2) -> float:
    """Unweighted mean of per-class F1, with 0/0 taken as 0."""
    scores = []
    for c in range(n_classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def predict(model: DualEncoderModel, data: Dataset, batch_size: int = 256) -> np.ndarray:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return np.concatenate([predict_proba(model, b) for b in data.batches(batch_size)])


def logits_of(model: DualEncoderModel, data: Dataset, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([model.forward(b).data for b in data.batches(batch_size)])


def evaluate(model: DualEncoderModel, data: Dataset, teacher_preds=None, batch_size: int = 256) -> EvalResult:
    probs = predict(model, data, batch_size)
    preds = probs.argmax(axis=1)
    labels = data.labels
    return EvalResult(
        accuracy=float((preds == labels).mean()),
        macro_f1=macro_f1(labels, preds, probs.shape[1]),
        labels=labels.copy(),
        preds=preds,
        probs=probs,
        ids=data.ids.copy(),
        teacher_preds=None if teacher_preds is None else np.asarray(teacher_preds),
    )


# -- reports -------------------------------------------------------------------


@dataclass
class RunReport:
    name: str
    accuracy: float
    macro_f1: float
    best_epoch: int
    valid_accuracy: float
    trainable_params: int
    wall_clock: float
    class_errors: tuple[int, int] = (0, 0)
    student_only_errors: tuple[int, int] = (0, 0)
    history: list[float] = field(default_factory=list)
    tags: dict = field(default_factory=dict)


def _check_finite(loss: float, where: str) -> None:
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss during {where}")


def _fit(model, trainables, lrs, train: Dataset, valid: Dataset, epochs, cfg: TrainConfig, loss_fn, where):
    """Shared epoch loop with best-validation selection (ties -> earliest epoch)."""
    opt = Adam([(ts, lr) for ts, lr in zip(trainables, lrs)], cfg.beta1, cfg.beta2, cfg.eps)
    best_acc, best_epoch, best_state = -1.0, 0, model.state_dict()
    if epochs == 0:
        best_acc = evaluate(model, valid, batch_size=cfg.eval_batch).accuracy
    history = []
    stale = 0
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            with dc.Tape() as tape:
                loss = loss_fn(idx)
                _check_finite(float(loss.data), where)
                dc.backward(loss, tape)
            opt.step()
        acc = evaluate(model, valid, batch_size=cfg.eval_batch).accuracy
        history.append(acc)
        log.debug("%s epoch %d valid acc %.4f", where, epoch, acc)
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return best_acc, best_epoch, history


def train_teacher(model: DualEncoderModel, train: Dataset, valid: Dataset, cfg: TrainConfig, test: Dataset | None = None):
    """Full fine-tune on cross-entropy; returns (state dict, RunReport)."""
    t0 = time.perf_counter()
    if model.attachment is not None:
        raise ValueError("teacher must not carry a PEFT attachment")
    for _, t in model.named_parameters():
        t.set_trainable(True)
    head = [t for n, t in model.named_parameters() if n.startswith("head.")]
    body = [t for n, t in model.named_parameters() if not n.startswith("head.")]

    def loss_fn(idx):
        b = train.batch(idx)
        return dc.mean(cross_entropy(model.forward(b), b.labels))

    best_acc, best_epoch, history = _fit(
        model, [body, head], [cfg.lr_backbone, cfg.lr_head], train, valid, cfg.teacher_epochs, cfg, loss_fn, "teacher training"
    )
    report = RunReport(
        name="teacher",
        accuracy=float("nan"),
        macro_f1=float("nan"),
        best_epoch=best_epoch,
        valid_accuracy=best_acc,
        trainable_params=peftlib.trainable_parameter_count(model),
        wall_clock=0.0,
        history=history,
    )
    if test is not None:
        res = evaluate(model, test, batch_size=cfg.eval_batch)
        report.accuracy, report.macro_f1 = res.accuracy, res.macro_f1
        report.class_errors = class_errors(res.labels, res.preds)
    report.wall_clock = time.perf_counter() - t0
    return model.state_dict(), report


def freeze_all(model: DualEncoderModel) -> None:
    for _, t in model.named_parameters():
        t.set_trainable(False)


def train_student(
    model: DualEncoderModel,
    teacher: DualEncoderModel,
    train: Dataset,
    valid: Dataset,
    cfg: TrainConfig,
    policy: GatePolicy,
    test: Dataset | None = None,
    diagnostics: list | None = None,
):
    """Train only the attachment and head against the gated objective.

    The teacher is frozen and evaluated without recording. With
    ``cfg.cache_teacher`` its logits on ``train`` are computed once up front.
    ``diagnostics`` (a list) collects per-example (g, ce, kd, combined) rows
    from the final epoch.
    """
    t0 = time.perf_counter()
    if model.attachment is None:
        raise ValueError("student needs a PEFT attachment")
    if teacher.config != model.config:
        raise ValueError("teacher and student configurations differ")
    freeze_all(teacher)
    trainables = [t for _, t in model.trainable_parameters()]
    cached = logits_of(teacher, train, cfg.eval_batch) if cfg.cache_teacher else None
    last_rows: list = []

    def loss_fn(idx):
        b = train.batch(idx)
        t_logits = cached[idx] if cached is not None else teacher.forward(b).data
        signal = DistillSignal.from_logits(t_logits, policy.temperature, policy.batch_gate)
        loss, rows = student_objective(model.forward(b), signal, b.labels, policy)
        last_rows.append(rows)
        return loss

    best_acc, best_epoch, history = _fit(
        model, [trainables], [cfg.lr_student], train, valid, cfg.student_epochs, cfg, loss_fn, "student training"
    )
    if diagnostics is not None:
        n_batches = -(-len(train) // cfg.batch_size)
        diagnostics.extend(np.concatenate(last_rows[-n_batches:]).tolist() if last_rows else [])
    report = RunReport(
        name=f"{model.attachment.variant}",
        accuracy=float("nan"),
        macro_f1=float("nan"),
        best_epoch=best_epoch,
        valid_accuracy=best_acc,
        trainable_params=peftlib.trainable_parameter_count(model),
        wall_clock=0.0,
        history=history,
        tags={"kd": policy.kd, "gate": policy.mode if policy.kd else "off"},
    )
    if test is not None:
        t_preds = predict(teacher, test, cfg.eval_batch).argmax(axis=1)
        res = evaluate(model, test, t_preds, cfg.eval_batch)
        report.accuracy, report.macro_f1 = res.accuracy, res.macro_f1
        report.class_errors = class_errors(res.labels, res.preds)
        report.student_only_errors = student_only_errors(res.labels, res.preds, t_preds)
    report.wall_clock = time.perf_counter() - t0
    return model.state_dict(), report


def class_errors(labels, preds) -> tuple[int, int]:
    wrong = preds != labels
    return int((wrong & (labels == 0)).sum()), int((wrong & (labels == 1)).sum())


def student_only_errors(labels, preds, teacher_preds) -> tuple[int, int]:
    mask = (preds != labels) & (teacher_preds == labels)
    return int((mask & (labels == 0)).sum()), int((mask & (labels == 1)).sum())


# -- base pretraining -----------------------------------------------------------

ATTRIBUTES = {"vision": ("shape", "color", "level"), "text": ("shape", "color", "claimed")}


def pretraining_stream(spec: GenSpec, pcfg: PretrainConfig) -> Dataset:
    """Unlabelled-for-the-task stream: same renderer, disjoint seed, no annotation noise."""
    return generate(replace(spec, seed=spec.seed + pcfg.stream_offset, n_examples=pcfg.n_examples, label_noise=0.0))


def attribute_targets(data: Dataset) -> dict[str, np.ndarray]:
    scenes = data.scenes()
    return {k: np.array([s[k] for s in scenes], dtype=np.int64) for k in ("shape", "color", "level", "claimed")}


def pretrain_base(model: DualEncoderModel, data: Dataset, cfg: TrainConfig, pcfg: PretrainConfig) -> RunReport:
    """Fit both branches to predict scene attributes through throwaway linear probes.

    Only the encoder branches and projections are updated; the classifier
    head keeps its initial values.
    """
    t0 = time.perf_counter()
    if model.attachment is not None:
        raise ValueError("pretraining expects a bare model")
    spec = data.spec
    sizes = {"shape": spec.n_shapes, "color": spec.n_colors, "level": spec.n_levels, "claimed": spec.n_levels}
    rng = np.random.default_rng([cfg.seed, 17])
    d = model.config.d
    probes = {
        (branch, attr): dc.Tensor(rng.normal(0.0, 0.1, (d, sizes[attr])), trainable=True)
        for branch, attrs in ATTRIBUTES.items()
        for attr in attrs
    }
    body = []
    for name, t in model.named_parameters():
        t.set_trainable(not name.startswith("head."))
        if t.trainable:
            body.append(t)
    targets = attribute_targets(data)
    opt = Adam([(body, pcfg.lr), (list(probes.values()), pcfg.lr)], cfg.beta1, cfg.beta2, cfg.eps)
    losses = []
    for epoch in range(1, pcfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, 17, epoch]).permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            b = data.batch(idx)
            opt.zero_grad()
            with dc.Tape() as tape:
                h = {"vision": encode_image(model, b.patches), "text": encode_text(model, b.tokens)}
                terms = [
                    dc.mean(cross_entropy(dc.matmul(h[branch], w), targets[attr][idx]))
                    for (branch, attr), w in probes.items()
                ]
                loss = terms[0]
                for t in terms[1:]:
                    loss = dc.add(loss, t)
                _check_finite(float(loss.data), "base pretraining")
                dc.backward(loss, tape)
            opt.step()
            losses.append(float(loss.data))
    for _, t in model.named_parameters():
        t.set_trainable(False)
    tail = losses[-50:]
    return RunReport(
        name="base",
        accuracy=float("nan"),
        macro_f1=float("nan"),
        best_epoch=pcfg.epochs,
        valid_accuracy=float("nan"),
        trainable_params=sum(t.data.size for t in body),
        wall_clock=time.perf_counter() - t0,
        tags={"final_loss": float(np.mean(tail)) if tail else float("nan")},
    )


def build_base(encoder: EncoderConfig, spec: GenSpec, cfg: TrainConfig, pcfg: PretrainConfig):
    """Fresh model at ``cfg.seed`` after attribute pretraining; returns (state dict, report)."""
    model = DualEncoderModel(encoder, seed=cfg.seed)
    report = pretrain_base(model, pretraining_stream(spec, pcfg), cfg, pcfg)
    return model.state_dict(), report


def model_from_state(encoder: EncoderConfig, state: dict, seed: int = 0) -> DualEncoderModel:
    model = DualEncoderModel(encoder, seed=seed)
    model.load_state_dict(state)
    return model


# -- ablation protocol --------------------------------------------------------------

GATES = ("off", "entropy", "hard", "none")


def policy_for(gate: str, temperature: float = 2.0) -> GatePolicy:
    if gate == "off":
        return GatePolicy(mode="none", temperature=temperature, kd=False)
    return GatePolicy(mode=gate, temperature=temperature, kd=True)


@dataclass
class ProtocolResult:
    base: RunReport
    teacher: RunReport
    runs: list[dict]
    aggregates: list[dict]
    deltas: list[dict]
    teacher_state: dict
    base_state: dict
    student_states: dict = field(default_factory=dict)
    timings: list[dict] = field(default_factory=list)  # kept apart so metrics files stay reproducible

    def aggregate(self, variant: str, gate: str) -> dict:
        for row in self.aggregates:
            if row["variant"] == variant and row["gate"] == gate:
                return row
        raise KeyError((variant, gate))


_WORKER: dict = {}


def _init_worker(context: dict) -> None:
    _WORKER.clear()
    _WORKER.update(context)


def _student_job(job: tuple) -> tuple[dict, dict, float]:
    variant, gate, split_id, trial = job
    ctx = _WORKER
    encoder, train_cfg = ctx["encoder"], ctx["train"]
    parts = ctx["splits"][split_id]
    ds = ctx["data"]
    teacher = model_from_state(encoder, ctx["teacher_state"])
    student = model_from_state(encoder, ctx["base_state"])
    peftlib.attach(student, variant, ctx["peft"].get(variant), seed=trial)
    cfg = replace(train_cfg, seed=train_cfg.seed + trial)
    _, report = train_student(
        student,
        teacher,
        ds.subset(parts.student_train),
        ds.subset(parts.valid_student),
        cfg,
        policy_for(gate, ctx["temperature"]),
        ctx["test"],
    )
    row = {
        "variant": variant,
        "gate": gate,
        "split": split_id,
        "trial": trial,
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
        "best_epoch": report.best_epoch,
        "valid_accuracy": report.valid_accuracy,
        "errors_0": report.class_errors[0],
        "errors_1": report.class_errors[1],
        "student_only_0": report.student_only_errors[0],
        "student_only_1": report.student_only_errors[1],
        "trainable_params": report.trainable_params,
    }
    trained = {n: t.data.copy() for n, t in student.trainable_parameters()}
    return row, trained, report.wall_clock


def population_std(values) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=0))


def aggregate_runs(runs: list[dict]) -> list[dict]:
    """Mean and population std per (variant, gate), in first-seen order."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in runs:
        groups.setdefault((r["variant"], r["gate"]), []).append(r)
    rows = []
    for (variant, gate), rs in groups.items():
        acc = [r["accuracy"] for r in rs]
        f1 = [r["macro_f1"] for r in rs]
        rows.append(
            {
                "variant": variant,
                "gate": gate,
                "runs": len(rs),
                "acc_mean": float(np.mean(acc)),
                "acc_std": population_std(acc),
                "f1_mean": float(np.mean(f1)),
                "f1_std": population_std(f1),
                "errors": sum(r["errors_0"] + r["errors_1"] for r in rs),
                "student_only_errors": sum(r["student_only_0"] + r["student_only_1"] for r in rs),
            }
        )
    return rows


def delta_rows(aggregates: list[dict]) -> list[dict]:
    """(with - without) accuracy and F1 in points: each KD gate against KD off, and entropy against the other gates."""
    by = {(a["variant"], a["gate"]): a for a in aggregates}
    pairs = [(g, "off") for g in ("entropy", "hard", "none")] + [("entropy", "none"), ("entropy", "hard")]
    rows = []
    for variant in dict.fromkeys(a["variant"] for a in aggregates):
        for a, b in pairs:
            if (variant, a) in by and (variant, b) in by:
                rows.append(
                    {
                        "variant": variant,
                        "with": a,
                        "without": b,
                        "acc_points": 100.0 * (by[variant, a]["acc_mean"] - by[variant, b]["acc_mean"]),
                        "f1_points": 100.0 * (by[variant, a]["f1_mean"] - by[variant, b]["f1_mean"]),
                    }
                )
    return rows


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, requested)
    env = os.environ.get("PEKD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"PEKD_THREADS must be an integer, got {env!r}") from None
    return 1


def run_protocol(
    data: GenSpec,
    split_spec: SplitSpec,
    encoder: EncoderConfig,
    train: TrainConfig,
    pretrain: PretrainConfig,
    peft_configs: dict | None = None,
    variants=("lora", "adapter", "prompt"),
    gates=GATES,
    trials: int = 3,
    temperature: float = 2.0,
    workers: int | None = None,
    keep_states: bool = False,
) -> ProtocolResult:
    """Pretrain the base, fine-tune one teacher, then train every student in the grid.

    The grid is ``variants x gates x splits x trials``; every run is a pure
    function of its coordinates, so results do not depend on ``workers``.
    """
    for v in variants:
        if v not in peftlib.VARIANTS:
            raise ValueError(f"unknown PEFT variant {v!r}")
    for g in gates:
        if g not in GATES:
            raise ValueError(f"unknown gate {g!r}")
    if trials < 1:
        raise ValueError("need at least one trial")
    ds = generate(data)
    splits = [split(ds, split_spec, s) for s in range(split_spec.n_splits)]
    base_state, base_report = build_base(encoder, data, train, pretrain)
    log.info("base pretrained in %.1fs", base_report.wall_clock)

    teacher = model_from_state(encoder, base_state)
    test = ds.subset(splits[0].test)
    teacher_state, teacher_report = train_teacher(
        teacher, ds.subset(splits[0].teacher_train), ds.subset(splits[0].valid_teacher), train, test
    )
    log.info("teacher test accuracy %.4f", teacher_report.accuracy)

    context = {
        "encoder": encoder,
        "train": train,
        "data": ds,
        "splits": splits,
        "test": test,
        "teacher_state": teacher_state,
        "base_state": base_state,
        "peft": dict(peft_configs or {}),
        "temperature": temperature,
    }
    jobs = [(v, g, s, t) for v in variants for g in gates for s in range(split_spec.n_splits) for t in range(trials)]
    n_workers = min(worker_count(workers), len(jobs))
    if n_workers == 1:
        _init_worker(context)
        outputs = [_student_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(n_workers, initializer=_init_worker, initargs=(context,)) as pool:
            outputs = list(pool.map(_student_job, jobs))
    runs = [row for row, _, _ in outputs]
    states = {j: st for j, (_, st, _) in zip(jobs, outputs)} if keep_states else {}
    timings = [{"name": "base", "wall_clock": base_report.wall_clock},
               {"name": "teacher", "wall_clock": teacher_report.wall_clock}]
    timings += [{"name": "-".join(map(str, j)), "wall_clock": w} for j, (_, _, w) in zip(jobs, outputs)]
    aggregates = aggregate_runs(runs)
    return ProtocolResult(
        base=base_report,
        teacher=teacher_report,
        runs=runs,
        aggregates=aggregates,
        deltas=delta_rows(aggregates),
        teacher_state=teacher_state,
        base_state=base_state,
        student_states=states,
        timings=timings,
    )


def student_from_state(encoder: EncoderConfig, base_state: dict, variant: str, trained: dict, peft_config=None) -> DualEncoderModel:
    """Rebuild a protocol student from the base plus its trained tensors."""
    model = model_from_state(encoder, base_state)
    peftlib.attach(model, variant, peft_config)
    model.load_state_dict(trained, strict=False)
    return model
