from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pekd import peft, trainkit
from pekd.distill import GatePolicy, kd_loss, softmax_np
from pekd.encoder import DualEncoderModel, EncoderConfig
from pekd.peft import LoraConfig
from pekd.synthdata import GenSpec, SplitSpec, generate, split
from pekd.trainkit import PretrainConfig, TrainConfig

import oracles

DATA = GenSpec(n_examples=400, seed=2, m=4, d_v=8, vocab=64)
ENC = EncoderConfig(L=1, d_v=8, d_t=8, d=4, heads=2, m=4, n=24, vocab=64)
TRAIN = TrainConfig(teacher_epochs=1, student_epochs=2, batch_size=16)
PRE = PretrainConfig(n_examples=200, epochs=1)
SPLIT = SplitSpec(student_fraction=0.05)
PEFT = {"lora": LoraConfig(rank=2)}


@pytest.fixture(scope="module")
def world():
    ds = generate(DATA)
    sp = split(ds, SPLIT, 0)
    parts = {k: ds.subset(v) for k, v in sp.parts().items()}
    teacher = DualEncoderModel(ENC, seed=0)
    state, report = trainkit.train_teacher(teacher, parts["teacher_train"], parts["valid_teacher"], TRAIN, parts["test"])
    return parts, state, report


def teacher_of(state):
    return trainkit.model_from_state(ENC, state)


def test_macro_f1_examples():
    y = np.array([0, 0, 1, 1])
    assert trainkit.macro_f1(y, y) == 1.0
    assert trainkit.macro_f1(y, np.zeros(4, int)) == pytest.approx(1 / 3)
    assert trainkit.macro_f1(y, np.array([1, 0, 1, 0])) == trainkit.macro_f1(1 - y, np.array([0, 1, 0, 1]))


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_macro_f1_matches_oracle(pairs):
    y, p = np.array(pairs).T
    assert trainkit.macro_f1(y, p) == pytest.approx(oracles.macro_f1(list(y), list(p)), abs=1e-12)


def test_evaluate_rejects_empty(world):
    parts, state, _ = world
    with pytest.raises(ValueError):
        trainkit.evaluate(teacher_of(state), parts["test"].subset([]))


def test_evaluate_records(world):
    parts, state, _ = world
    res = trainkit.evaluate(teacher_of(state), parts["test"], teacher_preds=np.zeros(len(parts["test"]), int))
    rec = res.records()[0]
    assert set(rec) == {"id", "label", "pred", "confidence", "p1", "teacher_pred"}
    assert 0.5 <= rec["confidence"] <= 1.0


def test_zero_epoch_teacher_returns_init(world):
    parts = world[0]
    model = DualEncoderModel(ENC, seed=0)
    init = model.state_dict()
    state, report = trainkit.train_teacher(model, parts["teacher_train"], parts["valid_teacher"], replace(TRAIN, teacher_epochs=0), parts["test"])
    assert all(np.array_equal(init[k], state[k]) for k in init)
    assert report.best_epoch == 0
    assert abs(report.accuracy - 0.5) < 0.15


def test_teacher_is_deterministic(world):
    parts, state, report = world
    again, rep2 = trainkit.train_teacher(DualEncoderModel(ENC, seed=0), parts["teacher_train"], parts["valid_teacher"], TRAIN, parts["test"])
    assert all(np.array_equal(state[k], again[k]) for k in state)
    assert rep2.accuracy == report.accuracy


def make_student(state, variant="lora", seed=0):
    model = trainkit.model_from_state(ENC, state)
    peft.attach(model, variant, PEFT.get(variant), seed=seed)
    return model


@pytest.mark.parametrize("variant", peft.VARIANTS)
def test_student_freezes_backbone_and_teacher(world, variant):
    parts, state, _ = world
    teacher = teacher_of(state)
    student = make_student(state, variant)
    before = {n: t.data.copy() for n, t in student.params.items()}
    trainkit.train_student(student, teacher, parts["student_train"], parts["valid_student"], TRAIN, GatePolicy(), parts["test"])
    for n, t in student.params.items():
        if not n.startswith("head."):
            assert np.array_equal(t.data, before[n]), n
    for n, t in teacher.named_parameters():
        assert np.array_equal(t.data, state[n]) and t.grad is None


def test_zero_init_student_matches_teacher_so_kd_starts_at_zero(world):
    parts, state, _ = world
    teacher, student = teacher_of(state), make_student(state, "lora")
    batch = parts["student_train"].batch()
    ts = softmax_np(teacher.forward(batch).data, 2.0)
    ss = softmax_np(student.forward(batch).data, 2.0)
    assert np.all(kd_loss(ts, ss, 2.0) == 0.0)


def test_cached_teacher_is_bit_identical(world):
    parts, state, _ = world
    out = []
    for cache in (True, False):
        student = make_student(state)
        diag = []
        st_, rep = trainkit.train_student(student, teacher_of(state), parts["student_train"], parts["valid_student"],
                                          replace(TRAIN, cache_teacher=cache), GatePolicy(), parts["test"], diag)
        out.append((st_, rep.accuracy, np.array(diag)))
    assert all(np.array_equal(out[0][0][k], out[1][0][k]) for k in out[0][0])
    assert out[0][1] == out[1][1] and np.array_equal(out[0][2], out[1][2])


def test_student_rejections(world):
    parts, state, _ = world
    with pytest.raises(ValueError):
        trainkit.train_student(teacher_of(state), teacher_of(state), parts["student_train"], parts["valid_student"], TRAIN, GatePolicy())
    other = DualEncoderModel(replace(ENC, d=2))
    with pytest.raises(ValueError):
        trainkit.train_student(make_student(state), other, parts["student_train"], parts["valid_student"], TRAIN, GatePolicy())


def test_off_policy_ignores_teacher(world):
    """KD weight 0: the teacher's outputs cannot influence training."""
    parts, state, _ = world
    a, _ = trainkit.train_student(make_student(state), teacher_of(state), parts["student_train"], parts["valid_student"], TRAIN, trainkit.policy_for("off"))
    b, _ = trainkit.train_student(make_student(state), DualEncoderModel(ENC, seed=5), parts["student_train"], parts["valid_student"], TRAIN, trainkit.policy_for("off"))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_population_std_and_aggregates():
    assert trainkit.population_std([0.6, 0.7, 0.8, 0.9]) == pytest.approx(np.sqrt(0.0125))
    runs = [{"variant": "lora", "gate": g, "accuracy": a, "macro_f1": a, "errors_0": 1, "errors_1": 2,
             "student_only_0": 0, "student_only_1": 1} for g in ("off", "entropy") for a in (0.5, 0.7, 0.6)]
    agg = trainkit.aggregate_runs(runs)
    assert [(r["gate"], r["runs"]) for r in agg] == [("off", 3), ("entropy", 3)]
    assert agg[0]["acc_std"] == pytest.approx(np.std([0.5, 0.7, 0.6]))
    assert agg[0]["errors"] == 9 and agg[0]["student_only_errors"] == 3
    agg[1]["acc_mean"] += 0.02
    (delta,) = trainkit.delta_rows(agg)
    assert delta["with"] == "entropy" and delta["without"] == "off"
    assert delta["acc_points"] == pytest.approx(2.0)


def test_protocol_shape_and_worker_independence():
    kw = dict(peft_configs=PEFT, variants=("lora", "adapter"), gates=("off", "entropy"), trials=1)
    one = trainkit.run_protocol(DATA, SPLIT, ENC, TRAIN, PRE, workers=1, **kw)
    two = trainkit.run_protocol(DATA, SPLIT, ENC, TRAIN, PRE, workers=2, **kw)
    assert len(one.aggregates) == 4 and all(a["runs"] == 2 for a in one.aggregates)
    assert one.runs == two.runs
    assert one.aggregates == two.aggregates
    assert [d["acc_points"] for d in one.deltas] == [d["acc_points"] for d in two.deltas]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("PEKD_THREADS", "3")
    assert trainkit.worker_count() == 3
    assert trainkit.worker_count(2) == 2
    monkeypatch.setenv("PEKD_THREADS", "many")
    with pytest.raises(ValueError):
        trainkit.worker_count()


def test_pretraining_stream_is_disjoint_and_label_free():
    stream = trainkit.pretraining_stream(DATA, PRE)
    assert stream.spec.seed != DATA.seed and len(stream) == PRE.n_examples
    targets = trainkit.attribute_targets(stream)
    assert set(targets) == {"shape", "color", "level", "claimed"}
    a, _ = trainkit.build_base(ENC, DATA, TRAIN, PRE)
    b, _ = trainkit.build_base(ENC, DATA, TRAIN, PRE)
    assert all(np.array_equal(a[k], b[k]) for k in a)
