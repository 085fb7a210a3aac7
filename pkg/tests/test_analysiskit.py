import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from pekd import analysiskit as ak
from pekd.checkpoint import CheckpointError
from pekd.encoder import DualEncoderModel, EncoderConfig
from pekd.synthdata import GenSpec, generate

import oracles


def test_self_cca_is_one():
    X = np.random.default_rng(0).normal(size=(500, 6))
    assert ak.mean_cca(X, X) == pytest.approx(1.0, abs=1e-3)


def test_orthogonal_invariance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(400, 8))
    Y = X[:, :5] @ rng.normal(size=(5, 5)) + 0.5 * rng.normal(size=(400, 5))
    Q = ortho_group.rvs(5, random_state=2)
    assert ak.mean_cca(X, Y @ Q) == pytest.approx(ak.mean_cca(X, Y), abs=1e-9)
    assert ak.mean_cca(X, X @ ortho_group.rvs(8, random_state=3)) == pytest.approx(ak.mean_cca(X, X), abs=1e-9)


def test_independent_near_zero():
    rng = np.random.default_rng(2)
    assert ak.mean_cca(rng.normal(size=(5000, 8)), rng.normal(size=(5000, 8))) < 0.1


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_matches_cholesky_oracle(seed, d1, d2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, d1))
    Y = X[:, :1] @ rng.normal(size=(1, d2)) + rng.normal(size=(60, d2))
    assert np.allclose(ak.canonical_correlations(X, Y), oracles.brute_cca(X, Y), atol=1e-9)


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_invertible_map_invariance(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(200, 4))
    M = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    assert ak.mean_cca(X, X @ M, ridge=1e-12) == pytest.approx(ak.mean_cca(X, X, ridge=1e-12), abs=1e-6)


def test_cca_rejections():
    X = np.ones((5, 5))
    with pytest.raises(ValueError):
        ak.mean_cca(X, X)
    with pytest.raises(ValueError):
        ak.mean_cca(np.ones((10, 2)), np.ones((10, 2)), ridge=0.0)


CFG = EncoderConfig(L=2, d_v=8, d_t=8, d=4, heads=2, m=4, n=24, vocab=64)
DATA = generate(GenSpec(n_examples=60, seed=1, m=4, d_v=8, vocab=64))


def test_profile_shape_and_self_similarity():
    model = DualEncoderModel(CFG, seed=1)
    a, b = ak.dump_activations(model, DATA, "teacher"), ak.dump_activations(model, DATA, "student", batch_size=7)
    rows = ak.cca_profile(a, b)
    assert len(rows) == 2 * CFG.L
    assert all(r["cca"] == pytest.approx(1.0, abs=1e-3) for r in rows)
    shallow = DualEncoderModel(EncoderConfig(L=1, d_v=8, d_t=8, d=4, heads=2, m=4, n=24, vocab=64))
    with pytest.raises(ValueError):
        ak.cca_profile(a, ak.dump_activations(shallow, DATA, "x"))
    with pytest.raises(ValueError):
        ak.cca_profile(a, ak.dump_activations(model, DATA.subset(np.arange(59, -1, -1)), "x"))


def test_dump_round_trip(tmp_path):
    dump = ak.dump_activations(DualEncoderModel(CFG, seed=2), DATA, "lora")
    ak.save_dump(dump, tmp_path / "d.pekd")
    back = ak.load_dump(tmp_path / "d.pekd")
    assert back.tag == "lora" and np.array_equal(back.ids, dump.ids)
    for branch in ("vision", "text"):
        assert all(np.array_equal(x, y) for x, y in zip(back.layers[branch], dump.layers[branch]))
    ak.save_dump(back, tmp_path / "e.pekd")
    assert (tmp_path / "d.pekd").read_bytes() == (tmp_path / "e.pekd").read_bytes()
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        ak.load_dump(tmp_path / "bad")


def test_gate_curve_values():
    curve = ak.gate_curve(np.array([[0.1, 0.9], [0.5, 0.5], [1.0, 0.0]]))
    assert [c for c, _ in curve] == [0.5, 0.9, 1.0]
    assert curve[0][1] == pytest.approx(0.0, abs=1e-15)
    assert curve[1][1] == pytest.approx(0.5310, abs=5e-5)
    assert curve[2][1] == 1.0


@given(st.floats(0.5, 1.0))
def test_gate_curve_closed_form(c):
    ((conf, w),) = ak.gate_curve(np.array([[c, 1 - c]]))
    assert w == pytest.approx(1 - oracles.entropy([c, 1 - c]) / math.log(2), abs=1e-12)


def records(labels, preds):
    return [{"id": i, "label": y, "pred": p, "confidence": 0.9} for i, (y, p) in enumerate(zip(labels, preds))]


def test_error_breakdown_fixture():
    labels = [0, 0, 0, 1, 1, 1]
    student = records(labels, [1, 1, 0, 0, 1, 0])  # wrong at 0, 1, 3, 5
    teacher = records(labels, [1, 0, 0, 1, 1, 0])  # wrong at 0, 5
    rows = ak.error_breakdown(student, teacher)
    assert rows == [{"class": 0, "student_errors": 2, "student_only_errors": 1},
                    {"class": 1, "student_errors": 2, "student_only_errors": 1}]
    assert all(r["student_only_errors"] == 0 for r in ak.error_breakdown(student, student))
    with pytest.raises(ValueError):
        ak.error_breakdown(student, teacher[::-1])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_error_breakdown_partition(rows):
    labels, sp, tp = (list(x) for x in zip(*rows))
    out = ak.error_breakdown(records(labels, sp), records(labels, tp))
    assert sum(r["student_errors"] for r in out) == sum(a != b for a, b in zip(labels, sp))
    assert all(0 <= r["student_only_errors"] <= r["student_errors"] for r in out)


def test_confidence_quartiles():
    recs = [{"label": 0, "confidence": c} for c in (0.9, 0.6, 0.8, 0.7)] + [{"label": 1, "confidence": 1.0}] * 3
    rows = ak.confidence_stats(recs)
    assert rows[0]["median"] == pytest.approx(0.75)
    assert rows[0]["q1"] == pytest.approx(oracles.quantile([0.6, 0.7, 0.8, 0.9], 0.25))
    assert rows[1]["median"] == 1.0 and rows[1]["iqr"] == 0.0
    assert ak.confidence_stats(recs[::-1]) == rows


def test_export_embeddings():
    model = DualEncoderModel(CFG, seed=3)
    a = ak.export_embeddings(model, DATA, "teacher")
    assert len(a) == len(DATA)
    assert a == ak.export_embeddings(model, DATA, "teacher")
    b = ak.export_embeddings(DualEncoderModel(CFG, seed=4), DATA, "student")
    assert [r["id"] for r in a] == [r["id"] for r in b]
