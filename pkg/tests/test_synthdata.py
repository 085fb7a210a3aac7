import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pekd import synthdata
from pekd.synthdata import DataFormatError, GenSpec, SplitSpec, generate, split

SMALL = GenSpec(n_examples=400, seed=3)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def test_same_seed_gives_identical_bytes(small):
    assert synthdata.dumps(generate(SMALL)) == synthdata.dumps(small)
    assert synthdata.dumps(generate(GenSpec(n_examples=400, seed=4))) != synthdata.dumps(small)


def test_partitioned_generation_matches_serial(small):
    parts = [generate(SMALL, np.arange(a, b)) for a, b in ((0, 150), (150, 400))]
    for name in ("ids", "patches", "tokens", "labels"):
        joined = np.concatenate([getattr(p, name) for p in parts])
        assert np.array_equal(joined, getattr(small, name))


@pytest.mark.parametrize("n", [2, 400, 1000])
def test_exact_class_balance(n):
    assert generate(GenSpec(n_examples=n, seed=1)).class_counts() == (n // 2, n // 2)


def test_labels_recompute_at_zero_noise():
    ds = generate(GenSpec(n_examples=300, seed=5, noise=0.0))
    assert np.array_equal(synthdata.recompute_labels(ds), ds.labels)
    # features carry the true level: nearest-code decoding recovers it exactly
    levels = np.array([s["level"] for s in ds.scenes()])
    assert np.array_equal(synthdata.decode_levels(ds), levels)


def test_recorded_flips_are_honoured():
    ds = generate(GenSpec(n_examples=400, seed=5, label_noise=0.2))
    flipped = np.array([s["flipped"] for s in ds.scenes()])
    assert 0 < flipped.sum() < len(ds)
    assert np.array_equal(synthdata.recompute_labels(ds), ds.labels)


def test_default_split_sizes():
    ds = generate(GenSpec(n_examples=20000, seed=0, m=4, d_v=8))
    sp = split(ds, SplitSpec(), 0)
    assert len(sp.student_train) == 200
    assert np.bincount(ds.labels[sp.student_train]).tolist() == [100, 100]
    assert np.bincount(ds.labels[sp.valid_student]).tolist() == [100, 100]


def test_split_disjoint_and_trial_dependent(small):
    s0, s1 = split(small, SplitSpec(), 0), split(small, SplitSpec(), 1)
    for sp in (s0, s1):
        parts = list(sp.parts().values())
        assert sum(len(p) for p in parts) == len(np.unique(np.concatenate(parts)))
    assert not np.array_equal(s0.student_train, s1.student_train)
    assert np.array_equal(s0.test, s1.test)
    assert np.array_equal(s0.teacher_train, s1.teacher_train)
    assert not set(s1.student_train) & set(s0.teacher_train)


def test_split_rejections(small):
    with pytest.raises(ValueError):
        split(generate(GenSpec(n_examples=20, seed=1)), SplitSpec())
    with pytest.raises(ValueError):
        split(small, SplitSpec(), 2)


def test_shifted_set():
    with pytest.raises(ValueError):
        synthdata.shifted_testset(SMALL, 0.0)
    ds = synthdata.shifted_testset(SMALL, 0.5)
    assert ds.class_counts() == (200, 200)
    assert np.array_equal(synthdata.recompute_labels(ds), ds.labels)
    assert not np.allclose(synthdata.codebooks(ds.spec)["level"], synthdata.codebooks(SMALL)["level"])


def test_spec_rejections():
    with pytest.raises(ValueError):
        GenSpec(incongruity_rate=0.3)
    with pytest.raises(ValueError):
        GenSpec(noise=-1.0)
    with pytest.raises(ValueError):
        GenSpec(shift=2.0)


def test_file_round_trip(tmp_path, small):
    path = tmp_path / "a.pkds"
    digest = synthdata.save(small, path)
    back = synthdata.load(path)
    assert synthdata.save(back, tmp_path / "b.pkds") == digest
    assert (tmp_path / "a.pkds").read_bytes() == (tmp_path / "b.pkds").read_bytes()
    assert back.spec == small.spec and back.meta == small.meta


def test_corrupt_files_rejected(small):
    blob = synthdata.dumps(small.subset(np.arange(3)))
    with pytest.raises(DataFormatError):
        synthdata.loads(b"XXXX" + blob[4:])
    with pytest.raises(DataFormatError):
        synthdata.loads(blob[:-1])
    with pytest.raises(DataFormatError):
        synthdata.loads(blob + b"\0")
    with pytest.raises(DataFormatError):
        synthdata.loads(blob[:4] + (99).to_bytes(4, "little") + blob[8:])


@settings(max_examples=10)
@given(st.integers(0, 2**32), st.integers(1, 30))
def test_generation_is_pure(seed, half):
    spec = GenSpec(n_examples=2 * half, seed=seed, m=4, d_v=8)
    a, b = generate(spec), generate(spec)
    assert synthdata.dumps(a) == synthdata.dumps(b)
    assert a.class_counts() == (half, half)
