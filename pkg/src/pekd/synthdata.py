"""Synthetic image-text incongruity task.

Each example is a scene (shape kind, color kind, condition level) rendered as
noisy patch features, paired with a one-sentence caption that names the
shape, color and condition. Congruent captions (label 0) state the true
condition; incongruent ones (label 1) overstate it, the way sarcastic praise
does ("what a lovely, pristine car" under a wreck). Shape and color are
always described truthfully and act as distractor content.

Each example's randomness comes from ``(seed, index)`` only, so any subset of
indices can be generated independently and agrees bit-for-bit with a full run.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .encoder import PAD_ID, Batch

MAGIC = b"PKDS"
VERSION = 1

BOS, EOS = 1, 2
_THE, _IS, _LOOKS, _SO, _VERY = 3, 4, 5, 6, 7
_FIRST_CONTENT = 8


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GenSpec:
    seed: int = 0
    n_examples: int = 20000
    n_shapes: int = 6
    n_colors: int = 6
    n_levels: int = 6
    synonyms: int = 2
    m: int = 16
    d_v: int = 64
    n_tokens: int = 24
    vocab: int = 256
    noise: float = 0.3
    distractor_rate: float = 0.1
    condition_patches: int = 4
    incongruity_rate: float = 0.5
    label_noise: float = 0.0
    codebook_seed: int = 7
    shift: float = 0.0

    def __post_init__(self):
        if self.incongruity_rate != 0.5:
            raise ValueError("incongruity rate is fixed at 0.5")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if not 0 <= self.shift <= 1:
            raise ValueError("shift must lie in [0, 1]")
        if self.n_levels < 2:
            raise ValueError("need at least two condition levels")
        if not 1 <= self.condition_patches <= self.m:
            raise ValueError("condition_patches must be in [1, m]")
        if self._content_words() + _FIRST_CONTENT + 8 > self.vocab:
            raise ValueError("vocabulary too small for the attribute words")

    def _content_words(self) -> int:
        return self.n_shapes + self.n_colors + self.n_levels * self.synonyms

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown data keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    spec: GenSpec
    ids: np.ndarray  # (N,) uint64
    patches: np.ndarray  # (N, m, d_v) float64
    tokens: np.ndarray  # (N, n) int
    labels: np.ndarray  # (N,) int
    meta: list[bytes] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.spec,
            self.ids[idx],
            self.patches[idx],
            self.tokens[idx],
            self.labels[idx],
            [self.meta[i] for i in idx],
        )

    def batch(self, idx=None) -> Batch:
        """Batch view; text columns past the longest sentence are trimmed."""
        if idx is None:
            idx = np.arange(len(self))
        tokens = self.tokens[idx]
        width = int((tokens != PAD_ID).sum(axis=1).max()) if len(idx) else 1
        return Batch(self.patches[idx], tokens[:, :width], self.labels[idx], self.ids[idx])

    def batches(self, size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), size):
            yield self.batch(order[start : start + size])

    def scenes(self) -> list[dict]:
        return [json.loads(b) for b in self.meta]

    def class_counts(self) -> tuple[int, int]:
        ones = int(self.labels.sum())
        return len(self) - ones, ones


@dataclass(frozen=True)
class Lexicon:
    shapes: np.ndarray
    colors: np.ndarray
    levels: np.ndarray  # (n_levels, synonyms)
    fillers: np.ndarray

    @classmethod
    def build(cls, spec: GenSpec) -> "Lexicon":
        nxt = _FIRST_CONTENT
        shapes = np.arange(nxt, nxt + spec.n_shapes)
        nxt += spec.n_shapes
        colors = np.arange(nxt, nxt + spec.n_colors)
        nxt += spec.n_colors
        levels = np.arange(nxt, nxt + spec.n_levels * spec.synonyms).reshape(spec.n_levels, spec.synonyms)
        nxt += spec.n_levels * spec.synonyms
        return cls(shapes, colors, levels, np.arange(nxt, spec.vocab))

    def level_of(self, token: int) -> int | None:
        hit = np.argwhere(self.levels == token)
        return int(hit[0, 0]) if len(hit) else None


def codebooks(spec: GenSpec) -> dict[str, np.ndarray]:
    """Unit-norm feature codes per attribute value (shift blends in an alternate book)."""

    def book(seed):
        rng = np.random.default_rng([spec.codebook_seed, seed])
        out = {}
        for name, k in (("shape", spec.n_shapes), ("color", spec.n_colors), ("level", spec.n_levels)):
            c = rng.normal(size=(k, spec.d_v))
            out[name] = c / np.linalg.norm(c, axis=1, keepdims=True)
        return out

    base = book(0)
    if spec.shift == 0:
        return base
    alt = book(1)
    mixed = {}
    for name in base:
        c = (1 - spec.shift) * base[name] + spec.shift * alt[name]
        mixed[name] = c / np.linalg.norm(c, axis=1, keepdims=True)
    return mixed


def _example(spec: GenSpec, index: int, books, lex: Lexicon):
    rng = np.random.default_rng([spec.seed, index])
    incongruent = index % 2 == 1
    shape = int(rng.integers(spec.n_shapes))
    color = int(rng.integers(spec.n_colors))
    if incongruent:
        level = int(rng.integers(spec.n_levels - 1))
        claimed = int(rng.integers(level + 1, spec.n_levels))
    else:
        level = int(rng.integers(spec.n_levels))
        claimed = level

    # patch rendering: a few patches show the condition, the rest show shape/color
    m = spec.m
    roles = np.full(m, 1)  # 1 = object (shape + color)
    roles[rng.choice(m, size=spec.condition_patches, replace=False)] = 2
    distract = rng.random(m) < spec.distractor_rate
    roles[distract] = 0
    patches = np.empty((m, spec.d_v))
    for j in range(m):
        if roles[j] == 2:
            v = books["level"][level]
        elif roles[j] == 1:
            v = books["shape"][shape] + books["color"][color]
        else:
            v = rng.normal(size=spec.d_v)
            v /= np.linalg.norm(v)
        patches[j] = v
    patches += spec.noise * rng.normal(size=patches.shape) / np.sqrt(spec.d_v)

    # caption
    words = [BOS]
    words += list(rng.choice(lex.fillers, size=int(rng.integers(0, 3))))
    words += [_THE, int(lex.colors[color]), int(lex.shapes[shape])]
    words.append(_LOOKS if rng.random() < 0.5 else _IS)
    if rng.random() < 0.3:
        words.append(_SO if rng.random() < 0.5 else _VERY)
    words.append(int(lex.levels[claimed, rng.integers(spec.synonyms)]))
    words += list(rng.choice(lex.fillers, size=int(rng.integers(0, 3))))
    words.append(EOS)
    tokens = np.full(spec.n_tokens, PAD_ID, dtype=np.int64)
    tokens[: len(words)] = words

    flipped = bool(rng.random() < spec.label_noise)
    label = int(incongruent) ^ int(flipped)
    scene = {
        "shape": shape,
        "color": color,
        "level": level,
        "claimed": claimed,
        "flipped": flipped,
        "distractors": [int(j) for j in np.flatnonzero(distract)],
    }
    meta = json.dumps(scene, sort_keys=True, separators=(",", ":")).encode()
    return patches, tokens, label, meta


def generate(spec: GenSpec, indices=None) -> Dataset:
    """Render examples ``indices`` (default: all of ``range(n_examples)``)."""
    if indices is None:
        indices = range(spec.n_examples)
    indices = np.asarray(list(indices), dtype=np.int64)
    books = codebooks(spec)
    lex = Lexicon.build(spec)
    N = len(indices)
    patches = np.empty((N, spec.m, spec.d_v))
    tokens = np.empty((N, spec.n_tokens), dtype=np.int64)
    labels = np.empty(N, dtype=np.int64)
    meta = []
    for row, i in enumerate(indices):
        patches[row], tokens[row], labels[row], mb = _example(spec, int(i), books, lex)
        meta.append(mb)
    return Dataset(spec, indices.astype(np.uint64), patches, tokens, labels, meta)


def shifted_testset(spec: GenSpec, shift: float, seed: int | None = None, n_examples: int | None = None) -> Dataset:
    """Evaluation set with the same label rule but remapped feature codes."""
    if shift <= 0:
        raise ValueError("shift must be non-identity (> 0)")
    shifted = replace(
        spec,
        shift=shift,
        seed=spec.seed + 1_000_003 if seed is None else seed,
        n_examples=spec.n_examples if n_examples is None else n_examples,
        label_noise=0.0,
    )
    return generate(shifted)


def recompute_labels(ds: Dataset) -> np.ndarray:
    """Labels re-derived from the caption tokens and the stored scene, independently of generation.

    The claimed level is read off the caption; the true level is read from
    the scene record; a recorded annotation flip inverts the result.
    """
    lex = Lexicon.build(ds.spec)
    out = np.empty(len(ds), dtype=np.int64)
    for row, scene in enumerate(ds.scenes()):
        claimed = [lex.level_of(int(t)) for t in ds.tokens[row]]
        claimed = [c for c in claimed if c is not None]
        if len(claimed) != 1:
            raise DataFormatError(f"example {ds.ids[row]} has {len(claimed)} condition words")
        contradiction = int(claimed[0] != scene["level"])
        out[row] = contradiction ^ int(scene["flipped"])
    return out


def decode_levels(ds: Dataset) -> np.ndarray:
    """Nearest-code decoding of the condition level from patch features."""
    book = codebooks(ds.spec)["level"]
    out = np.empty(len(ds), dtype=np.int64)
    for row in range(len(ds)):
        scores = ds.patches[row] @ book.T
        best = np.unravel_index(np.argmax(scores), scores.shape)
        out[row] = best[1]
    return out


# -- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.1
    valid_fraction: float = 0.1
    teacher_fraction: float = 0.99
    student_fraction: float = 0.01
    n_splits: int = 2
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown split keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Split:
    teacher_train: np.ndarray
    valid_teacher: np.ndarray
    student_train: np.ndarray
    valid_student: np.ndarray
    test: np.ndarray

    def parts(self) -> dict[str, np.ndarray]:
        return {
            "teacher_train": self.teacher_train,
            "valid_teacher": self.valid_teacher,
            "student_train": self.student_train,
            "valid_student": self.valid_student,
            "test": self.test,
        }


def _balanced_take(rng, pool: np.ndarray, labels: np.ndarray, per_class: int) -> np.ndarray:
    picked = []
    for c in (0, 1):
        members = pool[labels[pool] == c]
        if len(members) < per_class:
            raise ValueError(f"only {len(members)} examples of class {c}, need {per_class}")
        picked.append(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.concatenate(picked))


def split(ds: Dataset, spec: SplitSpec = SplitSpec(), split_id: int = 0) -> Split:
    """Partition indices into teacher / few-shot / test sets.

    Test, teacher-validation and teacher-train sets depend only on
    ``spec.seed``. A few-shot pool is reserved up front (disjoint from all
    teacher data); few-shot split ``split_id`` draws its class-balanced
    train and validation sets from that pool.
    """
    if not 0 <= split_id < spec.n_splits:
        raise ValueError(f"split_id must be in [0, {spec.n_splits})")
    N = len(ds)
    labels = ds.labels
    n_student = int(round(spec.student_fraction * N))
    n_student -= n_student % 2
    if n_student < 2:
        raise ValueError("dataset too small for a class-balanced student split")
    per_class = n_student // 2
    rng = np.random.default_rng([spec.seed, 0])
    order = rng.permutation(N)
    n_test = int(round(spec.test_fraction * N))
    n_valid = int(round(spec.valid_fraction * N))
    test = np.sort(order[:n_test])
    rest = order[n_test:]
    pool_size = spec.n_splits * 2 * n_student
    pool = _balanced_take(rng, rest, labels, pool_size // 2)
    rest = rest[~np.isin(rest, pool)]
    valid_teacher = np.sort(rest[:n_valid])
    teacher_train = np.sort(rest[n_valid:])

    srng = np.random.default_rng([spec.seed, 1, split_id])
    student_train = _balanced_take(srng, pool, labels, per_class)
    remaining = pool[~np.isin(pool, student_train)]
    valid_student = _balanced_take(srng, remaining, labels, per_class)
    return Split(teacher_train, valid_teacher, student_train, valid_student, test)


# -- file format -------------------------------------------------------------


def dumps(ds: Dataset) -> bytes:
    spec = ds.spec
    buf = io.BytesIO()
    echo = json.dumps(spec.to_dict(), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    buf.write(struct.pack("<I", len(ds)))
    for i in range(len(ds)):
        buf.write(struct.pack("<Q", int(ds.ids[i])))
        buf.write(np.ascontiguousarray(ds.patches[i], dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(ds.tokens[i], dtype="<u4").tobytes())
        buf.write(struct.pack("<B", int(ds.labels[i])))
        buf.write(struct.pack("<I", len(ds.meta[i])))
        buf.write(ds.meta[i])
    return buf.getvalue()


def loads(data: bytes) -> Dataset:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise DataFormatError("truncated dataset file")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise DataFormatError("not a PKDS dataset (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DataFormatError(f"unsupported dataset version {version}")
    (echo_len,) = struct.unpack("<I", take(4))
    try:
        spec = GenSpec.from_dict(json.loads(bytes(take(echo_len))))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"bad spec header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    m, d_v, n = spec.m, spec.d_v, spec.n_tokens
    ids = np.empty(count, dtype=np.uint64)
    patches = np.empty((count, m, d_v))
    tokens = np.empty((count, n), dtype=np.int64)
    labels = np.empty(count, dtype=np.int64)
    meta = []
    for i in range(count):
        (ids[i],) = struct.unpack("<Q", take(8))
        patches[i] = np.frombuffer(take(8 * m * d_v), dtype="<f8").reshape(m, d_v)
        tokens[i] = np.frombuffer(take(4 * n), dtype="<u4")
        (labels[i],) = struct.unpack("<B", take(1))
        (mlen,) = struct.unpack("<I", take(4))
        meta.append(bytes(take(mlen)))
    if pos != len(view):
        raise DataFormatError("trailing bytes after last record")
    return Dataset(spec, ids, patches, tokens, labels, meta)


def save(ds: Dataset, path) -> str:
    data = dumps(ds)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads(fh.read())


def checksum(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
