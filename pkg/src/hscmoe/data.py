"""Category hierarchy, synthetic ranking data, record files and batching.

Encoded sparse ids reserve 0 for out-of-vocabulary values; real categories
start at 1. Column 0 of ``Dataset.sparse`` is the sub-category and column 1
its top-category.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

OOV = 0


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryTree:
    """Two-level hierarchy: each sub-category id maps to one top-category id."""

    parent: dict

    def __post_init__(self):
        object.__setattr__(self, "parent", {int(k): int(v) for k, v in self.parent.items()})

    @property
    def sc_ids(self):
        return sorted(self.parent)

    @property
    def tc_ids(self):
        return sorted(set(self.parent.values()))

    def children(self, tc):
        return [sc for sc, p in sorted(self.parent.items()) if p == tc]

    def tc_of(self, sc_ids):
        lookup = np.zeros(max(self.parent, default=0) + 1, dtype=np.int64)
        for sc, tc in self.parent.items():
            lookup[sc] = tc
        sc_ids = np.asarray(sc_ids, dtype=np.int64)
        ok = (sc_ids >= 0) & (sc_ids < len(lookup))
        return np.where(ok, lookup[np.where(ok, sc_ids, 0)], OOV)


@dataclass(frozen=True)
class Example:
    session_id: int
    sc_id: int
    tc_id: int
    sparse: tuple
    numeric: np.ndarray
    y: int


@dataclass
class Dataset:
    """Columnar examples; rows of a session are contiguous."""

    session: np.ndarray
    sparse: np.ndarray
    numeric: np.ndarray
    y: np.ndarray
    tree: CategoryTree
    vocab_sizes: tuple
    sparse_names: tuple = ("sc", "tc")
    numeric_names: tuple = ()
    truth: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.session = np.asarray(self.session, dtype=np.int64).reshape(-1)
        n = len(self.session)
        self.sparse = _as_2d(self.sparse, np.int64, n)
        self.numeric = _as_2d(self.numeric, np.float64, n)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)

    def __len__(self):
        return len(self.session)

    @property
    def sc(self):
        return self.sparse[:, 0]

    @property
    def tc(self):
        return self.sparse[:, 1]

    @property
    def n_sessions(self):
        return len(np.unique(self.session))

    def example(self, i) -> Example:
        return Example(int(self.session[i]), int(self.sc[i]), int(self.tc[i]),
                       tuple(int(v) for v in self.sparse[i, 2:]), self.numeric[i].copy(),
                       int(self.y[i]))

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.session[rows], self.sparse[rows], self.numeric[rows], self.y[rows],
                       self.tree, self.vocab_sizes, self.sparse_names, self.numeric_names,
                       self.truth)

    def select_sessions(self, session_ids):
        return self.take(np.flatnonzero(np.isin(self.session, list(session_ids))))

    def to_xy(self):
        """``(X, y, groups)`` with X = [sparse ids | numeric] as float64."""
        X = np.hstack([self.sparse.astype(np.float64), self.numeric])
        return X, self.y.copy(), self.session.copy()

    def check_hierarchy(self):
        return bool(np.all(self.tree.tc_of(self.sc) == self.tc))


def _as_2d(a, dtype, n):
    a = np.asarray(a, dtype=dtype)
    return a if a.ndim == 2 and len(a) == n else a.reshape(n, -1)


def session_slices(session):
    """Row index arrays, one per distinct session id, in order of first appearance."""
    session = np.asarray(session)
    if len(session) == 0:
        return []
    _, first, inv = np.unique(session, return_index=True, return_inverse=True)
    order = np.argsort(inv.reshape(-1), kind="stable")
    counts = np.bincount(inv.reshape(-1))
    groups = np.split(order, np.cumsum(counts)[:-1])
    return [groups[g] for g in np.argsort(first, kind="stable")]


# synthetic data --------------------------------------------------------

@dataclass
class SynthSpec:
    n_tc: int = 4
    n_sc_per_tc: int = 4
    sessions_per_sc: int | Sequence[int] = 2000
    small_sessions: int | None = 200
    n_small_per_tc: int = 1
    items_per_session: int = 10
    positives_per_session: int = 2
    n_numeric: int = 8
    n_brands: int = 30
    n_segments: int = 8
    tc_weight_scale: float = 1.0
    sc_weight_jitter: float = 0.15
    brand_scale: float = 0.5
    label_noise: float = 0.05
    test_fraction: float = 0.2
    tc_weights: list | None = None
    seed: int = 0

    def __post_init__(self):
        counts = [self.n_tc, self.n_sc_per_tc, self.items_per_session, self.positives_per_session]
        if min(counts) < 1 or self.n_numeric < 1:
            raise ValueError("synthetic counts must be >= 1")
        if not 0 <= self.label_noise < 0.5:
            raise ValueError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        if self.positives_per_session >= self.items_per_session:
            raise ValueError("positives_per_session must be below items_per_session")

    def session_counts(self):
        n_sc = self.n_tc * self.n_sc_per_tc
        if not isinstance(self.sessions_per_sc, int):
            counts = [int(c) for c in self.sessions_per_sc]
            if len(counts) != n_sc:
                raise ValueError(f"sessions_per_sc needs {n_sc} entries")
            return counts
        counts = [self.sessions_per_sc] * n_sc
        if self.small_sessions is not None:
            for t in range(self.n_tc):
                for s in range(min(self.n_small_per_tc, self.n_sc_per_tc)):
                    counts[t * self.n_sc_per_tc + self.n_sc_per_tc - 1 - s] = self.small_sessions
        return counts

    def to_dict(self):
        d = asdict(self)
        if not isinstance(d["sessions_per_sc"], int):
            d["sessions_per_sc"] = list(d["sessions_per_sc"])
        return d


def synth_weights(spec: SynthSpec, rng):
    """Ground-truth per-SC feature weights (row 0 = OOV, unused)."""
    m = spec.n_numeric
    if spec.tc_weights is not None:
        base = np.asarray(spec.tc_weights, dtype=np.float64).reshape(spec.n_tc, m)
    else:
        base = rng.normal(0.0, spec.tc_weight_scale, size=(spec.n_tc, m))
    n_sc = spec.n_tc * spec.n_sc_per_tc
    w = np.zeros((n_sc + 1, m))
    for t in range(spec.n_tc):
        for s in range(spec.n_sc_per_tc):
            sc = 1 + t * spec.n_sc_per_tc + s
            w[sc] = base[t] + rng.normal(0.0, spec.sc_weight_jitter, size=m)
    brand = rng.normal(0.0, 1.0, size=(spec.n_tc + 1, spec.n_brands + 1))
    return base, w, brand


def generate_synthetic(spec: SynthSpec):
    """Return ``(train, test)`` datasets drawn from per-SC logistic scorers.

    Sibling sub-categories share their top-category's weight vector up to a
    small jitter, so feature importance differs mostly across top-categories.
    Within each session the highest-scoring items are labelled positive, then
    labels flip with probability ``label_noise``.
    """
    rng = np.random.default_rng(spec.seed)
    tc_base, w, brand_fx = synth_weights(spec, rng)
    n_sc = spec.n_tc * spec.n_sc_per_tc
    parent = {0: 0}
    for sc in range(1, n_sc + 1):
        parent[sc] = 1 + (sc - 1) // spec.n_sc_per_tc
    tree = CategoryTree(parent)
    counts = spec.session_counts()
    L, m = spec.items_per_session, spec.n_numeric

    sess_sc = np.repeat(np.arange(1, n_sc + 1), counts)
    S = len(sess_sc)
    sess_seg = rng.integers(1, spec.n_segments + 1, size=S)
    numeric = rng.random((S, L, m))
    brands = rng.integers(1, spec.n_brands + 1, size=(S, L))
    sess_tc = tree.tc_of(sess_sc)
    score = np.einsum("slm,sm->sl", numeric, w[sess_sc])
    score += spec.brand_scale * brand_fx[sess_tc[:, None], brands]
    order = np.argsort(-score, axis=1, kind="stable")
    labels = np.zeros((S, L), dtype=np.int64)
    np.put_along_axis(labels, order[:, : spec.positives_per_session], 1, axis=1)
    if spec.label_noise > 0:
        flip = rng.random((S, L)) < spec.label_noise
        labels = np.where(flip, 1 - labels, labels)

    is_test = np.zeros(S, dtype=bool)
    start = 0
    for c in counts:
        n_test = int(round(c * spec.test_fraction))
        pick = rng.permutation(c)[:n_test]
        is_test[start + pick] = True
        start += c

    sparse = np.stack(
        [
            np.repeat(sess_sc, L),
            np.repeat(sess_tc, L),
            brands.reshape(-1),
            np.repeat(sess_seg, L),
        ],
        axis=1,
    )
    session = np.repeat(np.arange(S), L)
    vocab = (n_sc + 1, spec.n_tc + 1, spec.n_brands + 1, spec.n_segments + 1)
    truth = {"tc_weights": tc_base, "sc_weights": w, "brand_effects": brand_fx,
             "score": score.reshape(-1)}
    names = ("sc", "tc", "brand", "segment")
    full = Dataset(session, sparse, numeric.reshape(S * L, m), labels.reshape(-1), tree, vocab,
                   names, tuple(f"f{j}" for j in range(m)), truth)
    test_rows = np.repeat(is_test, L)
    train, test = full.take(np.flatnonzero(~test_rows)), full.take(np.flatnonzero(test_rows))
    scaler = MinMaxStats.fit(train.numeric)
    train.numeric = scaler.apply(train.numeric)
    test.numeric = scaler.apply(test.numeric)
    train.truth = dict(truth, score=truth["score"][~test_rows], stats=scaler)
    test.truth = dict(truth, score=truth["score"][test_rows], stats=scaler)
    return train, test


# normalization and record files ----------------------------------------

@dataclass
class MinMaxStats:
    min: np.ndarray
    max: np.ndarray

    @classmethod
    def fit(cls, numeric):
        numeric = np.asarray(numeric, dtype=np.float64)
        if len(numeric) == 0:
            return cls(np.zeros(numeric.shape[1]), np.ones(numeric.shape[1]))
        return cls(numeric.min(axis=0), numeric.max(axis=0))

    def apply(self, numeric):
        span = np.where(self.max > self.min, self.max - self.min, 1.0)
        return (np.asarray(numeric, dtype=np.float64) - self.min) / span

    def to_dict(self):
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


@dataclass
class Schema:
    """Column roles for a record file plus the sub- to top-category map."""

    session: str
    label: str
    sc: str
    parent: dict
    tc: str = "tc"
    sparse: list = field(default_factory=list)
    numeric: list = field(default_factory=list)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @property
    def required(self):
        return [self.session, self.label, self.sc, *self.sparse, *self.numeric]


class RecordEncoder:
    """Vocabularies and min-max stats learned from a training split.

    Follows the fit/transform convention; unseen values encode to OOV 0.
    """

    def __init__(self, schema: Schema):
        self.schema = schema

    def fit(self, records):
        s = self.schema
        cols = [s.sc, s.tc, *s.sparse]
        values = {c: set() for c in cols}
        for r in records:
            values[s.sc].add(str(r[s.sc]))
            tc = s.parent.get(str(r[s.sc]))
            if tc is not None:
                values[s.tc].add(str(tc))
            for c in s.sparse:
                values[c].add(str(r[c]))
        # every declared category gets an id even if it has no training rows
        values[s.tc].update(str(v) for v in s.parent.values())
        self.vocab_ = {c: {v: i + 1 for i, v in enumerate(sorted(values[c]))} for c in cols}
        num = np.array([[float(r[c]) for c in s.numeric] for r in records]).reshape(-1, len(s.numeric))
        self.stats_ = MinMaxStats.fit(num)
        return self

    def transform(self, records, session_ids=None):
        s = self.schema
        sc_v, tc_v = self.vocab_[s.sc], self.vocab_[s.tc]
        n = len(records)
        sparse = np.zeros((n, 2 + len(s.sparse)), dtype=np.int64)
        numeric = np.zeros((n, len(s.numeric)))
        y = np.zeros(n, dtype=np.int64)
        keys = {}
        session = np.zeros(n, dtype=np.int64)
        for i, r in enumerate(records):
            sc = str(r[s.sc])
            sparse[i, 0] = sc_v.get(sc, OOV)
            sparse[i, 1] = tc_v.get(str(s.parent.get(sc)), OOV) if sc in s.parent else OOV
            for j, c in enumerate(s.sparse):
                sparse[i, 2 + j] = self.vocab_[c].get(str(r[c]), OOV)
            numeric[i] = [float(r[c]) for c in s.numeric]
            y[i] = int(r[s.label])
            session[i] = keys.setdefault(str(r[s.session]), len(keys))
        return Dataset(session, sparse, self.stats_.apply(numeric) if n else numeric, y,
                       self.tree(), self.vocab_sizes, (s.sc, s.tc, *s.sparse), tuple(s.numeric))

    def tree(self):
        s = self.schema
        sc_v, tc_v = self.vocab_[s.sc], self.vocab_[s.tc]
        parent = {0: 0}
        for sc, i in sc_v.items():
            parent[i] = tc_v.get(str(s.parent.get(sc)), OOV)
        return CategoryTree(parent)

    @property
    def vocab_sizes(self):
        s = self.schema
        return tuple(len(self.vocab_[c]) + 1 for c in (s.sc, s.tc, *s.sparse))

    def to_dict(self):
        return {"vocab": self.vocab_, "stats": self.stats_.to_dict()}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, schema):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        enc = cls(schema)
        enc.vocab_ = d["vocab"]
        enc.stats_ = MinMaxStats.from_dict(d["stats"])
        return enc


def read_records(path, schema: Schema):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            for col in schema.required:
                if col not in rec:
                    raise RecordError(f"{path}:{lineno}: missing required column {col!r}")
            records.append(rec)
    return records


def load_records(path, schema: Schema, encoder: RecordEncoder | None = None):
    """Load a newline-delimited JSON record file.

    Without ``encoder`` the file is treated as the training split and a new
    encoder is fitted on it. Returns ``(dataset, encoder)``.
    """
    records = read_records(path, schema)
    if encoder is None:
        encoder = RecordEncoder(schema).fit(records)
    return encoder.transform(records), encoder


def write_records(path, dataset: Dataset, raw_numeric=None):
    """Write a dataset as records with readable category names."""
    numeric = dataset.numeric if raw_numeric is None else raw_numeric
    names = dataset.sparse_names
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            rec = {"session": f"s{int(dataset.session[i])}", "label": int(dataset.y[i])}
            for j, name in enumerate(names):
                if name == "tc":
                    continue
                rec[name] = f"{name}{int(dataset.sparse[i, j])}"
            for j, name in enumerate(dataset.numeric_names):
                rec[name] = float(numeric[i, j])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def schema_for(dataset: Dataset):
    names = dataset.sparse_names
    parent = {f"sc{sc}": f"tc{tc}" for sc, tc in dataset.tree.parent.items() if sc != OOV}
    return Schema(session="session", label="label", sc="sc", tc="tc", parent=parent,
                  sparse=list(names[2:]), numeric=list(dataset.numeric_names))


def save_synthetic(out_dir, spec: SynthSpec):
    """Generate and write ``train.jsonl``, ``test.jsonl``, schema and stats."""
    os.makedirs(out_dir, exist_ok=True)
    train, test = generate_synthetic(spec)
    write_records(os.path.join(out_dir, "train.jsonl"), train)
    write_records(os.path.join(out_dir, "test.jsonl"), test)
    schema = schema_for(train)
    schema.save(os.path.join(out_dir, "schema.json"))
    _, enc = load_records(os.path.join(out_dir, "train.jsonl"), schema)
    enc.save(os.path.join(out_dir, "stats.json"))
    with open(os.path.join(out_dir, "synth_spec.json"), "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    return train, test


def load_dir(data_dir):
    """Load a directory written by :func:`save_synthetic` (or laid out the same way)."""
    schema = Schema.load(os.path.join(data_dir, "schema.json"))
    stats = os.path.join(data_dir, "stats.json")
    enc = RecordEncoder.load(stats, schema) if os.path.exists(stats) else None
    train, enc = load_records(os.path.join(data_dir, "train.jsonl"), schema, enc)
    test_path = os.path.join(data_dir, "test.jsonl")
    test = load_records(test_path, schema, enc)[0] if os.path.exists(test_path) else None
    return train, test, enc


# batching --------------------------------------------------------------

def session_batches(session, batch_size, shuffle_seed=None):
    """Row-index arrays holding whole sessions, ``batch_size`` sessions each."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups = session_slices(session)
    order = np.arange(len(groups))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(groups))
    out = []
    for start in range(0, len(order), batch_size):
        out.append(np.concatenate([groups[g] for g in order[start:start + batch_size]]))
    return out


def batch_iter(dataset: Dataset, batch_size, shuffle_seed=None) -> Iterator[Dataset]:
    for rows in session_batches(dataset.session, batch_size, shuffle_seed):
        yield dataset.take(rows)
