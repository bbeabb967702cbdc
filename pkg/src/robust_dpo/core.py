"""Domain types, dataset I/O and the feature-space linear algebra.

States and actions are dense integer ids.  A feature map is a dense
``(num_states, num_actions, dim)`` array; a preference dataset is stored
column-wise (states, first, second, labels) so that million-sample datasets
stay cheap, while still exposing :class:`PreferenceSample` records.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

FEATURE_NORM_SLACK = 1e-12
SYMMETRY_TOL = 1e-12
_SUM_CHUNK = 1 << 16


class DomainError(ValueError):
    """Raised when inputs violate an operation's mathematical preconditions."""


def _frozen(a: Any, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def seq_sum(values: np.ndarray) -> np.ndarray | float:
    """Sum along axis 0 in strict left-to-right order.

    ``np.sum`` uses pairwise summation, whose grouping depends on array size;
    the losses and gradients are specified with sequential accumulation, which
    ``cumsum`` provides.  Large inputs are processed in chunks, carrying the
    running total so the order stays exactly left to right.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] == 0:
        return np.zeros(values.shape[1:]) if values.ndim > 1 else 0.0
    total = None
    for start in range(0, values.shape[0], _SUM_CHUNK):
        chunk = values[start:start + _SUM_CHUNK]
        if total is not None:
            chunk = np.concatenate([total[None], chunk])
        total = np.cumsum(chunk, axis=0)[-1]
    if values.ndim == 1:
        return float(total)
    return total


def seq_sum_outer(x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Left-to-right sum of ``w_i * x_i x_i^T`` without materialising (n, d, d)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[1]
    total = np.zeros((d, d))
    for start in range(0, x.shape[0], _SUM_CHUNK // d):
        xc = x[start:start + _SUM_CHUNK // d]
        if weights is None:
            outer = xc[:, :, None] * xc[:, None, :]
        else:
            # weight applied after x_i x_j so entries (i, j) and (j, i) round identically
            outer = weights[start:start + xc.shape[0], None, None] * (xc[:, :, None] * xc[:, None, :])
        total = np.cumsum(np.concatenate([total[None], outer]), axis=0)[-1]
    return total


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent random stream for ``(seed, label)``.

    Splitting rule: ``SeedSequence(entropy=seed, spawn_key=(crc32(label),))``
    seeds a Philox-4x64 counter-based generator.  Both pieces are specified
    bit-for-bit by numpy and do not depend on the platform.
    """
    key = zlib.crc32(label.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class FeatureMap:
    """Dense feature table psi(s, a) in R^dim with every row of norm <= 1."""

    table: np.ndarray

    def __post_init__(self):
        table = _frozen(self.table)
        if table.ndim != 3 or min(table.shape) < 1:
            raise DomainError(f"feature table must be (states, actions, dim), got {table.shape}")
        if not np.all(np.isfinite(table)):
            raise DomainError("feature table has non-finite entries")
        norms = np.linalg.norm(table, axis=2)
        worst = float(norms.max())
        if worst > 1.0 + FEATURE_NORM_SLACK:
            s, a = np.unravel_index(int(np.argmax(norms)), norms.shape)
            raise DomainError(f"feature psi({s},{a}) has norm {worst:.6g} > 1")
        object.__setattr__(self, "table", table)

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    @property
    def num_actions(self) -> int:
        return self.table.shape[1]

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    def to_json(self) -> str:
        doc = {
            "d": self.dim,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "table": [float(v) for v in self.table.ravel()],
        }
        return json.dumps(doc) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FeatureMap":
        doc = json.loads(text)
        shape = (doc["num_states"], doc["num_actions"], doc["d"])
        flat = np.asarray(doc["table"], dtype=float)
        if flat.size != shape[0] * shape[1] * shape[2]:
            raise DomainError(f"table has {flat.size} entries, expected {shape}")
        return cls(flat.reshape(shape))


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    bound: float

    def __post_init__(self):
        theta = _frozen(self.theta)
        if theta.ndim != 1:
            raise DomainError("theta must be a vector")
        if not self.bound > 0:
            raise DomainError(f"bound must be positive, got {self.bound}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "bound", float(self.bound))

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def zeros(cls, dim: int, bound: float) -> "PolicyParams":
        return cls(np.zeros(dim), bound)

    def to_json(self) -> str:
        return json.dumps({"B": self.bound, "theta": [float(t) for t in self.theta]}) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PolicyParams":
        doc = json.loads(text)
        return cls(np.asarray(doc["theta"], dtype=float), doc["B"])


@dataclass(frozen=True)
class PreferenceSample:
    """One comparison z = (s, a1, a2, y); ``label == 1`` means a1 is preferred."""

    state: int
    first: int
    second: int
    label: int

    def __post_init__(self):
        if self.first == self.second:
            raise DomainError(f"sample compares action {self.first} with itself")
        if self.label not in (0, 1):
            raise DomainError(f"label must be 0 or 1, got {self.label}")

    def swapped(self) -> "PreferenceSample":
        """Same comparison with the two responses exchanged (label flipped)."""
        return PreferenceSample(self.state, self.second, self.first, 1 - self.label)


@dataclass(frozen=True)
class DatasetMeta:
    n: int
    seed: int | None = None
    alpha_o: float | None = None
    reward: Any = None

    def to_dict(self) -> dict:
        return {"n": self.n, "seed": self.seed, "alpha_o": self.alpha_o, "reward": self.reward}


@dataclass(frozen=True)
class PreferenceDataset:
    states: np.ndarray
    first: np.ndarray
    second: np.ndarray
    labels: np.ndarray
    meta: DatasetMeta = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        cols = [_frozen(c, dtype=np.int64) for c in (self.states, self.first, self.second, self.labels)]
        n = cols[0].shape[0]
        if any(c.ndim != 1 or c.shape[0] != n for c in cols):
            raise DomainError("dataset columns must be 1-D arrays of equal length")
        if np.any(cols[1] == cols[2]):
            raise DomainError("dataset contains a sample with first == second")
        if np.any((cols[3] != 0) & (cols[3] != 1)):
            raise DomainError("labels must be 0 or 1")
        for name, c in zip(("states", "first", "second", "labels"), cols):
            object.__setattr__(self, name, c)
        meta = self.meta if self.meta is not None else DatasetMeta(n=n)
        if meta.n != n:
            raise DomainError(f"meta.n = {meta.n} but dataset holds {n} samples")
        object.__setattr__(self, "meta", meta)

    @classmethod
    def from_samples(cls, samples: Iterable[PreferenceSample], **meta: Any) -> "PreferenceDataset":
        samples = list(samples)
        cols = np.array([[z.state, z.first, z.second, z.label] for z in samples], dtype=np.int64)
        cols = cols.reshape(len(samples), 4)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], DatasetMeta(n=len(samples), **meta))

    def __len__(self) -> int:
        return self.states.shape[0]

    def __iter__(self) -> Iterator[PreferenceSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> PreferenceSample:
        return PreferenceSample(int(self.states[i]), int(self.first[i]), int(self.second[i]), int(self.labels[i]))

    @property
    def samples(self) -> list[PreferenceSample]:
        return list(self)

    def subset(self, idx) -> "PreferenceDataset":
        idx = np.asarray(idx)
        m = self.meta
        return PreferenceDataset(
            self.states[idx], self.first[idx], self.second[idx], self.labels[idx],
            DatasetMeta(n=int(self.states[idx].shape[0]), seed=m.seed, alpha_o=m.alpha_o, reward=m.reward),
        )

    def concat(self, other: "PreferenceDataset") -> "PreferenceDataset":
        return PreferenceDataset(
            np.concatenate([self.states, other.states]),
            np.concatenate([self.first, other.first]),
            np.concatenate([self.second, other.second]),
            np.concatenate([self.labels, other.labels]),
        )

    def dumps(self) -> str:
        header = json.dumps(self.meta.to_dict())
        rows = np.stack([self.states, self.first, self.second, self.labels], axis=1)
        body = "".join(f"{s} {a} {b} {y}\n" for s, a, b, y in rows.tolist())
        return header + "\n" + body

    @classmethod
    def loads(cls, text: str) -> "PreferenceDataset":
        lines = text.splitlines()
        if not lines:
            raise DomainError("empty dataset file")
        try:
            head = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DomainError(f"line 1: bad header: {exc.msg}") from exc
        body = [ln for ln in lines[1:] if ln.strip()]
        rows = np.zeros((len(body), 4), dtype=np.int64)
        for i, ln in enumerate(body):
            parts = ln.split()
            if len(parts) != 4:
                raise DomainError(f"line {i + 2}: expected 's a1 a2 y', got {ln!r}")
            rows[i] = [int(p) for p in parts]
        meta = DatasetMeta(n=head["n"], seed=head.get("seed"), alpha_o=head.get("alpha_o"), reward=head.get("reward"))
        return cls(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "PreferenceDataset":
        return cls.loads(Path(path).read_text())


def _check_ids(fm: FeatureMap, states, first, second) -> None:
    states, first, second = np.asarray(states), np.asarray(first), np.asarray(second)
    if states.size and (states.min() < 0 or states.max() >= fm.num_states):
        raise IndexError(f"state id out of range [0, {fm.num_states})")
    for col in (first, second):
        if col.size and (col.min() < 0 or col.max() >= fm.num_actions):
            raise IndexError(f"action id out of range [0, {fm.num_actions})")


def feature_difference(sample: PreferenceSample, fm: FeatureMap) -> np.ndarray:
    """x = psi(s, a1) - psi(s, a2)."""
    _check_ids(fm, [sample.state], [sample.first], [sample.second])
    return fm.table[sample.state, sample.first] - fm.table[sample.state, sample.second]


def feature_differences(ds: PreferenceDataset, fm: FeatureMap) -> np.ndarray:
    """Row i holds the feature difference of sample i, shape (n, d)."""
    _check_ids(fm, ds.states, ds.first, ds.second)
    return fm.table[ds.states, ds.first] - fm.table[ds.states, ds.second]


def empirical_covariance(ds: PreferenceDataset, fm: FeatureMap) -> np.ndarray:
    """Sigma_D = (1/n) sum_i x_i x_i^T, accumulated sequentially."""
    if len(ds) == 0:
        raise DomainError("empirical covariance of an empty dataset")
    return seq_sum_outer(feature_differences(ds, fm)) / len(ds)


def min_eigenvalue(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
        raise DomainError("matrix is not symmetric")
    return float(np.linalg.eigvalsh(m)[0])


def max_eigenvalue(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=float)
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
        raise DomainError("matrix is not symmetric")
    return float(np.linalg.eigvalsh(m)[-1])
