"""Fundamental types: weight vectors, sparse examples, datasets, rng streams.

Weight vectors are plain float64 ndarrays. Datasets hold their examples in
CSR-style arrays so the hot loops touch contiguous memory; the example-level
view used by the rest of the code is reconstructed on demand.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K


def as_weights(values):
    """Validate and return a dense float64 weight vector."""
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("weight vector must be 1-d, got shape %s" % (w.shape,))
    if not np.all(np.isfinite(w)):
        raise ValueError("weight vector contains non-finite entries")
    return w


def dot(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("length mismatch: %d vs %d" % (a.shape[0], b.shape[0]))
    return float(np.dot(a, b))


@dataclass(frozen=True)
class SparseExample:
    """One labeled example: y plus (index, value) pairs, strictly increasing."""

    label: float
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be equal-length 1-d arrays")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise ValueError("feature indices must be nonnegative and strictly increasing")
        if not np.all(np.isfinite(val)) or not np.isfinite(self.label):
            raise ValueError("example contains non-finite entries")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def nnz(self):
        return int(self.indices.size)


def sparse_example(label, pairs):
    """Build a SparseExample from an iterable of (index, value) pairs."""
    pairs = list(pairs)
    idx = np.array([p[0] for p in pairs], dtype=np.int64)
    val = np.array([p[1] for p in pairs], dtype=np.float64)
    return SparseExample(float(label), idx, val)


def sparse_dot(w, x):
    """w^T x for a sparse example x."""
    w = np.asarray(w, dtype=np.float64)
    if x.nnz and x.indices[-1] >= w.shape[0]:
        raise ValueError(
            "feature index %d out of range for dimension %d" % (x.indices[-1], w.shape[0])
        )
    return float(np.dot(w[x.indices], x.values))


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of sparse examples over a fixed dimension d."""

    dim: int
    labels: np.ndarray
    indptr: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dataset must hold at least one example")
        if self.cols.size and int(self.cols.max()) >= self.dim:
            raise ValueError("feature index exceeds dataset dimension")

    @property
    def n(self):
        return int(self.labels.shape[0])

    def example(self, i):
        lo, hi = int(self.indptr[i]), int(self.indptr[i + 1])
        return SparseExample(float(self.labels[i]), self.cols[lo:hi].copy(), self.vals[lo:hi].copy())

    def examples(self):
        return [self.example(i) for i in range(self.n)]

    def arrays(self):
        """(indptr, cols, vals, labels) for the kernels."""
        return self.indptr, self.cols, self.vals, self.labels

    def max_row_norm(self):
        """max_i ||x_i||_2."""
        sq = self.vals * self.vals
        sums = np.add.reduceat(np.append(sq, 0.0), self.indptr[:-1])
        sums[np.diff(self.indptr) == 0] = 0.0
        return float(np.sqrt(sums.max())) if self.n else 0.0

    def max_abs_feature(self):
        """max_i ||x_i||_inf."""
        return float(np.abs(self.vals).max()) if self.vals.size else 0.0


def dataset_from_examples(examples, dim=None):
    examples = list(examples)
    if not examples:
        raise ValueError("dataset must hold at least one example")
    max_idx = max((int(x.indices[-1]) for x in examples if x.nnz), default=-1)
    d = max_idx + 1 if dim is None else int(dim)
    if max_idx >= d:
        raise ValueError("feature index %d exceeds dimension %d" % (max_idx, d))
    labels = np.array([x.label for x in examples], dtype=np.float64)
    indptr = np.zeros(len(examples) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([x.nnz for x in examples])
    cols = np.concatenate([x.indices for x in examples]) if indptr[-1] else np.empty(0, np.int64)
    vals = np.concatenate([x.values for x in examples]) if indptr[-1] else np.empty(0, np.float64)
    return Dataset(d, labels, indptr, cols.astype(np.int64), vals.astype(np.float64))


def make_neighbor(ds, index, replacement):
    """Copy of ds with the example at `index` replaced; ds itself is untouched."""
    if not 0 <= index < ds.n:
        raise ValueError("index %d out of range for n=%d" % (index, ds.n))
    if replacement.nnz and int(replacement.indices[-1]) >= ds.dim:
        raise ValueError("replacement does not respect dimension %d" % ds.dim)
    lo, hi = int(ds.indptr[index]), int(ds.indptr[index + 1])
    labels = ds.labels.copy()
    labels[index] = replacement.label
    cols = np.concatenate([ds.cols[:lo], replacement.indices, ds.cols[hi:]])
    vals = np.concatenate([ds.vals[:lo], replacement.values, ds.vals[hi:]])
    indptr = ds.indptr.copy()
    indptr[index + 1 :] += replacement.nnz - (hi - lo)
    return Dataset(ds.dim, labels, indptr, cols.astype(np.int64), vals.astype(np.float64))


@dataclass
class RngStream:
    """Counter-based uniform index stream; replay from (seed, 0) is bit-exact.

    The draw at a given (seed, counter) is a pure function, so twin
    trajectories share one index sequence by sharing (seed, counter), and a
    stage can be replayed without disturbing the stream.
    """

    seed: int
    counter: int = 0

    def draw(self, n):
        if n < 1:
            raise ValueError("cannot draw an index from an empty range")
        i = int(K.draw_at(self.seed, self.counter, n))
        self.counter += 1
        return i

    def peek_block(self, count, n):
        """Indices for the next `count` draws without advancing."""
        return K.draw_block(self.seed, self.counter, count, n)

    def skip(self, count):
        self.counter += int(count)

    def clone(self):
        return RngStream(self.seed, self.counter)


def draw_index(rng, n):
    """Advance rng by one draw and return a uniform index in [0, n)."""
    return rng.draw(n)
