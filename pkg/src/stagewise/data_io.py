"""Dataset ingestion, synthetic problem generation, splitting and hashing."""

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, SparseExample, dataset_from_examples


def parse_libsvm(source, d_hint=None):
    """Parse libsvm text ("label idx:val idx:val ...", 1-based indices).

    Indices are converted to 0-based here and nowhere else. Lines starting
    with '#' and blank lines are skipped. The dimension is the max index seen,
    or d_hint if larger. Malformed lines raise with their line number.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
        stream = io.StringIO(text)
    else:
        stream = source
    examples = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            label = float(parts[0])
        except ValueError:
            raise ValueError("line %d: non-numeric label %r" % (lineno, parts[0]))
        idx = []
        val = []
        prev = 0
        for tok in parts[1:]:
            try:
                i_str, v_str = tok.split(":", 1)
                i = int(i_str)
                v = float(v_str)
            except ValueError:
                raise ValueError("line %d: malformed feature token %r" % (lineno, tok))
            if i < 1:
                raise ValueError("line %d: libsvm indices are 1-based, got %d" % (lineno, i))
            if i <= prev:
                raise ValueError("line %d: indices must be strictly increasing" % lineno)
            if not np.isfinite(v):
                raise ValueError("line %d: non-finite feature value" % lineno)
            prev = i
            idx.append(i - 1)
            val.append(v)
        examples.append(SparseExample(label, np.array(idx, np.int64), np.array(val)))
    if not examples:
        raise ValueError("no examples found in input")
    max_idx = max((int(x.indices[-1]) for x in examples if x.nnz), default=-1)
    d = max_idx + 1
    if d_hint is not None and d_hint > d:
        d = int(d_hint)
    return dataset_from_examples(examples, dim=d)


def serialize_libsvm(ds):
    """Inverse of parse_libsvm (1-based indices, full-precision values)."""
    lines = []
    for i in range(ds.n):
        x = ds.example(i)
        toks = ["%.17g" % x.label]
        toks += ["%d:%.17g" % (j + 1, v) for j, v in zip(x.indices, x.values)]
        lines.append(" ".join(toks))
    return "\n".join(lines) + "\n"


def dataset_hash(ds):
    """Order-sensitive digest over (label, index, value) triples and shape."""
    h = hashlib.sha256()
    h.update(np.int64([ds.n, ds.dim]).tobytes())
    h.update(ds.labels.tobytes())
    h.update(ds.indptr.tobytes())
    h.update(ds.cols.tobytes())
    h.update(ds.vals.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class GeneratedQuadratic:
    """Analytic description of a generated least-squares problem.

    eigenvalues are those of the empirical-risk Hessian 2 X^T X / n under the
    square loss (y - w.x)^2, so `mu` is exactly the gradient-dominance (PL)
    constant of the empirical risk and `smoothness` its curvature bound. `minimizer` solves the noisy problem;
    w_true generated the labels.
    """

    eigenvalues: np.ndarray
    minimizer: np.ndarray
    f_star: float
    w_true: np.ndarray
    mu: float
    smoothness: float
    noise: float
    seed: int


def gen_quadratic(d, n, mu, smoothness, noise, seed):
    """Least-squares dataset whose risk Hessian has a log-spaced spectrum.

    The design matrix is built from exact singular values, so the Hessian
    2 X^T X / n of F_S under the square loss has eigenvalues log-spaced on
    [mu, smoothness] up to rounding. Labels are y = X w_true + noise * e with
    standard normal e; the same seed reproduces X and w_true for any noise.
    """
    if not 0 < mu <= smoothness:
        raise ValueError("need 0 < mu <= smoothness")
    if n < d:
        raise ValueError("need n >= d for the requested spectrum")
    rng = np.random.default_rng(seed)
    eigs = np.logspace(np.log10(mu), np.log10(smoothness), d)
    eigs[0], eigs[-1] = mu, smoothness
    svals = np.sqrt(n * eigs / 2.0)
    u, _ = np.linalg.qr(rng.standard_normal((n, d)))
    v, _ = np.linalg.qr(rng.standard_normal((d, d)))
    x = (u * svals) @ v.T
    w_true = rng.standard_normal(d)
    w_true /= np.linalg.norm(w_true)
    y = x @ w_true + noise * rng.standard_normal(n)

    w_hat, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ w_hat
    f_star = float(np.dot(resid, resid) / n)

    indptr = np.arange(0, (n + 1) * d, d, dtype=np.int64)
    cols = np.tile(np.arange(d, dtype=np.int64), n)
    ds = Dataset(d, y.astype(np.float64), indptr, cols, x.ravel().astype(np.float64))
    prob = GeneratedQuadratic(eigs, w_hat, f_star, w_true, float(mu),
                              float(smoothness), float(noise), int(seed))
    return ds, prob


def gen_classification(d, n, nnz, seed, margin=0.3, flip=0.01, col_scales=None,
                       zipf=0.0):
    """Sparse synthetic binary classification data in the libsvm shape.

    Rows carry `nnz` unit-scaled features on sorted supports; labels come from
    a planted sparse linear model. Examples inside the margin band are
    resampled so the problem is learnable, and a small fraction of labels is
    flipped outright. col_scales = (lo, hi) applies log-spaced per-feature
    scales (shuffled). zipf > 0 draws feature ids from a power-law frequency
    profile (p_j ~ 1/j^zipf), so most features are rare, as in bag-of-words
    data.
    """
    if not 1 <= nnz <= d:
        raise ValueError("need 1 <= nnz <= d")
    rng = np.random.default_rng(seed)
    w_true = np.zeros(d)
    support = rng.choice(d, size=max(1, d // 4), replace=False)
    w_true[support] = rng.standard_normal(support.size)
    w_true /= np.linalg.norm(w_true)
    scales = np.ones(d)
    if col_scales is not None:
        lo, hi = col_scales
        scales = np.logspace(np.log10(lo), np.log10(hi), d)
        rng.shuffle(scales)
    probs = None
    if zipf > 0:
        probs = 1.0 / np.arange(1, d + 1) ** zipf
        probs /= probs.sum()
    examples = []
    scale = np.sqrt(d / nnz)
    while len(examples) < n:
        idx = np.sort(rng.choice(d, size=nnz, replace=False, p=probs)).astype(np.int64)
        val = rng.standard_normal(nnz)
        val /= np.linalg.norm(val)
        z = float(np.dot(w_true[idx], val)) * scale
        if abs(z) < margin:
            continue
        y = 1.0 if z >= 0 else -1.0
        if rng.random() < flip:
            y = -y
        examples.append(SparseExample(y, idx, val * scales[idx]))
    return dataset_from_examples(examples, dim=d)


def save_problem_spec(path, d, n, mu, smoothness, noise, seed):
    """Persist the synthetic problem parameters so experiments replay."""
    Path(path).write_text(json.dumps(
        {"d": d, "n": n, "mu": mu, "L": smoothness, "noise": noise, "seed": seed},
        indent=2) + "\n")


def load_problem_spec(path):
    obj = json.loads(Path(path).read_text())
    return gen_quadratic(int(obj["d"]), int(obj["n"]), float(obj["mu"]),
                         float(obj["L"]), float(obj["noise"]), int(obj["seed"]))


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float
    validation_fraction: float = 0.0
    split_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test fraction must lie in (0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation fraction must lie in [0, 1)")
        if self.test_fraction + self.validation_fraction >= 1.0:
            raise ValueError("fractions must sum below 1")


def _subset(ds, idx):
    return dataset_from_examples([ds.example(i) for i in idx], dim=ds.dim)


def split(ds, spec):
    """(train, validation, test): a seed-deterministic disjoint partition.

    Sizes are within 1 of the requested fractions; no stratification is
    applied (class balance is a config concern, not the splitter's).
    """
    n = ds.n
    n_test = int(round(n * spec.test_fraction))
    n_val = int(round(n * spec.validation_fraction))
    if n - n_test - n_val < 1:
        raise ValueError("fractions leave no training examples")
    perm = np.random.default_rng(spec.split_seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    val_idx = np.sort(perm[n_test:n_test + n_val])
    train_idx = np.sort(perm[n_test + n_val:])
    validation = _subset(ds, val_idx) if n_val else None
    return _subset(ds, train_idx), validation, _subset(ds, test_idx)
