"""Synthetic noisy-label datasets, rank-ordered noise windows and feature files.

Each instance carries a noisy label and, when known, hidden truth: ``h`` (1 for
a correctly labelled in-category instance, 0 otherwise) and ``true_label``
(-1 for outliers that belong to no category). Training code only ever sees
``x`` and ``label``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn import ShapeError

CLEAN, FLIP, OUTLIER = 0, 1, 2


class GenerationError(RuntimeError):
    pass


class TruthUnavailable(RuntimeError):
    pass


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    label: np.ndarray
    h: np.ndarray | None = None
    true_label: np.ndarray | None = None
    C: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.intp)
        if self.x.ndim != 2 or len(self.label) != len(self.x):
            raise ShapeError("x must be (n, d) with one label per row")
        if self.C is None:
            self.C = int(self.label.max()) + 1 if len(self.label) else 0
        if (self.h is None) != (self.true_label is None):
            raise ValueError("h and true_label must be given together")
        if self.h is not None:
            self.h = np.asarray(self.h, dtype=np.intp)
            self.true_label = np.asarray(self.true_label, dtype=np.intp)

    def __len__(self) -> int:
        return len(self.label)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.h is not None

    def require_truth(self) -> tuple[np.ndarray, np.ndarray]:
        if self.h is None:
            raise TruthUnavailable("dataset has no hidden-truth columns")
        return self.h, self.true_label

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x[idx], self.label[idx],
                       None if self.h is None else self.h[idx],
                       None if self.true_label is None else self.true_label[idx], self.C)

    def clean(self) -> "Dataset":
        """Instances whose true category is known (h=1)."""
        h, _ = self.require_truth()
        return self.subset(np.flatnonzero(h == 1))


@dataclass
class SyntheticSpec:
    C: int = 5
    d: int = 16
    per_class: int = 200
    outlier_ratio: float = 0.3
    flip_ratio: float = 0.05
    scale: float = 0.5            # per-coordinate std of each class cluster
    separation: float = 1.0       # distance of class means from the origin
    box: float = 2.5              # outliers are uniform in [-box, box]^d
    outlier_margin: float = 2.0   # min distance to any mean, in units of scale
    proposals: int = 4
    proposal_scale: float = 0.5
    seed: int = 0
    means: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()
        if self.means is None:
            rng = np.random.default_rng([self.seed, 7919])
            u = rng.standard_normal((self.C, self.d))
            self.means = self.separation * u / np.linalg.norm(u, axis=1, keepdims=True)
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.shape != (self.C, self.d):
            raise ShapeError(f"means must be ({self.C}, {self.d})")

    def validate(self) -> None:
        for name in ("outlier_ratio", "flip_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.outlier_ratio + self.flip_ratio >= 1.0:
            raise ValueError("outlier_ratio + flip_ratio must be < 1")
        if self.C < 1 or self.d < 1 or self.per_class < 1:
            raise ValueError("C, d and per_class must be positive")
        if self.flip_ratio > 0 and self.C < 2:
            raise ValueError("label flips need at least two categories")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def _outliers(spec: SyntheticSpec, n: int, rng: np.random.Generator,
              max_attempts: int = 1000) -> np.ndarray:
    out = np.empty((n, spec.d))
    min_dist = spec.outlier_margin * spec.scale
    for i in range(n):
        for _ in range(max_attempts):
            cand = rng.uniform(-spec.box, spec.box, spec.d)
            if np.min(np.linalg.norm(spec.means - cand, axis=1)) >= min_dist:
                out[i] = cand
                break
        else:
            raise GenerationError(f"no outlier found {min_dist:.3g} away from every mean "
                                  f"after {max_attempts} draws; enlarge box")
    return out


def generate(spec: SyntheticSpec, seed: int | None = None) -> tuple[Dataset, np.ndarray]:
    """Draw ``C * per_class`` instances with exact outlier and flip quotas.

    Returns the dataset and a per-instance tier array (CLEAN / FLIP / OUTLIER).
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    C = spec.C
    n = C * spec.per_class
    label = np.repeat(np.arange(C), spec.per_class)
    n_out = int(round(spec.outlier_ratio * n))
    n_flip = int(round(spec.flip_ratio * n))
    slots = rng.permutation(n)
    tier = np.full(n, CLEAN)
    tier[slots[:n_out]] = OUTLIER
    tier[slots[n_out:n_out + n_flip]] = FLIP

    true_label = label.copy()
    flips = np.flatnonzero(tier == FLIP)
    shift = rng.integers(1, C, size=len(flips)) if len(flips) else np.empty(0, np.intp)
    true_label[flips] = (label[flips] + shift) % C

    x = np.empty((n, spec.d))
    inliers = np.flatnonzero(tier != OUTLIER)
    x[inliers] = spec.means[true_label[inliers]] + spec.scale * rng.standard_normal((len(inliers), spec.d))
    outl = np.flatnonzero(tier == OUTLIER)
    x[outl] = _outliers(spec, len(outl), rng)
    true_label[outl] = -1
    h = (tier == CLEAN).astype(np.intp)
    return Dataset(x, label, h, true_label, C), tier


def clean_test_set(spec: SyntheticSpec, per_class: int, seed: int) -> Dataset:
    """Noise-free draws from the same planted clusters."""
    ds, _ = generate(replace(spec, per_class=per_class, outlier_ratio=0.0, flip_ratio=0.0), seed)
    return ds


def make_proposals(x: np.ndarray, count: int, scale: float, seed: int) -> np.ndarray:
    """Jittered copies of each feature row, shape (n * count, d), grouped by row."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    rep = np.repeat(x, count, axis=0)
    return rep + scale * rng.standard_normal(rep.shape)


def rank_pools(tier: np.ndarray, label: np.ndarray, C: int, seed: int) -> list[np.ndarray]:
    """Per-class instance order mimicking search rank: clean, then flips, then outliers."""
    rng = np.random.default_rng(seed)
    pools = []
    for c in range(C):
        members = np.flatnonzero(label == c)
        ordered = [rng.permutation(members[tier[members] == t]) for t in (CLEAN, FLIP, OUTLIER)]
        pools.append(np.concatenate(ordered))
    return pools


def rank_order_noise(dataset: Dataset, tier: np.ndarray, start_index: int, window: int,
                     seed: int = 0) -> Dataset:
    """Instances ranked ``start_index .. start_index + window - 1`` (1-based) per class."""
    if start_index < 1 or window < 1:
        raise ValueError("start_index and window must be >= 1")
    pools = rank_pools(tier, dataset.label, dataset.C, seed)
    idx = []
    for c, pool in enumerate(pools):
        lo = start_index - 1
        if lo + window > len(pool):
            raise ValueError(f"window [{start_index}, {start_index + window - 1}] exceeds "
                             f"class {c} pool of {len(pool)}")
        idx.append(pool[lo:lo + window])
    return dataset.subset(np.concatenate(idx))


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    strata = dataset.true_label if dataset.has_truth else dataset.label
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for s in np.unique(strata):
        members = rng.permutation(np.flatnonzero(strata == s))
        if len(members) < 2:
            raise ValueError(f"stratum {s} has fewer than two instances")
        k = min(max(int(round(test_fraction * len(members))), 1), len(members) - 1)
        test_idx.append(members[:k])
        train_idx.append(members[k:])
    return (dataset.subset(np.sort(np.concatenate(train_idx))),
            dataset.subset(np.sort(np.concatenate(test_idx))))


# -- feature files -------------------------------------------------------------

def save_features(dataset: Dataset, path: str | Path) -> None:
    truth = int(dataset.has_truth)
    lines = [f"d={dataset.d} C={dataset.C} truth={truth}"]
    for i in range(len(dataset)):
        row = [str(int(dataset.label[i]))] + [repr(float(v)) for v in dataset.x[i]]
        if truth:
            row += [str(int(dataset.h[i])), str(int(dataset.true_label[i]))]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_features(path: str | Path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError(f"{path}: empty file")
    try:
        head = dict(tok.split("=") for tok in text[0].split())
        d, C, truth = int(head["d"]), int(head["C"]), int(head.get("truth", 0))
    except (ValueError, KeyError) as exc:
        raise ParseError(f"{path}:1: bad header {text[0]!r}") from exc
    width = 1 + d + (2 if truth else 0)
    labels, xs, hs, ts = [], [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise ShapeError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
        try:
            labels.append(int(parts[0]))
            xs.append([float(v) for v in parts[1:1 + d]])
            if truth:
                hs.append(int(parts[1 + d]))
                ts.append(int(parts[2 + d]))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    x = np.array(xs, dtype=np.float64).reshape(len(xs), d)
    if truth:
        return Dataset(x, labels, hs, ts, C)
    return Dataset(x, labels, C=C)
