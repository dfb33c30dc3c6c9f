"""Category-level semantic representations.

A diagonal GMM fitted on proposal features acts as a visual codebook. Each
category is encoded as the mean responsibility vector of its proposals with
the smallest entries zeroed, then projected by a transform ``W`` whose rows are
learned one at a time as leading eigenvectors of
``R H R^T - 2 beta W^T W``. Encodings can be stacked with other per-category
blocks (attributes, word vectors) into one semantic matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .nn import ShapeError

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


class ConvergenceError(ArithmeticError):
    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


# -- semantic matrix -----------------------------------------------------------

@dataclass
class SemanticMatrix:
    A: np.ndarray
    blocks: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        if self.A.ndim != 2:
            raise ShapeError("semantic matrix must be 2-d")
        if not self.blocks:
            self.blocks = [("block", self.A.shape[0])]
        if sum(w for _, w in self.blocks) != self.A.shape[0]:
            raise ShapeError("block widths do not sum to the row count")
        if np.any(np.all(self.A == 0, axis=0)):
            raise ValueError("semantic matrix has an all-zero column")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def C(self) -> int:
        return self.A.shape[1]

    @property
    def offsets(self) -> list[int]:
        return list(np.cumsum([0] + [w for _, w in self.blocks[:-1]]))

    def save(self, path: str | Path) -> None:
        names = " ".join(f"{name}:{width}" for name, width in self.blocks)
        lines = [f"m={self.m} C={self.C} blocks={names}"]
        # column-major: one line per category
        lines += [" ".join(repr(float(v)) for v in col) for col in self.A.T]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SemanticMatrix":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        head = dict(tok.split("=", 1) for tok in lines[0].split(maxsplit=2))
        m, C = int(head["m"]), int(head["C"])
        blocks = []
        for item in head.get("blocks", "").split():
            name, width = item.rsplit(":", 1)
            blocks.append((name, int(width)))
        cols = [np.array([float(v) for v in ln.split()]) for ln in lines[1:]]
        if len(cols) != C or any(len(col) != m for col in cols):
            raise ShapeError(f"{path}: expected {C} columns of length {m}")
        return cls(np.stack(cols, axis=1), blocks)


def hybrid_concat(blocks: Sequence[tuple[str, np.ndarray]] | Sequence[np.ndarray]) -> SemanticMatrix:
    """Stack per-category blocks after L2-normalising every column of each block."""
    if not blocks:
        raise ValueError("need at least one block")
    named = [b if isinstance(b, tuple) else (f"block{i}", b) for i, b in enumerate(blocks)]
    C = np.asarray(named[0][1]).shape[1]
    parts, meta = [], []
    for name, block in named:
        block = np.atleast_2d(np.asarray(block, dtype=np.float64))
        if block.shape[1] != C:
            raise ShapeError(f"block {name!r} has {block.shape[1]} columns, expected {C}")
        norms = np.linalg.norm(block, axis=0)
        if np.any(norms == 0):
            raise ValueError(f"block {name!r} has an all-zero column")
        parts.append(block / norms)
        meta.append((name, block.shape[0]))
    return SemanticMatrix(np.vstack(parts), meta)


# -- GMM codebook --------------------------------------------------------------

@dataclass
class GmmModel:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, p)
    variances: np.ndarray    # (K, p)
    log_likelihood: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.weights)

    def component_log_prob(self, x: np.ndarray) -> np.ndarray:
        """log pi_k + log N(x; mu_k, diag var_k) for each row of x, shape (n, K)."""
        x = np.atleast_2d(x)
        p = x.shape[1]
        prec = 1.0 / self.variances
        # expanded (x - mu)^2 / var as matrix products; avoids an (n, K, p) temporary
        maha = (x * x) @ prec.T - 2.0 * x @ (self.means * prec).T + np.sum(self.means ** 2 * prec, axis=1)
        logdet = np.sum(np.log(self.variances), axis=1)
        return np.log(self.weights)[None] - 0.5 * (p * LOG_2PI + logdet[None] + maha)

    def save(self, path: str | Path) -> None:
        lines = [f"K={self.K} p={self.means.shape[1]}"]
        for k in range(self.K):
            lines.append(" ".join([repr(float(self.weights[k]))]
                                  + [repr(float(v)) for v in self.means[k]]
                                  + [repr(float(v)) for v in self.variances[k]]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GmmModel":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        head = dict(tok.split("=") for tok in lines[0].split())
        K, p = int(head["K"]), int(head["p"])
        rows = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
        if rows.shape != (K, 1 + 2 * p):
            raise ShapeError(f"{path}: expected {K} rows of {1 + 2 * p} values")
        return cls(rows[:, 0], rows[:, 1:1 + p], rows[:, 1 + p:])


def _logsumexp(a: np.ndarray) -> np.ndarray:
    amax = a.max(axis=1, keepdims=True)
    return (amax + np.log(np.exp(a - amax).sum(axis=1, keepdims=True)))[:, 0]


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def gmm_fit(samples: np.ndarray, K: int, seed: int = 0, max_iters: int = 200,
            tol: float = 1e-6) -> GmmModel:
    """EM for a diagonal-covariance mixture.

    Stops when the mean log-likelihood improves by less than ``tol``. The
    per-iteration log-likelihood (evaluated at the E-step) is kept on the
    returned model.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("samples must be a 2-d array")
    n, p = x.shape
    if K < 1 or n < K:
        raise ValueError(f"need at least K={K} samples, got {n}")
    rng = np.random.default_rng(seed)
    gvar = np.maximum(x.var(axis=0), VAR_FLOOR)
    center = x.mean(axis=0)
    xc = x - center
    gmm = GmmModel(np.full(K, 1.0 / K), _kmeanspp(x, K, rng), np.tile(gvar, (K, 1)))

    prev = -np.inf
    for it in range(max_iters):
        logp = gmm.component_log_prob(x)
        lse = _logsumexp(logp)
        ll = float(lse.mean())
        gmm.log_likelihood.append(ll)
        resp = np.exp(logp - lse[:, None])

        nk = resp.sum(axis=0)
        denom = np.maximum(nk, 1e-300)[:, None]
        means = (resp.T @ x) / denom
        # second moments about the component means, computed on globally centered
        # data so the expanded form does not lose precision to large offsets
        means0 = means - center
        sq = resp.T @ (xc * xc) - nk[:, None] * means0 ** 2
        variances = np.maximum(sq / denom, VAR_FLOOR)
        dead = nk < 1e-10
        for k in np.flatnonzero(dead):
            log.info("gmm_fit: component %d lost all mass at iteration %d; re-seeding", k, it)
            means[k] = x[rng.integers(n)]
            variances[k] = gvar
            nk[k] = 1.0
        gmm.weights = nk / nk.sum()
        gmm.means, gmm.variances = means, variances

        if ll - prev < tol:
            break
        prev = ll
    return gmm


def responsibilities(x: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """Posterior component probabilities; one row per input row."""
    x = np.asarray(x, dtype=np.float64)
    logp = gmm.component_log_prob(x)
    out = np.exp(logp - _logsumexp(logp)[:, None])
    return out if x.ndim == 2 else out[0]


# -- category encodings --------------------------------------------------------

def suppress_smallest(gamma: np.ndarray, count: int | None = None) -> np.ndarray:
    """Zero the ``count`` smallest entries (ties go to the lower index first)."""
    gamma = np.asarray(gamma, dtype=np.float64).copy()
    K = len(gamma)
    count = min(10, K - 1) if count is None else count
    order = np.argsort(gamma, kind="stable")
    gamma[order[:count]] = 0.0
    return gamma


def encode_category(proposals: Mapping[int, np.ndarray], gmm: GmmModel, C: int | None = None,
                    suppress: int | None = None) -> np.ndarray:
    """Return R, the (K, C) matrix of suppressed mean responsibilities.

    ``proposals`` maps a category index to its proposal features (rows).
    """
    C = (max(proposals) + 1) if C is None else C
    R = np.zeros((gmm.K, C))
    for c in range(C):
        feats = proposals.get(c)
        if feats is None or len(feats) == 0:
            raise ValueError(f"category {c} has no proposals")
        gbar = responsibilities(np.atleast_2d(feats), gmm).mean(axis=0)
        R[:, c] = suppress_smallest(gbar, suppress)
    return R


def build_laplacian(C: int) -> np.ndarray:
    if C < 2:
        raise ValueError("separation needs at least two categories")
    return C * np.eye(C) - np.ones((C, C))


def separation_objective(W: np.ndarray, R: np.ndarray, H: np.ndarray) -> float:
    WR = np.atleast_2d(W) @ R
    return float(np.trace(WR @ H @ WR.T))


@dataclass
class TransformStep:
    eigenvalue: float
    residual: float
    iterations: int


@dataclass
class TransformMatrix:
    W: np.ndarray
    steps: list[TransformStep] = field(default_factory=list)


def leading_eigenvector(M: np.ndarray, tol: float = 1e-8, max_iters: int = 10000,
                        seed: int = 0, square_every: int = 20,
                        ) -> tuple[float, np.ndarray, int, float]:
    """Eigenpair of the algebraically largest eigenvalue of symmetric M.

    Power iteration on ``B = (M + s I) / norm`` with ``-s`` the Gershgorin lower
    bound of the spectrum, so B is positive semidefinite and its dominant
    eigenvector belongs to the largest eigenvalue of M. When ``square_every``
    consecutive steps fail to converge, the iteration matrix is squared
    (B -> B^2 -> B^4 ...); the penalty term makes the spectrum wide compared
    with the gaps between the leading eigenvalues, and plain power steps stall.
    Convergence is declared on the residual ``||M v - lam v||`` against M itself.
    """
    M = np.asarray(M, dtype=np.float64)
    K = M.shape[0]
    radius = np.abs(M).sum(axis=1) - np.abs(np.diag(M))
    lower = float(np.min(np.diag(M) - radius))
    upper = float(np.max(np.diag(M) + radius))
    if max(abs(lower), abs(upper)) < 1e-300:
        raise ConvergenceError("matrix is numerically zero", 0)
    shift = max(0.0, -lower)
    P = (M + shift * np.eye(K)) / (upper + shift)

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(K)
    v /= np.linalg.norm(v)
    lam, res = 0.0, np.inf
    squarings = 0
    for it in range(1, max_iters + 1):
        y = P @ v
        norm = np.linalg.norm(y)
        if norm == 0.0:
            # start vector orthogonal to the dominant space
            v = rng.standard_normal(K)
            v /= np.linalg.norm(v)
            continue
        v = y / norm
        Mv = M @ v
        lam = float(v @ Mv)
        res = float(np.linalg.norm(Mv - lam * v))
        if res <= tol:
            return lam, v, it, res
        if it % square_every == 0 and squarings < 60:
            P = P @ P
            P /= max(np.abs(P).max(), 1e-300)
            squarings += 1
    raise ConvergenceError(f"power iteration did not reach residual {tol:g} "
                           f"(last {res:.3g}) in {max_iters} iterations", max_iters)


def learn_transform(R: np.ndarray, H: np.ndarray, n_rows: int, beta: float = 100.0,
                    tol: float = 1e-8, max_iters: int = 10000, seed: int = 0) -> TransformMatrix:
    """Grow W one unit-norm row at a time, each the leading eigenvector of
    ``R H R^T - 2 beta W^T W`` for the rows found so far."""
    K = R.shape[0]
    if H.shape[0] < 2:
        raise ValueError("separation needs at least two categories")
    if not 1 <= n_rows <= K:
        raise ValueError(f"n_rows must be in [1, {K}], got {n_rows}")
    S = R @ H @ R.T
    S = 0.5 * (S + S.T)
    W = np.zeros((0, K))
    steps = []
    for k in range(n_rows):
        M = S - 2.0 * beta * (W.T @ W)
        lam, w, iters, res = leading_eigenvector(M, tol, max_iters, seed + k)
        W = np.vstack([W, w])
        steps.append(TransformStep(lam, res, iters))
    return TransformMatrix(W, steps)


def visual_encoding(proposals: Mapping[int, np.ndarray], C: int, K: int, n_rows: int,
                    beta: float = 100.0, seed: int = 0, gmm: GmmModel | None = None,
                    ) -> tuple[np.ndarray, GmmModel, TransformMatrix]:
    """End-to-end codebook -> encodings -> transform; returns the (n_rows, C) block."""
    if gmm is None:
        pool = np.vstack([np.atleast_2d(proposals[c]) for c in range(C)])
        gmm = gmm_fit(pool, K, seed=seed)
    R = encode_category(proposals, gmm, C)
    tm = learn_transform(R, build_laplacian(C), n_rows, beta, seed=seed)
    return tm.W @ R, gmm, tm
