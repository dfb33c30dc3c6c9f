"""Metrics and the ablation / noise-level harness.

Modes:

* ``wsci``       latent-head classifier weighted by the model's own
                 reconstruction density
* ``unweighted`` same network, weights pinned to 1 and no reconstruction term
* ``sim1``       plain VAE (KL + reconstruction) weighting a separate classifier on x
* ``sim2``       semantic VAE weighting a separate classifier on x
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import data as D
from .encoding import SemanticMatrix, hybrid_concat, visual_encoding
from .model import MODES, WsciConfig, outlier_scores, predict, train

log = logging.getLogger(__name__)


# -- metrics -------------------------------------------------------------------

def accuracy(probs: np.ndarray, true_labels: np.ndarray | None) -> float:
    if true_labels is None:
        raise D.TruthUnavailable("accuracy needs true labels")
    probs = np.atleast_2d(probs)
    true_labels = np.asarray(true_labels)
    if len(probs) != len(true_labels):
        raise ValueError("predictions and labels differ in length")
    if len(true_labels) == 0:
        raise ValueError("empty evaluation set")
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return float(np.mean(np.argmax(probs, axis=1) == true_labels))


def outlier_auc(scores: np.ndarray, h: np.ndarray | None) -> float:
    """P(score of a random h=1 instance > score of a random h=0 instance), ties 1/2."""
    if h is None:
        raise D.TruthUnavailable("outlier AUC needs hidden h flags")
    scores = np.asarray(scores, dtype=np.float64)
    h = np.asarray(h)
    pos, neg = scores[h == 1], scores[h == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both non-outliers and outliers")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    equal = np.searchsorted(neg_sorted, pos, side="right") - below
    return float((below.sum() + 0.5 * equal.sum()) / (len(pos) * len(neg)))


def precision_at_k(scores: np.ndarray, h: np.ndarray, labels: np.ndarray, k: int = 5) -> float:
    """Mean over categories of the noisy fraction among the k lowest scores."""
    scores, h, labels = map(np.asarray, (scores, h, labels))
    fracs = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        lowest = members[np.argsort(scores[members], kind="stable")[:k]]
        fracs.append(np.mean(h[lowest] == 0))
    return float(np.mean(fracs))


# -- reports -------------------------------------------------------------------

@dataclass
class RunReport:
    mode: str
    seed: int
    accuracy: float
    auc: float | None = None
    precision_at_k: float | None = None
    mean_p_clean: float | None = None
    mean_p_noisy: float | None = None
    window: int | None = None
    curves: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunReport":
        return cls(**json.loads(line))


def write_reports(reports: Iterable[RunReport], jsonl_path: str | Path,
                  csv_path: str | Path | None = None) -> None:
    reports = list(reports)
    Path(jsonl_path).write_text("".join(r.to_json() + "\n" for r in reports))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "seed", "window", "accuracy", "auc"])
            for r in reports:
                w.writerow([r.mode, r.seed, "" if r.window is None else r.window,
                            repr(r.accuracy), "" if r.auc is None else repr(r.auc)])


def read_reports(jsonl_path: str | Path) -> list[RunReport]:
    return [RunReport.from_json(ln) for ln in Path(jsonl_path).read_text().splitlines() if ln.strip()]


def summarize(reports: Sequence[RunReport]) -> dict[str, dict[str, float]]:
    """Mean and sample standard deviation of accuracy and AUC per mode (and window)."""
    groups: dict[str, list[RunReport]] = {}
    for r in reports:
        key = r.mode if r.window is None else f"{r.mode}@{r.window}"
        groups.setdefault(key, []).append(r)
    out = {}
    for key, rs in groups.items():
        acc = np.array([r.accuracy for r in rs])
        row = {"n": len(rs), "accuracy_mean": float(acc.mean()),
               "accuracy_std": float(acc.std(ddof=1)) if len(rs) > 1 else 0.0}
        aucs = np.array([r.auc for r in rs if r.auc is not None])
        if len(aucs):
            row["auc_mean"] = float(aucs.mean())
            row["auc_std"] = float(aucs.std(ddof=1)) if len(aucs) > 1 else 0.0
        out[key] = row
    return out


# -- experiment plumbing ---------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Knobs shared by every run of an ablation or sweep."""
    epochs: int = 50
    lam: float = 1e-4
    lr: float = 1e-3
    decay: float = 0.98
    logvar_bias: float = -4.0
    batch: int = 64
    L_predict: int = 5
    attr_dim: int = 16
    attr_noise: float = 0.1
    word_dim: int = 10
    K: int = 32
    K_tilde: int = 16
    beta: float = 100.0
    test_per_class: int = 400
    top_k: int = 5


def synthetic_semantic_matrix(train: D.Dataset, spec: D.SyntheticSpec, exp: ExperimentConfig,
                              seed: int) -> SemanticMatrix:
    """Hybrid matrix for synthetic data: attribute-like projections of the planted
    means, unrelated word-vector-like codes, and the visual encoding learned from
    proposals grouped by noisy label."""
    rng = np.random.default_rng([spec.seed, 31337])
    # rows of a random orthogonal matrix: attributes are a rotated view of the prototypes
    q, _ = np.linalg.qr(rng.standard_normal((max(exp.attr_dim, spec.d), spec.d)))
    attr = q[:exp.attr_dim] @ spec.means.T
    attr += exp.attr_noise * rng.standard_normal(attr.shape)
    word = rng.standard_normal((exp.word_dim, spec.C))
    blocks = [("attribute", attr), ("word", word)]
    if exp.K_tilde > 0:
        props = D.make_proposals(train.x, spec.proposals, spec.proposal_scale, seed)
        plabels = np.repeat(train.label, spec.proposals)
        groups = {c: props[plabels == c] for c in range(spec.C)}
        ve, _, _ = visual_encoding(groups, spec.C, exp.K, exp.K_tilde, exp.beta, seed)
        blocks.append(("visual", ve))
    return hybrid_concat(blocks)


def _evaluate(mode: str, seed: int, train_ds: D.Dataset, test_ds: D.Dataset, A: SemanticMatrix,
              spec: D.SyntheticSpec, exp: ExperimentConfig, window: int | None = None) -> RunReport:
    cfg = WsciConfig(d=spec.d, m=A.m, C=spec.C, lam=exp.lam, L_predict=exp.L_predict,
                     batch=exp.batch, epochs=exp.epochs, seed=seed, lr=exp.lr,
                     decay=exp.decay, logvar_bias=exp.logvar_bias)
    h = train_ds.h

    def on_epoch(model, epoch, weights):
        rec = {"accuracy": accuracy(predict(model, test_ds.x, A, seed=seed), test_ds.true_label)}
        if h is not None:
            rec["mean_p_clean"] = float(weights[h == 1].mean()) if np.any(h == 1) else None
            rec["mean_p_noisy"] = float(weights[h == 0].mean()) if np.any(h == 0) else None
        return rec

    result = train(train_ds.x, train_ds.label, A, cfg, mode, on_epoch=on_epoch)
    probs = predict(result.model, test_ds.x, A, seed=seed)
    acc = accuracy(probs, test_ds.true_label)
    report = RunReport(mode=mode, seed=seed, accuracy=acc, window=window, curves=result.history)
    if h is not None and 0 < h.sum() < len(h):
        scores = outlier_scores(result.model, train_ds.x)
        report.auc = outlier_auc(scores, h)
        report.precision_at_k = precision_at_k(scores, h, train_ds.label, exp.top_k)
        report.mean_p_clean = float(scores[h == 1].mean())
        report.mean_p_noisy = float(scores[h == 0].mean())
    return report


def run_ablation(modes: Sequence[str], spec: D.SyntheticSpec, seeds: Sequence[int],
                 exp: ExperimentConfig | None = None) -> list[RunReport]:
    """Train every mode on the same data per seed; reports ordered by (seed, mode)."""
    if not modes:
        raise ValueError("need at least one mode")
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ValueError(f"unknown modes {bad}")
    exp = exp or ExperimentConfig()
    reports = []
    for seed in seeds:
        train_ds, _ = D.generate(spec, seed)
        test_ds = D.clean_test_set(spec, exp.test_per_class, seed + 1_000_003)
        A = synthetic_semantic_matrix(train_ds, spec, exp, seed)
        for mode in modes:
            reports.append(_evaluate(mode, seed, train_ds, test_ds, A, spec, exp))
            log.info("%s seed=%d acc=%.4f auc=%s", mode, seed, reports[-1].accuracy, reports[-1].auc)
    return reports


def noise_sweep(mode: str, start_indices: Sequence[int], spec: D.SyntheticSpec,
                seeds: Sequence[int], window: int, exp: ExperimentConfig | None = None,
                ) -> list[RunReport]:
    """Train on rank-ordered windows of a per-class pool (``spec.per_class`` deep)."""
    exp = exp or ExperimentConfig()
    reports = []
    if not start_indices:
        return reports
    for seed in seeds:
        pool, tier = D.generate(spec, seed)
        test_ds = D.clean_test_set(spec, exp.test_per_class, seed + 1_000_003)
        for start in start_indices:
            train_ds = D.rank_order_noise(pool, tier, start, window, seed)
            A = synthetic_semantic_matrix(train_ds, spec, exp, seed)
            reports.append(_evaluate(mode, seed, train_ds, test_ds, A, spec, exp, window=start))
    return reports
