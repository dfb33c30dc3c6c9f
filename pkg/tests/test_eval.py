import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from semvae import data as D
from semvae import evaluation as E


def onehot(idx, C=3):
    return np.eye(C)[idx]


def test_accuracy_examples():
    y = np.array([0, 1, 2, 1])
    assert E.accuracy(onehot(y), y) == 1.0
    assert E.accuracy(onehot((y + 1) % 3), y) == 0.0
    assert E.accuracy(onehot([0, 1, 2, 0]), y) == 0.75


def test_accuracy_ties_lowest_index():
    assert E.accuracy(np.array([[0.5, 0.5]]), np.array([0])) == 1.0


def test_accuracy_needs_truth():
    with pytest.raises(D.TruthUnavailable):
        E.accuracy(onehot([0]), None)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_accuracy_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(4), size=20)
    y = rng.integers(0, 4, 20)
    perm = rng.permutation(4)
    permuted = np.empty_like(probs)
    permuted[:, perm] = probs
    assert E.accuracy(permuted, perm[y]) == E.accuracy(probs, y)


def test_auc_examples():
    assert E.outlier_auc([0.9, 0.8, 0.3], [1, 0, 1]) == 0.5
    assert E.outlier_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert E.outlier_auc([0.4, 0.4, 0.4], [1, 0, 1]) == 0.5


def test_auc_single_class():
    with pytest.raises(ValueError):
        E.outlier_auc([0.1, 0.2], [1, 1])
    with pytest.raises(D.TruthUnavailable):
        E.outlier_auc([0.1], None)


def brute_auc(scores, h):
    pos = [s for s, f in zip(scores, h) if f == 1]
    neg = [s for s, f in zip(scores, h) if f == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 12, elements=st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.9])),
       st.integers(0, 10_000))
def test_auc_matches_pair_enumeration(scores, seed):
    h = np.random.default_rng(seed).permutation([1] * 6 + [0] * 6)
    assert E.outlier_auc(scores, h) == pytest.approx(brute_auc(scores, h), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 10, elements=st.integers(-40, 40).map(lambda i: i / 8)),
       st.integers(0, 10_000))
def test_auc_monotone_invariance(scores, seed):
    # grid-valued scores keep the transform strictly monotone in floating point
    h = np.random.default_rng(seed).permutation([1] * 5 + [0] * 5)
    transformed = np.exp(scores) * 3.0 + np.tanh(scores)
    assert E.outlier_auc(transformed, h) == E.outlier_auc(scores, h)


def test_precision_at_k():
    scores = np.array([0.1, 0.2, 0.9, 0.8, 0.05, 0.7])
    h = np.array([0, 1, 1, 1, 0, 0])
    labels = np.array([0, 0, 0, 1, 1, 1])
    # class 0 lowest two: idx 0 (noisy), 1 (clean); class 1: idx 4, 5 (both noisy)
    assert E.precision_at_k(scores, h, labels, k=2) == pytest.approx(0.75)


def test_report_roundtrip(tmp_path):
    r = E.RunReport("wsci", 3, 0.7, auc=0.9, precision_at_k=0.4, window=201,
                    curves=[{"epoch": 0, "loss": 1.5}])
    assert E.RunReport.from_json(r.to_json()) == r
    E.write_reports([r, r], tmp_path / "r.jsonl", tmp_path / "r.csv")
    assert E.read_reports(tmp_path / "r.jsonl") == [r, r]
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "mode,seed,window,accuracy,auc"
    assert lines[1].startswith("wsci,3,201,0.7,0.9")


def test_summarize():
    rs = [E.RunReport("wsci", s, a, auc=0.8) for s, a in enumerate([0.6, 0.8])]
    out = E.summarize(rs)["wsci"]
    assert out["accuracy_mean"] == pytest.approx(0.7)
    assert out["accuracy_std"] == pytest.approx(np.std([0.6, 0.8], ddof=1))


def small_exp():
    return E.ExperimentConfig(epochs=3, K=6, K_tilde=3, test_per_class=20)


def small_spec(**kw):
    return D.SyntheticSpec(per_class=30, **kw)


def test_empty_sweep():
    assert E.noise_sweep("wsci", [], small_spec(), [0], 10) == []


def test_ablation_bad_modes():
    with pytest.raises(ValueError):
        E.run_ablation([], small_spec(), [0])
    with pytest.raises(ValueError):
        E.run_ablation(["nope"], small_spec(), [0])


def test_ablation_reports_are_deterministic():
    a = E.run_ablation(["wsci", "sim1"], small_spec(), [0, 1], small_exp())
    b = E.run_ablation(["wsci", "sim1"], small_spec(), [0, 1], small_exp())
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    assert [(r.seed, r.mode) for r in a] == [(0, "wsci"), (0, "sim1"), (1, "wsci"), (1, "sim1")]
    for r in a:
        assert 0 <= r.accuracy <= 1 and 0 <= r.auc <= 1
        assert len(r.curves) == 3
        assert {"epoch", "loss", "accuracy", "mean_p_clean", "mean_p_noisy"} <= set(r.curves[0])


def test_unweighted_matches_pinned_trainer():
    from semvae.model import WsciConfig, train
    spec = small_spec()
    exp = small_exp()
    ds, _ = D.generate(spec, 0)
    A = E.synthetic_semantic_matrix(ds, spec, exp, 0)
    kw = dict(d=spec.d, m=A.m, C=spec.C, epochs=exp.epochs, seed=0, decay=exp.decay,
              logvar_bias=exp.logvar_bias)
    a = train(ds.x, ds.label, A, WsciConfig(**kw), "unweighted").model
    b = train(ds.x, ds.label, A, WsciConfig(lam=0.0, pin_weights=True, **kw), "wsci").model
    assert a.to_text().split("\n", 1)[1] == b.to_text().split("\n", 1)[1]


def test_sweep_reports_windows():
    spec = D.SyntheticSpec(per_class=60)
    reps = E.noise_sweep("unweighted", [1, 11], spec, [0], 40, small_exp())
    assert [r.window for r in reps] == [1, 11]


def test_zero_epoch_run_has_no_curves():
    exp = E.ExperimentConfig(epochs=0, K=6, K_tilde=3, test_per_class=10)
    (r,) = E.run_ablation(["wsci"], small_spec(), [0], exp)
    assert r.curves == []
