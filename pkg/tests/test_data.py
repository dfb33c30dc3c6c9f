import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semvae import data as D
from semvae.nn import ShapeError


def test_no_noise_means_all_clean():
    ds, tier = D.generate(D.SyntheticSpec(outlier_ratio=0.0, flip_ratio=0.0))
    assert np.all(ds.h == 1)
    np.testing.assert_array_equal(ds.label, ds.true_label)
    assert np.all(tier == D.CLEAN)


def test_exact_quotas():
    ds, tier = D.generate(D.SyntheticSpec(per_class=200, outlier_ratio=0.3, flip_ratio=0.05))
    assert len(ds) == 1000
    assert np.sum(tier == D.OUTLIER) == 300
    assert np.sum(tier == D.FLIP) == 50
    assert np.sum(ds.h == 0) == 350


def test_flips_carry_other_label():
    ds, tier = D.generate(D.SyntheticSpec())
    flips = tier == D.FLIP
    assert np.all(ds.true_label[flips] != ds.label[flips])
    assert np.all(ds.true_label[flips] >= 0)
    assert np.all(ds.true_label[tier == D.OUTLIER] == -1)
    clean = tier == D.CLEAN
    np.testing.assert_array_equal(ds.label[clean], ds.true_label[clean])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_outliers_respect_margin(seed):
    spec = D.SyntheticSpec(per_class=40, seed=seed)
    ds, tier = D.generate(spec)
    out = ds.x[tier == D.OUTLIER]
    dist = np.linalg.norm(out[:, None, :] - spec.means[None], axis=2)
    assert dist.min() >= spec.outlier_margin * spec.scale


def test_clean_class_means_near_planted():
    spec = D.SyntheticSpec(per_class=400, outlier_ratio=0.0, flip_ratio=0.0)
    ds, _ = D.generate(spec)
    for c in range(spec.C):
        members = ds.x[ds.label == c]
        bound = 3 * spec.scale / np.sqrt(len(members))
        assert np.all(np.abs(members.mean(axis=0) - spec.means[c]) <= bound * 1.5)


def test_generation_reproducible():
    a, _ = D.generate(D.SyntheticSpec(seed=4))
    b, _ = D.generate(D.SyntheticSpec(seed=4))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.label, b.label)


@pytest.mark.parametrize("field,value", [("outlier_ratio", 1.2), ("flip_ratio", -0.1)])
def test_invalid_ratio_names_field(field, value):
    with pytest.raises(ValueError, match=field):
        D.SyntheticSpec(**{field: value})


def test_ratio_sum_rejected():
    with pytest.raises(ValueError):
        D.SyntheticSpec(outlier_ratio=0.6, flip_ratio=0.5)


def test_infeasible_outliers():
    with pytest.raises(D.GenerationError):
        D.generate(D.SyntheticSpec(per_class=10, box=0.1, outlier_margin=5.0))


# -- rank windows ----------------------------------------------------------------------

def sweep_pool(seed=0):
    return D.generate(D.SyntheticSpec(per_class=900, seed=seed))


def window_noise(ds):
    return float(np.mean(ds.h == 0))


def test_first_window_is_cleanest_prefix():
    pool, tier = sweep_pool()
    w = D.rank_order_noise(pool, tier, 1, 500)
    assert window_noise(w) == 0.0
    assert len(w) == 5 * 500


def test_windows_strictly_increasing_noise():
    pool, tier = sweep_pool()
    noise = [window_noise(D.rank_order_noise(pool, tier, s, 500)) for s in (1, 201, 401)]
    assert noise[0] < noise[1] < noise[2]


def test_outlier_fraction_monotone_in_start():
    pool, tier = sweep_pool(3)
    fracs = []
    for s in range(1, 402, 50):
        w = D.rank_order_noise(pool, tier, s, 500)
        fracs.append(np.mean(w.true_label == -1))
    assert all(a <= b for a, b in zip(fracs, fracs[1:]))


def test_disjoint_windows_share_nothing():
    pool, tier = sweep_pool()
    pools = D.rank_pools(tier, pool.label, pool.C, 0)
    a = np.concatenate([p[0:300] for p in pools])
    b = np.concatenate([p[300:600] for p in pools])
    assert not set(a) & set(b)
    wa = D.rank_order_noise(pool, tier, 1, 300)
    wb = D.rank_order_noise(pool, tier, 301, 300)
    rows_a = {tuple(r) for r in wa.x}
    assert not rows_a & {tuple(r) for r in wb.x}


def test_window_too_large():
    pool, tier = sweep_pool()
    with pytest.raises(ValueError):
        D.rank_order_noise(pool, tier, 500, 500)


# -- split -------------------------------------------------------------------------

def ten_per_class():
    x = np.arange(30, dtype=float)[:, None]
    return D.Dataset(x, np.repeat([0, 1, 2], 10))


def test_split_half():
    train, test = D.split(ten_per_class(), 0.5, 0)
    assert np.all(np.bincount(train.label) == 5)
    assert np.all(np.bincount(test.label) == 5)


def test_split_partition_and_seed():
    ds = ten_per_class()
    train, test = D.split(ds, 0.3, 7)
    together = np.sort(np.concatenate([train.x[:, 0], test.x[:, 0]]))
    np.testing.assert_array_equal(together, ds.x[:, 0])
    again, _ = D.split(ds, 0.3, 7)
    np.testing.assert_array_equal(train.x, again.x)


def test_split_small_class():
    with pytest.raises(ValueError):
        D.split(D.Dataset(np.zeros((3, 1)), [0, 0, 1]), 0.5, 0)


def test_split_bad_fraction():
    with pytest.raises(ValueError):
        D.split(ten_per_class(), 1.0, 0)


# -- feature files -------------------------------------------------------------------

def test_feature_roundtrip(tmp_path):
    ds, _ = D.generate(D.SyntheticSpec(per_class=20))
    D.save_features(ds, tmp_path / "f.csv")
    back = D.load_features(tmp_path / "f.csv")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.label, ds.label)
    np.testing.assert_array_equal(back.h, ds.h)
    np.testing.assert_array_equal(back.true_label, ds.true_label)
    assert back.C == ds.C


def test_small_file_without_truth(tmp_path):
    rows = ["d=4 C=3 truth=0"] + [f"{i % 3},1,2,3,{i}" for i in range(6)]
    (tmp_path / "f.csv").write_text("\n".join(rows) + "\n")
    ds = D.load_features(tmp_path / "f.csv")
    assert len(ds) == 6 and ds.d == 4 and ds.C == 3
    assert not ds.has_truth
    with pytest.raises(D.TruthUnavailable):
        ds.require_truth()


def test_parse_error_has_line_number(tmp_path):
    (tmp_path / "f.csv").write_text("d=2 C=2 truth=0\n0,1,2\n1,x,3\n")
    with pytest.raises(D.ParseError, match=":3:"):
        D.load_features(tmp_path / "f.csv")


def test_wrong_width_is_shape_error(tmp_path):
    (tmp_path / "f.csv").write_text("d=2 C=2 truth=0\n0,1,2,3\n")
    with pytest.raises(ShapeError):
        D.load_features(tmp_path / "f.csv")


def test_bad_header(tmp_path):
    (tmp_path / "f.csv").write_text("hello\n")
    with pytest.raises(D.ParseError):
        D.load_features(tmp_path / "f.csv")
