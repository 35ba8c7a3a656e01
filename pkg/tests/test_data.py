import numpy as np
import pytest

from protoclust.data import (
    FeatureDataset,
    SyntheticSpec,
    exact_counts,
    generate,
    load_csv,
    load_dataset,
    save_csv,
    save_dataset,
    split,
    subsample_imbalanced,
)


def tiny_spec(**overrides):
    base = dict(k=3, dim=6, n_sources=2, samples_per_domain=60, seed=5)
    base.update(overrides)
    return SyntheticSpec(**base)


# --- count allocation ---


def test_exact_counts_sums_and_largest_remainder():
    got = exact_counts(np.array([0.5, 0.3, 0.2]), 10)
    assert np.array_equal(got, [5, 3, 2])
    got = exact_counts(np.full(3, 1 / 3), 4)
    assert got.sum() == 4
    assert np.array_equal(got, [2, 1, 1])  # remainder tie goes to index 0


def test_exact_counts_zero_proportion_gets_zero():
    got = exact_counts(np.array([0.7, 0.3, 0.0]), 10)
    assert got[2] == 0
    assert got.sum() == 10


# --- generation ---


def test_generate_shapes_and_domains():
    sources, target = generate(tiny_spec())
    assert [s.domain for s in sources] == ["source0", "source1"]
    assert target.domain == "target"
    for ds in sources + [target]:
        assert ds.features.shape == (60, 6)
        assert ds.labels.shape == (60,)
        assert set(np.unique(ds.labels)) <= {0, 1, 2}


def test_generate_exact_class_counts():
    spec = tiny_spec(proportions=(0.5, 0.3, 0.2), samples_per_domain=50)
    sources, target = generate(spec)
    for ds in sources + [target]:
        counts = np.bincount(ds.labels, minlength=3)
        assert np.array_equal(counts, [25, 15, 10])


def test_generate_is_deterministic_and_seed_sensitive():
    a_sources, a_target = generate(tiny_spec())
    b_sources, b_target = generate(tiny_spec())
    assert np.array_equal(a_target.features, b_target.features)
    assert np.array_equal(a_sources[0].features, b_sources[0].features)
    c_sources, _ = generate(tiny_spec(seed=6))
    assert not np.array_equal(a_sources[0].features, c_sources[0].features)


def test_generate_domains_differ():
    sources, target = generate(tiny_spec())
    assert not np.array_equal(sources[0].features, sources[1].features)
    assert not np.array_equal(sources[0].features, target.features)


def test_spec_validation():
    with pytest.raises(ValueError):
        tiny_spec(k=1).validate()
    with pytest.raises(ValueError):
        tiny_spec(samples_per_domain=2).validate()
    with pytest.raises(ValueError):
        tiny_spec(proportions=(0.5, 0.5)).validate()  # wrong length
    with pytest.raises(ValueError):
        tiny_spec(noise_sigma=-1.0).validate()


# --- dataset container ---


def test_dataset_validates_and_defaults_ids():
    ds = FeatureDataset("d", np.zeros((4, 2)))
    assert np.array_equal(ds.ids, np.arange(4))
    assert ds.n == 4 and ds.dim == 2
    with pytest.raises(ValueError):
        FeatureDataset("d", np.zeros((4, 2)), labels=np.zeros(3, dtype=np.int64))
    with pytest.raises(ValueError):
        FeatureDataset("d", np.array([[np.nan, 0.0]]))


def test_class_proportions():
    ds = FeatureDataset("d", np.zeros((4, 2)),
                        labels=np.array([0, 0, 1, 2]))
    assert np.allclose(ds.class_proportions(3), [0.5, 0.25, 0.25])


# --- imbalanced thinning ---


def test_subsample_keeps_high_classes_intact():
    _, target = generate(tiny_spec(samples_per_domain=300))
    out = subsample_imbalanced(target, seed=5, drop_fraction=0.7, k=3)
    # k=3 -> classes below floor(3/2)=1, so only class 0 is thinned
    before = np.bincount(target.labels, minlength=3)
    after = np.bincount(out.labels, minlength=3)
    assert np.array_equal(after[1:], before[1:])
    assert after[0] < before[0]


def test_subsample_counts_are_binomial_and_seeded():
    _, target = generate(tiny_spec(samples_per_domain=300))
    out1 = subsample_imbalanced(target, seed=5, drop_fraction=0.7, k=3)
    out2 = subsample_imbalanced(target, seed=5, drop_fraction=0.7, k=3)
    assert np.array_equal(out1.ids, out2.ids)
    n0 = np.bincount(target.labels, minlength=3)[0]
    kept0 = np.bincount(out1.labels, minlength=3)[0]
    # binomial(n0, 0.3): allow 4 standard deviations around the mean
    sd = np.sqrt(n0 * 0.3 * 0.7)
    assert abs(kept0 - 0.3 * n0) <= 4 * sd
    other = subsample_imbalanced(target, seed=6, drop_fraction=0.7, k=3)
    assert not np.array_equal(out1.ids, other.ids)


def test_subsample_zero_drop_is_identity():
    _, target = generate(tiny_spec())
    out = subsample_imbalanced(target, seed=5, drop_fraction=0.0, k=3)
    assert np.array_equal(out.features, target.features)
    assert np.array_equal(out.ids, target.ids)


def test_subsample_preserves_original_ids():
    _, target = generate(tiny_spec())
    out = subsample_imbalanced(target, seed=5, drop_fraction=0.7, k=3)
    assert np.all(np.isin(out.ids, target.ids))
    kept_rows = target.features[out.ids]
    assert np.array_equal(out.features, kept_rows)


def test_subsample_requires_labels_and_valid_fraction():
    ds = FeatureDataset("d", np.zeros((4, 2)))
    with pytest.raises(ValueError):
        subsample_imbalanced(ds, seed=0)
    _, target = generate(tiny_spec())
    with pytest.raises(ValueError):
        subsample_imbalanced(target, seed=0, drop_fraction=1.0)


# --- split ---


def test_split_is_stratified_and_disjoint():
    _, target = generate(tiny_spec(samples_per_domain=90))
    first, second = split(target, 2 / 3, seed=1)
    assert first.n + second.n == 90
    ids = np.concatenate([first.ids, second.ids])
    assert len(np.unique(ids)) == 90
    counts = np.bincount(first.labels, minlength=3)
    assert np.abs(counts - 20).max() <= 1


# --- serialization ---


def test_binary_round_trip(tmp_path):
    _, target = generate(tiny_spec())
    path = tmp_path / "t.pcdd"
    save_dataset(target, str(path))
    loaded = load_dataset(str(path), "target")
    assert np.array_equal(loaded.features, target.features)
    assert np.array_equal(loaded.labels, target.labels)
    # second save is byte-identical
    path2 = tmp_path / "t2.pcdd"
    save_dataset(loaded, str(path2))
    assert path.read_bytes() == path2.read_bytes()


def test_binary_round_trip_without_labels(tmp_path):
    ds = FeatureDataset("d", np.random.default_rng(0).normal(size=(5, 3)))
    path = tmp_path / "u.pcdd"
    save_dataset(ds, str(path))
    loaded = load_dataset(str(path), "d")
    assert loaded.labels is None
    assert np.array_equal(loaded.features, ds.features)


def test_binary_rejects_corruption(tmp_path):
    _, target = generate(tiny_spec())
    path = tmp_path / "t.pcdd"
    save_dataset(target, str(path))
    blob = path.read_bytes()

    bad = tmp_path / "bad.pcdd"
    bad.write_bytes(blob[:-5])
    with pytest.raises(ValueError):
        load_dataset(str(bad), "x")
    bad.write_bytes(blob + b"!")
    with pytest.raises(ValueError):
        load_dataset(str(bad), "x")
    bad.write_bytes(b"WHAT" + blob[4:])
    with pytest.raises(ValueError):
        load_dataset(str(bad), "x")


def test_csv_round_trip_exact(tmp_path):
    _, target = generate(tiny_spec())
    path = tmp_path / "t.csv"
    save_csv(target, str(path))
    loaded = load_csv(str(path), "target")
    assert np.array_equal(loaded.features, target.features)
    assert np.array_equal(loaded.labels, target.labels)


def test_csv_and_binary_agree(tmp_path):
    _, target = generate(tiny_spec())
    save_csv(target, str(tmp_path / "t.csv"))
    save_dataset(target, str(tmp_path / "t.pcdd"))
    a = load_csv(str(tmp_path / "t.csv"), "t")
    b = load_dataset(str(tmp_path / "t.pcdd"), "t")
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
