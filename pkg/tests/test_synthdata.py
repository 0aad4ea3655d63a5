import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ideal.nnet import Classifier, TrainConfig, train_classifier
from ideal.metrics import roc_auc
from ideal.synthdata import (DatasetSpec, Oracle, ParameterError, evaluation_labels,
                             export_dataset, generate_dataset, import_dataset, inject_noise,
                             lesion_mask, read_pgm, split, write_pgm)


def spec(**kw):
    base = dict(n_images=20, size=32, positive_fraction=0.5, contrast=0.2, noise_sigma=0.05,
                vendor="A", task="effusion_like", seed=0)
    base.update(kw)
    return DatasetSpec(**base)


def test_exact_positive_fraction():
    ds = generate_dataset(spec(n_images=10, positive_fraction=0.5, seed=7))
    labels = evaluation_labels(ds, ds.ids)
    assert labels.sum() == 5 and len(labels) == 10


def test_same_spec_is_byte_identical():
    a = generate_dataset(spec(seed=3))
    b = generate_dataset(spec(seed=3))
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.ids == b.ids


def test_different_seed_changes_pixels():
    assert not np.array_equal(generate_dataset(spec(seed=1)).pixels,
                              generate_dataset(spec(seed=2)).pixels)


@pytest.mark.parametrize("task", ["effusion_like", "pneumonia_like", "gland_seg"])
def test_intensities_in_unit_interval_and_masks_iff_segmentation(task):
    ds = generate_dataset(spec(task=task, contrast=0.9, noise_sigma=0.3))
    assert ds.pixels.min() >= 0.0 and ds.pixels.max() <= 1.0
    assert ds.has_masks == (task == "gland_seg")


def test_vendor_b_has_higher_contrast_than_a():
    a = generate_dataset(spec(vendor="A", noise_sigma=0.0, n_images=40))
    b = generate_dataset(spec(vendor="B", noise_sigma=0.0, n_images=40))

    def lesion_lift(ds):
        lifts = []
        for i in ds.ids:
            m = lesion_mask(ds, i)
            if m.any():
                lifts.append(ds.image(i).pixels[m].mean())
        return np.mean(lifts)
    assert lesion_lift(b) > lesion_lift(a)


@pytest.mark.parametrize("field,value", [
    ("n_images", 0), ("size", 8), ("size", 33), ("positive_fraction", 0.0),
    ("positive_fraction", 1.0), ("contrast", -0.1), ("noise_sigma", 0.9), ("vendor", "C"),
    ("task", "brain"), ("seed", -1),
])
def test_invalid_spec_names_field(field, value):
    with pytest.raises(ParameterError) as info:
        generate_dataset(spec(**{field: value}))
    assert info.value.field == field
    assert field in str(info.value)


def test_unknown_spec_key_rejected():
    with pytest.raises(ParameterError):
        DatasetSpec.from_dict({"n_images": 10, "colour": 1})


def test_zero_contrast_gives_chance_auc_over_ten_seeds():
    ds = generate_dataset(spec(n_images=200, contrast=0.0, positive_fraction=0.5))
    ps = split(ds, seed=0)
    tr = list(ps.unlabeled)
    X, y = ds.images(tr), evaluation_labels(ds, tr)
    Xt, yt = ds.images(ps.test), evaluation_labels(ds, ps.test)
    aucs = []
    for seed in range(10):
        cfg = TrainConfig(lr=3e-3, max_epochs=8, augment_folds=0, seed=seed)
        model, _ = train_classifier(Classifier(size=32, seed=seed), X, y, cfg)
        aucs.append(roc_auc(model.predict_proba(Xt), yt))
    assert 0.45 <= np.mean(aucs) <= 0.55


# split ---------------------------------------------------------------------------------

def test_split_sizes_for_100_images():
    ps = split(generate_dataset(spec(n_images=100)), seed=0)
    assert (len(ps.unlabeled), len(ps.validation), len(ps.test)) == (70, 10, 20)
    assert not ps.labeled


def test_split_all_train():
    ps = split(generate_dataset(spec(n_images=10)), ratios=(1, 0, 0))
    assert len(ps.unlabeled) == 10 and not ps.validation and not ps.test


def test_split_is_deterministic():
    ds = generate_dataset(spec(n_images=50))
    a, b = split(ds, seed=4), split(ds, seed=4)
    assert a.unlabeled == b.unlabeled and a.validation == b.validation and a.test == b.test


def test_split_needs_ten_images():
    with pytest.raises(ValueError):
        split(generate_dataset(spec(n_images=9)))


@given(n=st.integers(10, 120), pf=st.floats(0.05, 0.95), seed=st.integers(0, 2 ** 32))
def test_split_partitions_are_disjoint_exhaustive_and_stratified(n, pf, seed):
    ds = generate_dataset(spec(n_images=n, size=16, positive_fraction=pf, seed=seed % 97))
    ps = split(ds, seed=seed)
    parts = [list(ps.unlabeled), list(ps.validation), list(ps.test)]
    assert sum(len(p) for p in parts) == n
    assert set().union(*map(set, parts)) == set(ds.ids)
    overall = ds.positive_fraction()
    for p in parts:
        if p:
            frac = evaluation_labels(ds, p).mean()
            assert abs(frac - overall) <= 1.0 / len(p) + 1e-12


def test_partitions_stay_disjoint_while_labeling():
    ds = generate_dataset(spec(n_images=40))
    ps = split(ds, seed=1)
    oracle = Oracle(ds)
    for i in list(ps.unlabeled)[:10]:
        ps.add_labeled(i, oracle.label(i))
        assert ps.check()
    with pytest.raises(KeyError):
        ps.add_labeled(ps.test[0], 0)


# oracle --------------------------------------------------------------------------------

def test_oracle_labels_and_counter():
    ds = generate_dataset(spec())
    oracle = Oracle(ds)
    y = evaluation_labels(ds, ds.ids)
    for k, i in enumerate(ds.ids[:7]):
        assert oracle.label(i) == y[k]
    assert oracle.count == 7
    positives = [i for i, v in zip(ds.ids, y) if v == 1]
    assert all(oracle.label(i) == 1 for i in positives)


def test_oracle_unknown_id_and_missing_mask():
    oracle = Oracle(generate_dataset(spec()))
    with pytest.raises(KeyError):
        oracle.label("nope")
    with pytest.raises(ValueError, match="no mask"):
        oracle.mask(oracle._ds.ids[0])


def test_oracle_mask_on_segmentation_dataset():
    ds = generate_dataset(spec(task="gland_seg"))
    m = Oracle(ds).mask(ds.ids[0])
    assert m.dtype == bool and m.shape == (32, 32)


def test_gland_label_matches_mask_area():
    ds = generate_dataset(spec(task="gland_seg", n_images=30))
    oracle = Oracle(ds)
    for i in ds.ids:
        assert oracle.label(i) == int(oracle.mask(i).mean() > 0.15)


def test_dataset_pixels_are_read_only():
    ds = generate_dataset(spec())
    with pytest.raises(ValueError):
        ds.pixels[0, 0, 0] = 1.0


# noise ---------------------------------------------------------------------------------

def test_zero_noise_is_identity():
    img = generate_dataset(spec()).pixels[0]
    assert np.array_equal(inject_noise(img, 0.0), img)


def test_noise_mean_absolute_change_matches_half_normal():
    img = np.full((200, 200), 0.5)
    out = inject_noise(img, 0.05, np.random.default_rng(0))
    expected = 0.05 * math.sqrt(2 / math.pi)
    assert abs(np.abs(out - img).mean() - expected) / expected < 0.10


def test_noise_keeps_unit_interval():
    img = np.linspace(0, 1, 64).reshape(8, 8)
    out = inject_noise(img, 0.5, np.random.default_rng(1))
    assert out.min() >= 0 and out.max() <= 1


# interchange ---------------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path):
    a = np.random.default_rng(0).random((5, 7))
    write_pgm(tmp_path / "a.pgm", a)
    q = read_pgm(tmp_path / "a.pgm")
    assert q.shape == (5, 7)
    assert np.array_equal(q, np.rint(a * 255).astype(np.uint8))


def test_export_import_roundtrip(tmp_path):
    ds = generate_dataset(spec(task="gland_seg"))
    ps = split(ds, seed=0)
    export_dataset(ds, tmp_path, ps, redact_labels=False)
    back = import_dataset(tmp_path)
    assert back.ids == ds.ids
    assert np.abs(back.pixels - ds.pixels).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(evaluation_labels(back, back.ids), evaluation_labels(ds, ds.ids))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    splits = {e["split"] for e in manifest["images"]}
    assert splits == {"train", "validation", "test"}


def test_export_redacts_labels(tmp_path):
    ds = generate_dataset(spec())
    export_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert all(e["label"] is None and e["redacted"] for e in manifest["images"])
    with pytest.warns(UserWarning, match="redacted"):
        import_dataset(tmp_path)
