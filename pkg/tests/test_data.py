"""Dataset construction, deterministic RNG streams, and binary I/O."""

import numpy as np
import pytest

from flowlab.data import (
    GmmSpec,
    LatentDataset,
    Rng,
    generate_gmm,
    load_dataset,
    make_gmm_spec,
    sample_source,
    save_dataset,
    split_train_val,
    stream_id,
)
from flowlab.errors import DataFormatError, ValidationError


# --- deterministic randomness ------------------------------------------------------


def test_rng_identical_seed_stream_identical_draws():
    a = Rng(7, 3).generator.standard_normal(16)
    b = Rng(7, 3).generator.standard_normal(16)
    np.testing.assert_array_equal(a, b)


def test_rng_distinct_streams_differ():
    a = Rng(7, 0).generator.standard_normal(16)
    b = Rng(7, 1).generator.standard_normal(16)
    assert np.any(a != b)


def test_rng_child_deterministic_and_separated():
    r = Rng(5, 2)
    a1 = r.child("alpha").generator.standard_normal(8)
    a2 = Rng(5, 2).child("alpha").generator.standard_normal(8)
    b = r.child("beta").generator.standard_normal(8)
    np.testing.assert_array_equal(a1, a2)
    assert np.any(a1 != b)


def test_stream_id_stable_and_distinct():
    assert stream_id("gmm-spec") == stream_id("gmm-spec")
    assert stream_id("gmm-spec") != stream_id("sources")
    assert 0 <= stream_id("anything") < 2**64


# --- source sampling ---------------------------------------------------------------


def test_sample_source_deterministic():
    a = sample_source(Rng(1, 4), 1, 2)
    b = sample_source(Rng(1, 4), 1, 2)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (1, 2)


def test_sample_source_clt():
    # m=1e4, d=16: coordinate means within 4/sqrt(m), variance within 10%
    x = sample_source(Rng(9), 10_000, 16)
    assert np.all(np.abs(x.mean(axis=0)) < 4.0 / np.sqrt(10_000))
    assert np.all(np.abs(x.var(axis=0) - 1.0) < 0.1)


def test_sample_source_stream_separation():
    a = sample_source(Rng(1, 0), 4, 3)
    b = sample_source(Rng(1, 1), 4, 3)
    assert np.any(a != b)


# --- GMM generation ----------------------------------------------------------------


def test_gmm_zero_scale_degenerate():
    spec = GmmSpec(
        weights=np.array([1.0]),
        means=np.zeros((1, 2)),
        scales=np.array([0.0]),
        seed=0,
    )
    ds = generate_gmm(spec, 3)
    np.testing.assert_array_equal(ds.data, np.zeros((3, 2)))
    np.testing.assert_array_equal(ds.labels, np.zeros(3, dtype=np.int64))


def test_gmm_zero_weight_component_never_sampled():
    spec = GmmSpec(
        weights=np.array([1.0, 0.0]),
        means=np.array([[0.0, 0.0], [100.0, 100.0]]),
        scales=np.array([1.0, 1.0]),
        seed=1,
    )
    ds = generate_gmm(spec, 50)
    assert np.all(ds.labels == 0)


def test_gmm_component_frequencies_within_3_sigma():
    # 4 equal-weight components, n=2000: multinomial count bound per component
    spec = make_gmm_spec(d=4096, components=4, seed=11)
    ds = generate_gmm(spec, 2000)
    counts = np.bincount(ds.labels, minlength=4)
    expected = 2000 * 0.25
    sigma = np.sqrt(2000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - expected) <= 3 * sigma)
    assert ds.data.shape == (2000, 4096)
    assert ds.data.dtype == np.float64


def test_gmm_spec_validation():
    with pytest.raises(ValidationError):
        GmmSpec(weights=np.array([0.6, 0.3]), means=np.zeros((2, 2)), scales=np.ones(2))
    with pytest.raises(ValidationError):
        GmmSpec(weights=np.array([0.5, 0.5]), means=np.zeros((2, 2)), scales=np.array([1.0, -0.1]))


def test_make_gmm_spec_deterministic():
    a = make_gmm_spec(d=4, components=3, seed=5)
    b = make_gmm_spec(d=4, components=3, seed=5)
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_allclose(a.weights.sum(), 1.0, atol=1e-12)


# --- dataset invariants --------------------------------------------------------------


def test_dataset_rejects_nonfinite_rows():
    bad = np.array([[0.0, np.nan]])
    with pytest.raises(ValidationError):
        LatentDataset(data=bad, ids=np.array([0]))


def test_dataset_rejects_duplicate_ids():
    with pytest.raises(ValidationError):
        LatentDataset(data=np.zeros((2, 2)), ids=np.array([1, 1]))


def test_dataset_rejects_embedding_row_mismatch():
    with pytest.raises(ValidationError):
        LatentDataset(data=np.zeros((2, 2)), ids=np.arange(2), embeddings=np.zeros((3, 4)))


def test_dataset_rejects_empty():
    with pytest.raises(ValidationError):
        LatentDataset(data=np.zeros((0, 2)), ids=np.zeros(0, dtype=np.int64))


def test_dataset_arrays_are_read_only(tiny_dataset):
    with pytest.raises(ValueError):
        tiny_dataset.data[0, 0] = 5.0
    with pytest.raises(ValueError):
        tiny_dataset.ids[0] = 5


def test_subset_preserves_original_ids(small_gmm):
    sub = small_gmm.subset_by_ids(np.array([5, 17, 103]))
    np.testing.assert_array_equal(sub.ids, [5, 17, 103])
    np.testing.assert_array_equal(sub.data[0], small_gmm.data[5])


def test_take_and_drop_label(small_gmm):
    taken = small_gmm.take(np.array([2, 0]))
    np.testing.assert_array_equal(taken.ids, small_gmm.ids[[2, 0]])
    dropped = small_gmm.drop_label(0)
    assert np.all(dropped.labels != 0)
    assert dropped.n == small_gmm.n - int(np.sum(small_gmm.labels == 0))
    # original ids survive the drop
    assert np.all(np.isin(dropped.ids, small_gmm.ids))


def test_selection_space_prefers_embeddings():
    rows = np.array([[1.0, 0.0], [0.0, 1.0]])
    emb = np.array([[3.0, 4.0, 0.0], [0.0, 5.0, 12.0]])
    with_emb = LatentDataset(data=rows, ids=np.arange(2), embeddings=emb)
    without = LatentDataset(data=rows, ids=np.arange(2))
    np.testing.assert_array_equal(with_emb.selection_space(), emb)
    np.testing.assert_array_equal(without.selection_space(), rows)


# --- train/val split -----------------------------------------------------------------


def test_split_train_val_disjoint_and_deterministic(small_gmm):
    tr1, va1 = split_train_val(small_gmm, 40, Rng(2, 7))
    tr2, va2 = split_train_val(small_gmm, 40, Rng(2, 7))
    assert va1.n == 40 and tr1.n == small_gmm.n - 40
    assert np.intersect1d(tr1.ids, va1.ids).size == 0
    np.testing.assert_array_equal(va1.ids, va2.ids)
    np.testing.assert_array_equal(tr1.ids, tr2.ids)


# --- binary round trip ----------------------------------------------------------------


def test_save_load_roundtrip_full(tmp_path, small_gmm):
    p = tmp_path / "ds.lfsd"
    save_dataset(small_gmm, p)
    back = load_dataset(p)
    np.testing.assert_array_equal(back.data, small_gmm.data)
    np.testing.assert_array_equal(back.ids, small_gmm.ids)
    np.testing.assert_array_equal(back.labels, small_gmm.labels)
    assert back.embeddings is None


def test_save_load_roundtrip_with_embeddings(tmp_path):
    g = Rng(4).generator
    data = g.standard_normal((5, 3)).astype(np.float32).astype(np.float64)
    emb = g.standard_normal((5, 7)).astype(np.float32).astype(np.float64)
    ds = LatentDataset(data=data, ids=np.arange(5), embeddings=emb)
    p = tmp_path / "ds.lfsd"
    save_dataset(ds, p)
    back = load_dataset(p)
    np.testing.assert_array_equal(back.data, data)
    np.testing.assert_array_equal(back.embeddings, emb)
    assert back.labels is None


def test_save_is_f32_on_disk(tmp_path):
    # full-precision doubles lose the low mantissa bits on disk by design
    val = 1.0 + 1e-12
    ds = LatentDataset(data=np.array([[val, 0.0]]), ids=np.array([0]))
    p = tmp_path / "ds.lfsd"
    save_dataset(ds, p)
    back = load_dataset(p)
    assert back.data[0, 0] == np.float64(np.float32(val))
    assert back.data[0, 0] != val


def test_save_refuses_non_dense_ids(tmp_path):
    ds = LatentDataset(data=np.zeros((2, 2)), ids=np.array([0, 5]))
    with pytest.raises(ValidationError):
        save_dataset(ds, tmp_path / "ds.lfsd")


def test_load_truncated_payload_names_field(tmp_path, small_gmm):
    p = tmp_path / "ds.lfsd"
    save_dataset(small_gmm, p)
    raw = p.read_bytes()
    (tmp_path / "cut.lfsd").write_bytes(raw[: len(raw) - 10])
    with pytest.raises(DataFormatError, match="label"):
        load_dataset(tmp_path / "cut.lfsd")
    # cut inside the data payload instead
    (tmp_path / "cut2.lfsd").write_bytes(raw[:64])
    with pytest.raises(DataFormatError, match="data"):
        load_dataset(tmp_path / "cut2.lfsd")


def test_load_bad_magic(tmp_path, small_gmm):
    p = tmp_path / "ds.lfsd"
    save_dataset(small_gmm, p)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"NOPE"
    (tmp_path / "bad.lfsd").write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="magic"):
        load_dataset(tmp_path / "bad.lfsd")


def test_load_trailing_bytes_rejected(tmp_path, small_gmm):
    p = tmp_path / "ds.lfsd"
    save_dataset(small_gmm, p)
    (tmp_path / "long.lfsd").write_bytes(p.read_bytes() + b"x")
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path / "long.lfsd")


def test_generated_data_roundtrips_bit_exact(tmp_path):
    # generate_gmm quantizes to f32 at birth so disk round-trips are lossless
    spec = make_gmm_spec(d=6, components=2, seed=8)
    ds = generate_gmm(spec, 20)
    p = tmp_path / "ds.lfsd"
    save_dataset(ds, p)
    save_dataset(load_dataset(p), tmp_path / "ds2.lfsd")
    assert p.read_bytes() == (tmp_path / "ds2.lfsd").read_bytes()
