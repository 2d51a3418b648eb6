import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retrieval_zsl.errors import DataError, FormatError, IoError, SplitError
from retrieval_zsl.feature_store import (
    DatasetBundle, InstanceRecord, SplitSpec, SynthConfig, build_validation_split, load_bundle,
    load_split, save_bundle, save_split, seen_partition, synth_generate,
)


def tiny_bundle():
    records = [
        InstanceRecord(np.array([1.0, 2.0, 3.0]), np.array([[0.5, -0.5]]), 0),
        InstanceRecord(np.array([-1.0, 0.0, 0.25]), np.array([[1.5, 2.5]]), 1),
    ]
    return DatasetBundle.from_records(records, num_classes=2)


def test_tiny_roundtrip(tmp_path):
    b = tiny_bundle()
    save_bundle(b, tmp_path / "b.cmf")
    out = load_bundle(tmp_path / "b.cmf")
    assert (out.n, out.Dv, out.Dt, out.T) == (2, 3, 2, 1)
    assert out.labels.tolist() == [0, 1]
    assert out.equals(b)
    assert [r.label for r in out.instances] == [0, 1]


def test_header_layout(tmp_path):
    save_bundle(tiny_bundle(), tmp_path / "b.cmf")
    raw = (tmp_path / "b.cmf").read_bytes()
    assert raw[:4] == b"CMF1"
    version, n, c, dv, dt, t = struct.unpack_from("<IQIIII", raw, 4)
    assert (version, n, c, dv, dt, t) == (1, 2, 2, 3, 2, 1)
    assert len(raw) == 32 + 4 * 2 + 4 * 6 + 4 * 4
    labels = struct.unpack_from("<2I", raw, 32)
    assert labels == (0, 1)
    assert struct.unpack_from("<3f", raw, 40) == (1.0, 2.0, 3.0)


def test_bad_magic(tmp_path):
    save_bundle(tiny_bundle(), tmp_path / "b.cmf")
    raw = bytearray((tmp_path / "b.cmf").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "bad.cmf").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "bad.cmf")


def test_truncated_payload(tmp_path):
    save_bundle(tiny_bundle(), tmp_path / "b.cmf")
    (tmp_path / "short.cmf").write_bytes((tmp_path / "b.cmf").read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "short.cmf")


def test_nonfinite_and_label_range_rejected(tmp_path):
    save_bundle(tiny_bundle(), tmp_path / "b.cmf")
    raw = bytearray((tmp_path / "b.cmf").read_bytes())
    struct.pack_into("<f", raw, 40, float("nan"))
    (tmp_path / "nan.cmf").write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_bundle(tmp_path / "nan.cmf")

    raw = bytearray((tmp_path / "b.cmf").read_bytes())
    struct.pack_into("<I", raw, 32 + 4, 5)
    (tmp_path / "label.cmf").write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_bundle(tmp_path / "label.cmf")


def test_unwritable_path(tmp_path):
    with pytest.raises(IoError):
        save_bundle(tiny_bundle(), tmp_path / "missing_dir" / "b.cmf")
    with pytest.raises(IoError):
        load_bundle(tmp_path / "nothing.cmf")


def test_empty_bundle(tmp_path):
    b = DatasetBundle.from_records([], num_classes=3, Dv=4, Dt=2, T=2)
    save_bundle(b, tmp_path / "e.cmf")
    out = load_bundle(tmp_path / "e.cmf")
    assert out.n == 0 and out.num_classes == 3 and (out.Dv, out.Dt, out.T) == (4, 2, 2)
    save_bundle(b, tmp_path / "e.csv", "csv")
    assert load_bundle(tmp_path / "e.csv", "csv").equals(b)


def test_synth_roundtrip_bit_exact(tmp_path):
    bundle, _ = synth_generate(SynthConfig(seed=7))
    save_bundle(bundle, tmp_path / "a.cmf")
    loaded = load_bundle(tmp_path / "a.cmf")
    assert loaded.equals(bundle)
    # serialising the loaded bundle reproduces the exact byte stream
    save_bundle(loaded, tmp_path / "b.cmf")
    assert (tmp_path / "a.cmf").read_bytes() == (tmp_path / "b.cmf").read_bytes()


def test_csv_matches_binary(tmp_path):
    bundle, _ = synth_generate(SynthConfig(seed=3, instances_per_class=5))
    save_bundle(bundle, tmp_path / "a.cmf")
    save_bundle(bundle, tmp_path / "a.csv", "csv")
    first = (tmp_path / "a.csv").read_text().splitlines()
    assert first[1] == "label,modality,index,values..."
    b = load_bundle(tmp_path / "a.cmf")
    c = load_bundle(tmp_path / "a.csv", "csv")
    assert c.labels.tolist() == b.labels.tolist()
    np.testing.assert_allclose(c.image, b.image, rtol=0, atol=1e-6)
    np.testing.assert_allclose(c.text, b.text, rtol=0, atol=1e-6)


def test_csv_malformed(tmp_path):
    (tmp_path / "x.csv").write_text("label,modality,index,values...\n0,image,0,1.0\n")
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "x.csv", "csv")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 6),
       st.integers(0, 2**32 - 1))
def test_binary_roundtrip_property(tmp_path_factory, dv, dt, t, n, seed):
    rng = np.random.default_rng(seed)
    bundle = DatasetBundle(rng.integers(0, 3, n), rng.standard_normal((n, dv)).astype(np.float32),
                           rng.standard_normal((n, t, dt)).astype(np.float32), 3)
    path = tmp_path_factory.mktemp("rt") / "b.cmf"
    save_bundle(bundle, path)
    assert load_bundle(path).equals(bundle)


# --- synthetic generator ----------------------------------------------------

def test_zero_noise_identical_within_class():
    bundle, _ = synth_generate(SynthConfig(noise_sigma=0.0, T=1, seed=1))
    for y in range(bundle.num_classes):
        rows = bundle.image[bundle.labels == y]
        assert (rows == rows[0]).all()


def test_synth_deterministic():
    a, sa = synth_generate(SynthConfig(seed=11))
    b, sb = synth_generate(SynthConfig(seed=11))
    assert a.equals(b) and sa == sb
    c, _ = synth_generate(SynthConfig(seed=12))
    assert not a.equals(c)


def test_synth_counts():
    bundle, split = synth_generate(SynthConfig(num_seen=4, num_unseen=2, instances_per_class=30))
    assert bundle.n == 180
    # 60/20/20 of 30 per seen class; unseen classes alternate val/test
    assert seen_partition(30) == (18, 6, 6)
    assert len(split.train_ids) == 4 * 18
    assert len(split.val_seen_ids) == 4 * 6
    assert len(split.test_seen_ids) == 4 * 6
    assert len(split.val_unseen_ids) == 30
    assert len(split.test_unseen_ids) == 30
    split.validate(bundle)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 12), st.integers(0, 2**64 - 1))
def test_synth_split_invariants(num_seen, num_unseen, per_class, seed):
    bundle, split = synth_generate(SynthConfig(num_seen=num_seen, num_unseen=num_unseen,
                                               instances_per_class=per_class, Dv=3, Dt=2, T=1,
                                               latent_dim=2, seed=seed))
    all_ids = [i for name in SplitSpec.LISTS for i in getattr(split, name)]
    assert len(all_ids) == len(set(all_ids)) == bundle.n
    for name in SplitSpec.LISTS:
        block = split.seen_classes if name in SplitSpec.SEEN_LISTS else split.unseen_classes
        assert all(int(bundle.labels[i]) in block for i in getattr(split, name))
    assert not split.seen_classes & split.unseen_classes


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(instances_per_class=0)
    with pytest.raises(ValueError):
        SynthConfig(noise_sigma=-0.1)


# --- validation split -------------------------------------------------------

def _labels_bundle(labels, num_classes):
    n = len(labels)
    return DatasetBundle(np.asarray(labels), np.zeros((n, 1), np.float32),
                         np.zeros((n, 1, 1), np.float32), num_classes)


def test_validation_split_cub_counts():
    # 100 seen classes of 58 or 59 images (5875 total) plus 50 unseen classes
    sizes = [59] * 75 + [58] * 25
    labels = [y for y, k in enumerate(sizes) for _ in range(k)] + [100 + i % 50 for i in range(2946)]
    bundle = _labels_bundle(labels, 150)
    split = build_validation_split(bundle, range(100), range(100, 150), 0.2, seed=0)
    assert len(split.train_ids) == 4700
    assert len(split.val_seen_ids) == 1175
    assert len(split.val_unseen_ids) == 2946
    split.validate(bundle)
    # stratified: each class gives up 11 or 12 images
    held = np.bincount(bundle.labels[list(split.val_seen_ids)], minlength=100)[:100]
    assert set(held.tolist()) <= {11, 12}


def test_validation_split_smallest_holdout():
    bundle = _labels_bundle([0] * 10 + [1] * 4, 2)
    split = build_validation_split(bundle, [0], [1], 0.1, seed=3)
    assert (len(split.train_ids), len(split.val_seen_ids), len(split.val_unseen_ids)) == (9, 1, 4)


def test_validation_split_on_synth(small_synth):
    bundle, base = small_synth
    split = build_validation_split(bundle, base.seen_classes, [4], 0.25, seed=1,
                                   pool=base.train_ids)
    assert len(split.val_unseen_ids) == 30
    assert len(split.train_ids) + len(split.val_seen_ids) == len(base.train_ids)
    assert set(split.train_ids) | set(split.val_seen_ids) == set(base.train_ids)


def test_validation_split_errors():
    bundle = _labels_bundle([0, 1], 2)
    with pytest.raises(SplitError):
        build_validation_split(bundle, [0, 1], [1], 0.2, seed=0)
    with pytest.raises(SplitError):
        build_validation_split(bundle, [0], [1], 1.0, seed=0)


def test_split_spec_rejects_overlap():
    with pytest.raises(SplitError):
        SplitSpec([0, 1], [1], [], [], [], seen_classes=[0], unseen_classes=[1])
    with pytest.raises(SplitError):
        SplitSpec([0], [], [], [], [], seen_classes=[0], unseen_classes=[0])


def test_split_json_roundtrip(tmp_path, small_synth):
    _, split = small_synth
    save_split(split, tmp_path / "s.json")
    assert load_split(tmp_path / "s.json") == split
