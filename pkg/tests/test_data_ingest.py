import io
import json
import os

import h5py
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.draw import polygon as sk_polygon

from tumorbench.data_ingest import (
    CLASS_NAMES,
    DatasetManifest,
    DatasetSplit,
    SplitSpec,
    TumorClass,
    TumorRecord,
    border_mask_overlap,
    buffer_shuffle,
    check_integrity,
    load_dataset,
    load_manifest_cache,
    load_split,
    parse_record,
    rasterize_border,
    save_manifest_cache,
    save_split,
    split_dataset,
    split_indices,
    write_record,
)
from tumorbench.errors import (
    CountOverflow,
    EmptyDataset,
    InvalidLabel,
    InvalidRecord,
    InvalidSpec,
    MissingField,
    ShapeMismatch,
)
from tumorbench.synthetic import make_phantom


def small_record(label=TumorClass.GLIOMA, pid="100360", seed=0):
    return make_phantom(label, np.random.default_rng(seed), size=64, pid=pid)


def write_raw(path, fields, userblock=True):
    """Write a cjdata container by hand, the way MATLAB lays it out."""
    with h5py.File(path, "w", userblock_size=512 if userblock else 0) as f:
        g = f.create_group("cjdata")
        for name, data in fields.items():
            g.create_dataset(name, data=data)


def raw_fields(label_code=2.0, h=16, w=12):
    image = np.arange(h * w, dtype=np.int16).reshape(h, w)
    mask = np.zeros((h, w), np.uint8)
    mask[4:8, 3:6] = 1
    border = np.array([[4.0, 3.0], [4.0, 6.0], [8.0, 6.0], [8.0, 3.0]])
    return {
        "label": np.array([[label_code]]),
        "PID": np.array([[ord(c)] for c in "MR042"], dtype=np.uint16),
        "image": image.T.copy(),  # column-major on disk
        "tumorBorder": border.reshape(-1, 1),
        "tumorMask": mask.T.copy(),
    }, image, mask


# ---------------------------------------------------------------------------
# classes


def test_class_codes_bijection():
    for i, c in enumerate(TumorClass):
        assert c.index == i and c.dataset_code == i + 1
        assert TumorClass.from_code(c.dataset_code) is c
        assert TumorClass.from_index(i) is c
    assert CLASS_NAMES == ("meningioma", "glioma", "pituitary")
    for bad in (0, 4, 2.5, "x"):
        with pytest.raises(InvalidLabel):
            TumorClass.from_code(bad)


# ---------------------------------------------------------------------------
# parsing


def test_parse_hand_written_container(tmp_path):
    fields, image, mask = raw_fields()
    write_raw(tmp_path / "r.mat", fields)
    rec = parse_record(tmp_path / "r.mat")
    assert rec.label is TumorClass.GLIOMA
    assert rec.pid == "MR042"
    assert rec.image.dtype == np.int16
    assert np.array_equal(rec.image, image)
    assert np.array_equal(rec.tumor_mask, mask)
    assert rec.tumor_border.tolist() == [4, 3, 4, 6, 8, 6, 8, 3]


def test_parse_from_bytes_and_file_object(tmp_path):
    fields, image, _ = raw_fields(label_code=3)
    write_raw(tmp_path / "r.mat", fields, userblock=False)
    blob = (tmp_path / "r.mat").read_bytes()
    assert parse_record(blob).label is TumorClass.PITUITARY
    assert np.array_equal(parse_record(io.BytesIO(blob)).image, image)


def test_missing_tumor_mask(tmp_path):
    fields, _, _ = raw_fields()
    del fields["tumorMask"]
    write_raw(tmp_path / "r.mat", fields)
    with pytest.raises(MissingField):
        parse_record(tmp_path / "r.mat")


def test_missing_group(tmp_path):
    with h5py.File(tmp_path / "r.mat", "w") as f:
        f.create_dataset("x", data=1)
    with pytest.raises(MissingField):
        parse_record(tmp_path / "r.mat")


def test_invalid_label(tmp_path):
    fields, _, _ = raw_fields(label_code=4)
    write_raw(tmp_path / "r.mat", fields)
    with pytest.raises(InvalidLabel):
        parse_record(tmp_path / "r.mat")


def test_shape_mismatch(tmp_path):
    fields, _, _ = raw_fields()
    fields["tumorMask"] = np.ones((3, 3), np.uint8)
    write_raw(tmp_path / "r.mat", fields)
    with pytest.raises(ShapeMismatch):
        parse_record(tmp_path / "r.mat")


def test_not_hdf5(tmp_path):
    (tmp_path / "r.mat").write_bytes(b"MATLAB 5.0 MAT-file" + b"\0" * 200)
    with pytest.raises(InvalidRecord):
        parse_record(tmp_path / "r.mat")


def test_record_invariants():
    img = np.zeros((10, 10), np.int16)
    mask = np.zeros((10, 10), np.uint8)
    with pytest.raises(InvalidRecord):
        TumorRecord(TumorClass.GLIOMA, "p", img, [1, 1, 2, 2, 3, 1], mask)
    mask[2, 2] = 1
    with pytest.raises(InvalidRecord):
        TumorRecord(TumorClass.GLIOMA, "p", img, [1, 1, 2], mask)
    with pytest.raises(InvalidRecord):
        TumorRecord(TumorClass.GLIOMA, "p", img, [1, 1, 11, 2], mask)
    rec = TumorRecord(TumorClass.GLIOMA, "p", img, [1, 1, 2, 2], mask)
    with pytest.raises(ValueError):
        rec.image[0, 0] = 5


def test_write_parse_round_trip(tmp_path):
    rec = small_record()
    write_record(rec, tmp_path / "a.mat")
    assert (tmp_path / "a.mat").read_bytes()[:10] == b"MATLAB 7.3"
    assert parse_record(tmp_path / "a.mat").same_content(rec)


# ---------------------------------------------------------------------------
# border integrity


def test_rasterize_matches_skimage_polygon():
    rng = np.random.default_rng(4)
    for _ in range(20):
        rec = make_phantom(TumorClass(rng.choice(CLASS_NAMES)), rng, size=96)
        pts = rec.tumor_border.reshape(-1, 2)
        rr, cc = sk_polygon(pts[:, 0] - 1, pts[:, 1] - 1, rec.shape)
        ref = np.zeros(rec.shape, bool)
        ref[rr, cc] = True
        ours = rasterize_border(rec.tumor_border, rec.shape)
        # the two fill rules only disagree on pixel centres lying on an edge
        assert (ours ^ ref).sum() <= 0.02 * ref.sum() + 2


def test_rasterize_square():
    border = [2, 2, 2, 6, 6, 6, 6, 2]  # 1-based corners
    out = rasterize_border(border, (8, 8))
    expected = np.zeros((8, 8), bool)
    expected[1:5, 1:5] = True
    assert np.array_equal(out, expected)


def test_integrity_on_five_records(phantom_dir):
    manifest = load_dataset(phantom_dir)
    assert manifest.total == 5
    for rec in manifest.records:
        assert border_mask_overlap(rec) >= 0.8
        assert check_integrity(rec)


def test_integrity_fails_for_displaced_border():
    rec = small_record()
    moved = TumorRecord(rec.label, rec.pid, rec.image,
                        np.clip(rec.tumor_border + 20, 1, 64), rec.tumor_mask)
    assert not check_integrity(moved)


# ---------------------------------------------------------------------------
# manifests


def test_load_sorted_and_counts(tmp_path):
    for name, label in (("c.mat", TumorClass.PITUITARY), ("a.mat", TumorClass.MENINGIOMA),
                        ("b.mat", TumorClass.GLIOMA)):
        write_record(small_record(label), tmp_path / name)
    m = load_dataset(tmp_path)
    assert m.total == 3
    assert [r.label for r in m.records] == [TumorClass.MENINGIOMA, TumorClass.GLIOMA, TumorClass.PITUITARY]
    assert m.counts_by_name() == {"meningioma": 1, "glioma": 1, "pituitary": 1}
    assert m.labels.tolist() == [0, 1, 2]
    assert load_dataset(tmp_path, workers=3).labels.tolist() == [0, 1, 2]


def test_empty_directory(tmp_path):
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path)


def test_parse_error_carries_filename(tmp_path):
    fields, _, _ = raw_fields(label_code=9)
    write_raw(tmp_path / "bad.mat", fields)
    with pytest.raises(InvalidLabel) as err:
        load_dataset(tmp_path)
    assert "bad.mat" in str(err.value)


def test_manifest_invariants():
    recs = (small_record(TumorClass.GLIOMA), small_record(TumorClass.GLIOMA, seed=1))
    m = DatasetManifest(recs)
    assert m.total == sum(m.class_counts.values()) == 2
    with pytest.raises(InvalidSpec):
        DatasetManifest(recs, total=3)


def test_manifest_cache_round_trip(phantom_dir, tmp_path):
    m = load_dataset(phantom_dir)
    save_manifest_cache(m, tmp_path / "m.h5")
    back = load_manifest_cache(tmp_path / "m.h5")
    assert back.total == m.total
    for a, b in zip(m.records, back.records):
        assert a.same_content(b)
        assert a.image.dtype == b.image.dtype


# ---------------------------------------------------------------------------
# splitting


def test_floor_rule_sizes_for_full_dataset():
    labels = np.repeat([0, 1, 2], [708, 1426, 930])
    split = split_indices(labels, SplitSpec())
    assert split.sizes == (2451, 306, 307)


def test_exact_counts_override():
    labels = np.repeat([0, 1, 2], [708, 1426, 930])
    split = split_indices(labels, SplitSpec(exact_counts=(2452, 300, 312)))
    assert split.sizes == (2452, 300, 312)
    with pytest.raises(CountOverflow):
        split_indices(labels, SplitSpec(exact_counts=(2452, 300, 300)))


def test_split_deterministic_and_seed_sensitive():
    labels = np.zeros(500, int)
    a = split_indices(labels, SplitSpec(seed=3))
    b = split_indices(labels, SplitSpec(seed=3))
    c = split_indices(labels, SplitSpec(seed=4))
    assert a == b
    assert a != c


def test_bad_specs():
    with pytest.raises(InvalidSpec):
        SplitSpec(0.7, 0.1, 0.1)
    with pytest.raises(InvalidSpec):
        SplitSpec(shuffle_buffer=0)
    with pytest.raises(InvalidSpec):
        SplitSpec(stratified=True, group_by_patient=True)
    with pytest.raises(InvalidSpec):
        split_indices([0, 1], SplitSpec())
    with pytest.raises(InvalidSpec):
        SplitSpec.from_dict({"train_frac": 0.8, "colour": "red"})


def test_buffer_shuffle_small_buffer_keeps_locality():
    rng = np.random.Generator(np.random.Philox(0))
    out = buffer_shuffle(range(100), 1, rng)
    assert out == list(range(100))
    rng = np.random.Generator(np.random.Philox(0))
    out = buffer_shuffle(range(100), 10, rng)
    assert sorted(out) == list(range(100))
    # an element cannot be emitted before it has entered the buffer
    assert all(out.index(x) >= x - 10 for x in range(100))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(3, 120), seed=st.integers(0, 2**32 - 1), buf=st.integers(1, 50),
       mode=st.sampled_from(["plain", "stratified", "grouped"]))
def test_split_disjoint_and_exhaustive(n, seed, buf, mode):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, n)
    pids = [f"P{k}" for k in rng.integers(0, max(1, n // 3), n)]
    spec = SplitSpec(seed=seed, shuffle_buffer=buf, stratified=mode == "stratified",
                     group_by_patient=mode == "grouped")
    split = split_indices(labels, spec, pids)
    allidx = list(split.train) + list(split.val) + list(split.test)
    assert sorted(allidx) == list(range(n))
    if mode == "grouped":
        owner = {}
        for part, idx in (("train", split.train), ("val", split.val), ("test", split.test)):
            for i in idx:
                assert owner.setdefault(pids[i], part) == part


def test_stratified_keeps_class_ratios():
    labels = np.repeat([0, 1, 2], [708, 1426, 930])
    split = split_indices(labels, SplitSpec(stratified=True))
    test_counts = np.bincount(labels[list(split.test)], minlength=3)
    assert test_counts.tolist() == [708 - 566 - 70, 1426 - 1140 - 142, 930 - 744 - 93]


def test_split_file_round_trip(phantom_dir, tmp_path):
    m = load_dataset(phantom_dir)
    spec = SplitSpec(seed=5, exact_counts=(3, 1, 1))
    split = split_dataset(m, spec)
    save_split(split, spec, tmp_path / "s.json")
    payload = json.loads((tmp_path / "s.json").read_text())
    assert payload["seed"] == 5 and len(payload["test"]) == 1
    back, back_spec = load_split(tmp_path / "s.json")
    assert back == split and back_spec == spec


def test_dataset_split_validation():
    with pytest.raises(InvalidSpec):
        DatasetSplit([0, 1], [1], [2])
    with pytest.raises(InvalidSpec):
        DatasetSplit([0], [1], [3])


@pytest.mark.skipif(not os.environ.get("TUMORBENCH_FIGSHARE_DIR"), reason="real dataset not available")
def test_real_dataset_counts():
    m = load_dataset(os.environ["TUMORBENCH_FIGSHARE_DIR"], workers=4)
    assert m.total == 3064
    assert m.counts_by_name() == {"meningioma": 708, "glioma": 1426, "pituitary": 930}
    assert sum(check_integrity(r) for r in m.records[:5]) == 5
