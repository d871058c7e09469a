"""Reading Figshare brain-tumor MAT records, manifests and dataset splits.

Each record is a MAT-file v7.3 (HDF5) container with a ``cjdata`` group holding
``label``, ``PID``, ``image``, ``tumorBorder`` and ``tumorMask``. MATLAB writes
arrays column-major, so 2-D datasets come back transposed from h5py and are
flipped back here.
"""
from __future__ import annotations

import enum
import io
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import h5py
import numpy as np

from .errors import (
    CountOverflow,
    EmptyDataset,
    InvalidLabel,
    InvalidRecord,
    InvalidSpec,
    MissingField,
    RecordError,
    ShapeMismatch,
)

REQUIRED_FIELDS = ("label", "PID", "image", "tumorBorder", "tumorMask")
MAT_HEADER = b"MATLAB 7.3 MAT-file, Platform: GLNXA64, Created by: tumorbench HDF5 schema 1.00 ."


class TumorClass(enum.Enum):
    MENINGIOMA = "meningioma"
    GLIOMA = "glioma"
    PITUITARY = "pituitary"

    @property
    def index(self) -> int:
        return _CLASS_ORDER.index(self)

    @property
    def dataset_code(self) -> int:
        return self.index + 1

    @classmethod
    def from_code(cls, code) -> "TumorClass":
        try:
            value = float(code)
        except (TypeError, ValueError):
            raise InvalidLabel(f"label {code!r} is not numeric") from None
        if not value.is_integer() or not 1 <= value <= len(_CLASS_ORDER):
            raise InvalidLabel(f"label code {code!r} not in {{1, 2, 3}}")
        return _CLASS_ORDER[int(value) - 1]

    @classmethod
    def from_index(cls, index: int) -> "TumorClass":
        if not 0 <= int(index) < len(_CLASS_ORDER):
            raise InvalidLabel(f"class index {index!r} not in 0..2")
        return _CLASS_ORDER[int(index)]


_CLASS_ORDER = (TumorClass.MENINGIOMA, TumorClass.GLIOMA, TumorClass.PITUITARY)
CLASS_NAMES = tuple(c.value for c in _CLASS_ORDER)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TumorRecord:
    """One MRI slice.

    ``tumor_border`` is the flat ``[r1, c1, r2, c2, ...]`` vector exactly as
    stored in the file (1-based MATLAB pixel coordinates).
    """

    label: TumorClass
    pid: str
    image: np.ndarray
    tumor_border: np.ndarray
    tumor_mask: np.ndarray
    source: str | None = None

    def __post_init__(self):
        image = np.asarray(self.image)
        mask = np.asarray(self.tumor_mask)
        border = np.asarray(self.tumor_border, dtype=np.float64).ravel()
        if image.ndim != 2:
            raise InvalidRecord(f"image must be 2-D, got shape {image.shape}")
        if mask.shape != image.shape:
            raise ShapeMismatch(f"tumorMask {mask.shape} != image {image.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise InvalidRecord("tumorMask must be binary")
        if not mask.any():
            raise InvalidRecord("tumorMask has no tumor pixels")
        if border.size % 2:
            raise InvalidRecord(f"tumorBorder has odd length {border.size}")
        pts = border.reshape(-1, 2)
        h, w = image.shape
        if pts.size and (
            not np.isfinite(pts).all()
            or (pts < 0).any()
            or (pts[:, 0] > h).any()
            or (pts[:, 1] > w).any()
        ):
            raise InvalidRecord("tumorBorder has coordinates outside the image")
        object.__setattr__(self, "image", _frozen(image))
        object.__setattr__(self, "tumor_mask", _frozen(mask.astype(np.uint8, copy=False)))
        object.__setattr__(self, "tumor_border", _frozen(border))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def same_content(self, other: "TumorRecord") -> bool:
        return (
            self.label is other.label
            and self.pid == other.pid
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.tumor_border, other.tumor_border)
            and np.array_equal(self.tumor_mask, other.tumor_mask)
        )


# ---------------------------------------------------------------------------
# MAT v7.3 reading / writing


def _open_container(source):
    if isinstance(source, h5py.File):
        return source, False
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = io.BytesIO(bytes(source))
    try:
        return h5py.File(source, "r"), True
    except OSError as exc:
        raise InvalidRecord(f"not a MAT v7.3 / HDF5 container ({exc})") from exc


def _read_scalar(ds) -> float:
    arr = np.asarray(ds[()])
    if arr.size != 1:
        raise InvalidLabel(f"label must be scalar, got shape {arr.shape}")
    return arr.reshape(()).item()


def _read_pid(ds) -> str:
    arr = np.asarray(ds[()])
    if arr.dtype.kind in "SU":
        return "".join(x.decode() if isinstance(x, bytes) else str(x) for x in arr.ravel())
    if arr.dtype.kind == "O":
        return "".join(str(x) for x in arr.ravel())
    return "".join(chr(int(c)) for c in arr.ravel())


def parse_record(source) -> TumorRecord:
    """Parse one record from a path, raw bytes, file object or open h5py file."""
    f, owned = _open_container(source)
    try:
        if "cjdata" not in f:
            raise MissingField("container has no 'cjdata' group")
        grp = f["cjdata"]
        for name in REQUIRED_FIELDS:
            if name not in grp:
                raise MissingField(f"cjdata lacks '{name}'")
        label = TumorClass.from_code(_read_scalar(grp["label"]))
        pid = _read_pid(grp["PID"])
        image = np.asarray(grp["image"][()]).T
        mask = np.asarray(grp["tumorMask"][()]).T
        border = np.asarray(grp["tumorBorder"][()], dtype=np.float64).ravel()
        source_name = None if isinstance(source, (bytes, bytearray, memoryview)) else getattr(f, "filename", None)
    finally:
        if owned:
            f.close()
    return TumorRecord(label=label, pid=pid, image=image, tumor_border=border,
                       tumor_mask=mask, source=source_name)


def write_record(record: TumorRecord, path) -> None:
    """Write ``record`` in the Figshare MAT v7.3 layout (readable by MATLAB)."""
    path = Path(path)
    with h5py.File(path, "w", userblock_size=512) as f:
        grp = f.create_group("cjdata")
        grp.attrs["MATLAB_class"] = np.bytes_("struct")

        def put(name, data, mclass):
            ds = grp.create_dataset(name, data=data)
            ds.attrs["MATLAB_class"] = np.bytes_(mclass)

        put("label", np.array([[float(record.label.dataset_code)]]), "double")
        put("PID", np.array([[ord(c)] for c in record.pid], dtype=np.uint16).reshape(-1, 1), "char")
        put("image", np.ascontiguousarray(record.image.T), record.image.dtype.name)
        put("tumorBorder", record.tumor_border.reshape(-1, 1), "double")
        put("tumorMask", np.ascontiguousarray(record.tumor_mask.T), "uint8")
    with open(path, "r+b") as fh:
        fh.write(MAT_HEADER.ljust(116, b" ") + b"\x00" * 8 + b"\x00\x02IM")


# ---------------------------------------------------------------------------
# border / mask integrity


def rasterize_border(border: np.ndarray, shape: tuple[int, int], origin: float = 1.0) -> np.ndarray:
    """Fill the closed border polygon with an even-odd scanline rule.

    A pixel ``(i, j)`` is inside when its centre ``(i + origin, j + origin)``
    is inside the polygon whose vertices are the ``(row, col)`` pairs.
    """
    pts = np.asarray(border, dtype=np.float64).reshape(-1, 2)
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    if len(pts) < 3:
        return out
    r0, c0 = pts[:, 0], pts[:, 1]
    r1, c1 = np.roll(r0, -1), np.roll(c0, -1)
    cols = np.arange(w) + origin
    for i in range(h):
        y = i + origin
        # half-open rule so shared vertices are counted once
        hit = (r0 <= y) != (r1 <= y)
        if not hit.any():
            continue
        xs = c0[hit] + (y - r0[hit]) * (c1[hit] - c0[hit]) / (r1[hit] - r0[hit])
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            out[i] |= (cols >= a) & (cols < b)
    return out


def border_mask_overlap(record: TumorRecord) -> float:
    """Fraction of tumor-mask pixels covered by the filled border polygon."""
    filled = rasterize_border(record.tumor_border, record.shape)
    mask = record.tumor_mask.astype(bool)
    return float((filled & mask).sum() / mask.sum())


def check_integrity(record: TumorRecord, threshold: float = 0.8) -> bool:
    return border_mask_overlap(record) >= threshold


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[TumorRecord, ...]
    class_counts: dict = field(default=None)
    total: int = None

    def __post_init__(self):
        records = tuple(self.records)
        counts = Counter(r.label for r in records)
        class_counts = {c: counts.get(c, 0) for c in TumorClass}
        if self.class_counts is not None and dict(self.class_counts) != class_counts:
            raise InvalidSpec("class_counts disagree with records")
        if self.total is not None and self.total != len(records):
            raise InvalidSpec("total disagrees with number of records")
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "class_counts", class_counts)
        object.__setattr__(self, "total", len(records))

    def __len__(self):
        return self.total

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label.index for r in self.records], dtype=np.int64)

    @property
    def pids(self) -> list[str]:
        return [r.pid for r in self.records]

    def counts_by_name(self) -> dict[str, int]:
        return {c.value: n for c, n in self.class_counts.items()}


def _parse_file(path: Path) -> TumorRecord:
    try:
        rec = parse_record(path)
    except RecordError as exc:
        raise exc.with_filename(path.name) from exc
    return rec


def load_dataset(directory, workers: int = 1, pattern: str = "*.mat") -> DatasetManifest:
    """Parse every record file in ``directory`` in filename-sorted order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyDataset(f"{directory} is not a directory")
    files = sorted(directory.glob(pattern), key=lambda p: p.name)
    if not files:
        raise EmptyDataset(f"no {pattern} record files in {directory}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_parse_file, files))
    else:
        records = [_parse_file(p) for p in files]
    return DatasetManifest(records=tuple(records))


def save_manifest_cache(manifest: DatasetManifest, path) -> None:
    """Store every record in one HDF5 file using the record field names."""
    with h5py.File(path, "w") as f:
        f.attrs["total"] = manifest.total
        f.attrs["class_order"] = json.dumps(list(CLASS_NAMES))
        root = f.create_group("records")
        for i, rec in enumerate(manifest.records):
            g = root.create_group(f"{i:06d}")
            g.create_dataset("label", data=np.int64(rec.label.dataset_code))
            g.create_dataset("PID", data=np.bytes_(rec.pid.encode("utf-8")))
            g.create_dataset("image", data=rec.image, compression="gzip", compression_opts=1)
            g.create_dataset("tumorBorder", data=rec.tumor_border)
            g.create_dataset("tumorMask", data=rec.tumor_mask, compression="gzip", compression_opts=1)
            if rec.source is not None:
                g.attrs["source"] = rec.source


def load_manifest_cache(path) -> DatasetManifest:
    records = []
    with h5py.File(path, "r") as f:
        root = f["records"]
        for key in sorted(root):
            g = root[key]
            records.append(TumorRecord(
                label=TumorClass.from_code(g["label"][()]),
                pid=g["PID"][()].decode("utf-8"),
                image=g["image"][()],
                tumor_border=g["tumorBorder"][()],
                tumor_mask=g["tumorMask"][()],
                source=g.attrs.get("source"),
            ))
    return DatasetManifest(records=tuple(records))


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0
    shuffle_buffer: int = 1000
    exact_counts: tuple[int, int, int] | None = None
    stratified: bool = False
    group_by_patient: bool = False

    def __post_init__(self):
        if self.exact_counts is not None:
            counts = tuple(int(c) for c in self.exact_counts)
            if len(counts) != 3 or min(counts) < 0:
                raise InvalidSpec(f"exact_counts must be three non-negative ints, got {self.exact_counts}")
            object.__setattr__(self, "exact_counts", counts)
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise InvalidSpec(f"fractions must lie in [0, 1], got {fracs}")
        if self.exact_counts is None and abs(sum(fracs) - 1.0) > 1e-9:
            raise InvalidSpec(f"fractions must sum to 1, got {sum(fracs)}")
        if self.shuffle_buffer < 1:
            raise InvalidSpec("shuffle_buffer must be >= 1")
        if self.stratified and self.group_by_patient:
            raise InvalidSpec("stratified and group_by_patient are mutually exclusive")
        if self.stratified and self.exact_counts is not None:
            raise InvalidSpec("exact_counts cannot be combined with stratified splitting")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exact_counts"] = list(self.exact_counts) if self.exact_counts else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown split keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("exact_counts") is not None:
            d["exact_counts"] = tuple(d["exact_counts"])
        return cls(**d)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        seen = set()
        for part in (self.train, self.val, self.test):
            if seen.intersection(part) or len(set(part)) != len(part):
                raise InvalidSpec("split parts overlap")
            seen.update(part)
        if seen != set(range(len(seen))):
            raise InvalidSpec("split does not cover 0..total-1")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def buffer_shuffle(items: Sequence[int], buffer_size: int, rng: np.random.Generator) -> list[int]:
    """Streaming shuffle with a bounded buffer, one pass over ``items``.

    Each incoming element replaces a uniformly chosen buffered element, which is
    emitted; the buffer is drained in random order at the end.
    """
    buf: list[int] = []
    out: list[int] = []
    for x in items:
        if len(buf) < buffer_size:
            buf.append(x)
            continue
        j = int(rng.integers(len(buf)))
        out.append(buf[j])
        buf[j] = x
    while buf:
        j = int(rng.integers(len(buf)))
        out.append(buf[j])
        buf[j] = buf[-1]
        buf.pop()
    return out


def _target_counts(total: int, spec: SplitSpec) -> tuple[int, int, int]:
    if spec.exact_counts is not None:
        if sum(spec.exact_counts) != total:
            raise CountOverflow(f"exact_counts {spec.exact_counts} sum to {sum(spec.exact_counts)}, manifest has {total}")
        return spec.exact_counts
    n_train = int(np.floor(spec.train_frac * total + 1e-9))
    n_val = int(np.floor(spec.val_frac * total + 1e-9))
    return n_train, n_val, total - n_train - n_val


def split_indices(labels: Sequence[int], spec: SplitSpec, pids: Sequence[str] | None = None) -> DatasetSplit:
    """Split ``range(len(labels))`` according to ``spec``."""
    total = len(labels)
    if total < 3:
        raise InvalidSpec(f"need at least 3 records to split, got {total}")
    n_train, n_val, _ = _target_counts(total, spec)
    rng = np.random.Generator(np.random.Philox(spec.seed))
    order = buffer_shuffle(range(total), spec.shuffle_buffer, rng)

    if spec.stratified:
        labels = np.asarray(labels)
        train, val, test = set(), set(), set()
        for cls in np.unique(labels):
            members = [i for i in order if labels[i] == cls]
            k_train = int(np.floor(spec.train_frac * len(members) + 1e-9))
            k_val = int(np.floor(spec.val_frac * len(members) + 1e-9))
            train.update(members[:k_train])
            val.update(members[k_train:k_train + k_val])
            test.update(members[k_train + k_val:])
        parts = ([i for i in order if i in s] for s in (train, val, test))
        return DatasetSplit(*parts)

    if spec.group_by_patient:
        if pids is None:
            raise InvalidSpec("group_by_patient requires patient ids")
        groups: dict[str, list[int]] = {}
        for i in order:
            groups.setdefault(pids[i], []).append(i)
        train, val, test = [], [], []
        for members in groups.values():
            if len(train) < n_train:
                train.extend(members)
            elif len(val) < n_val:
                val.extend(members)
            else:
                test.extend(members)
        return DatasetSplit(train, val, test)

    return DatasetSplit(order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])


def split_dataset(manifest: DatasetManifest, spec: SplitSpec) -> DatasetSplit:
    return split_indices(manifest.labels, spec, pids=manifest.pids)


def save_split(split: DatasetSplit, spec: SplitSpec, path) -> None:
    payload = {
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "train": list(split.train),
        "val": list(split.val),
        "test": list(split.test),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_split(path) -> tuple[DatasetSplit, SplitSpec]:
    payload = json.loads(Path(path).read_text())
    return (
        DatasetSplit(payload["train"], payload["val"], payload["test"]),
        SplitSpec.from_dict(payload["spec"]),
    )
