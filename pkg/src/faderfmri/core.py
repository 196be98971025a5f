"""Domain types, the ``.vts`` tensor container, phenotype tables and CV splits."""

from __future__ import annotations

import csv
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, DomainError, DuplicateIdError, FormatError, SplitError

VTS_MAGIC = b"VTS1"
VTI_MAGIC = b"VTI1"
_HEADER = struct.Struct("<4sIIIIf")
HEADER_SIZE = _HEADER.size  # 24 bytes

PHENOTYPE_COLUMNS = ("subject_id", "site", "diagnosis", "series_path")


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass
class VolumeSeries:
    """T frames of a cubic S x S x S intensity volume for one subject."""

    subject_id: str
    tr_seconds: float
    data: np.ndarray  # [T, S, S, S] float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        validate_series_array(self.data)
        if not (self.tr_seconds > 0 and np.isfinite(self.tr_seconds)):
            raise DomainError(f"tr_seconds must be positive, got {self.tr_seconds}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def side(self) -> int:
        return self.data.shape[1]


def validate_series_array(data: np.ndarray) -> None:
    if data.ndim != 4:
        raise DimensionError(f"expected a 4D array [T, X, Y, Z], got shape {data.shape}")
    t, x, y, z = data.shape
    if t < 1:
        raise DimensionError("series must contain at least one frame")
    if not (x == y == z):
        raise DimensionError(f"volumes must be cubic, got {x}x{y}x{z}")
    if x < 8 or not _is_pow2(x):
        raise DimensionError(f"volume side must be a power of two >= 8, got {x}")
    if not np.isfinite(data).all():
        raise DataError("series contains NaN or Inf values")


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    site: int
    diagnosis: int
    series_path: str


@dataclass
class LatentSequence:
    subject_id: str
    vectors: np.ndarray  # [T, latent_dim]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DimensionError(f"latent sequence must be [T, D] with T >= 1, got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise DataError(f"latent sequence for {self.subject_id} is not finite")


@dataclass
class FoldAssignment:
    folds: list[tuple[list[str], list[str]]]
    kind: str  # "k_fold" or "leave_one_site_out"
    seed: int | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = ["mixed"] * len(self.folds)

    def __len__(self):
        return len(self.folds)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "names": list(self.names),
            "folds": [{"train": list(tr), "test": list(te)} for tr, te in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldAssignment":
        return cls(
            folds=[(list(f["train"]), list(f["test"])) for f in d["folds"]],
            kind=d["kind"],
            seed=d.get("seed"),
            names=list(d.get("names") or []),
        )


# ---------------------------------------------------------------------------
# tensor container


def save_volume_series(series: VolumeSeries, path) -> None:
    """Write ``series`` as a little-endian ``.vts`` file."""
    path = Path(path)
    t, x, y, z = series.data.shape
    header = _HEADER.pack(VTS_MAGIC, t, x, y, z, float(series.tr_seconds))
    payload = np.ascontiguousarray(series.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write volume series: {exc.strerror}", str(path)) from exc


def _read_header(buf: bytes, path, magic: bytes):
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    got_magic, t, x, y, z, tr = _HEADER.unpack_from(buf, 0)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    for name, v in (("T", t), ("X", x), ("Y", y), ("Z", z)):
        if v == 0:
            raise FormatError(f"{path}: header field {name} is zero")
    return t, x, y, z, tr


def load_volume_series(path, subject_id: str | None = None) -> VolumeSeries:
    path = Path(path)
    buf = path.read_bytes()
    t, x, y, z, tr = _read_header(buf, path, VTS_MAGIC)
    if not (np.isfinite(tr) and tr > 0):
        raise FormatError(f"{path}: header field tr_seconds={tr} is not positive")
    if not (x == y == z):
        raise DimensionError(f"{path}: volumes must be cubic, got {x}x{y}x{z}")
    if x < 8 or not _is_pow2(x):
        raise DimensionError(f"{path}: volume side {x} is not a power of two >= 8")
    expected = t * x * y * z * 4
    actual = len(buf) - HEADER_SIZE
    if actual != expected:
        raise DataError(f"{path}: payload has {actual} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(t, x, y, z)
    if not np.isfinite(data).all():
        raise DataError(f"{path}: payload contains NaN or Inf")
    sid = subject_id if subject_id is not None else path.stem
    return VolumeSeries(sid, float(tr), data.astype(np.float32))


def save_label_volume(labels: np.ndarray, path) -> None:
    """Integer-valued variant of the container (magic ``VTI1``, u32 payload, T=1)."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionError(f"label volume must be 3D, got shape {labels.shape}")
    if (labels < 0).any():
        raise DomainError("label volume values must be non-negative")
    x, y, z = labels.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VTI_MAGIC, 1, x, y, z, 0.0))
        fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def load_label_volume(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    t, x, y, z, _ = _read_header(buf, path, VTI_MAGIC)
    if t != 1:
        raise FormatError(f"{path}: label volume must have T=1, got {t}")
    expected = x * y * z * 4
    if len(buf) - HEADER_SIZE != expected:
        raise DataError(f"{path}: payload has {len(buf) - HEADER_SIZE} bytes, expected {expected}")
    return np.frombuffer(buf, dtype="<u4", offset=HEADER_SIZE).reshape(x, y, z).astype(np.int64)


# ---------------------------------------------------------------------------
# phenotype table


def load_phenotype_table(path, n_sites: int | None = None) -> list[SubjectRecord]:
    """Parse ``subject_id,site,diagnosis,series_path``.

    Relative series paths are resolved against the CSV's directory.
    """
    path = Path(path)
    base = path.parent
    records: list[SubjectRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PHENOTYPE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            sid = row["subject_id"].strip()
            if sid in seen:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate subject_id {sid!r}")
            seen.add(sid)
            try:
                site = int(row["site"])
                diag = int(row["diagnosis"])
            except ValueError as exc:
                raise DomainError(f"{path}:{lineno}: non-integer site or diagnosis") from exc
            if site < 0 or (n_sites is not None and site >= n_sites):
                raise DomainError(f"{path}:{lineno}: unknown site index {site}")
            if diag not in (0, 1):
                raise DomainError(f"{path}:{lineno}: diagnosis must be 0 or 1, got {diag}")
            sp = row["series_path"].strip()
            if not os.path.isabs(sp):
                sp = str(base / sp)
            records.append(SubjectRecord(sid, site, diag, sp))
    return records


def write_phenotype_table(records, path, relative_to=None) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PHENOTYPE_COLUMNS)
        for r in records:
            sp = r.series_path
            if relative_to is not None:
                sp = os.path.relpath(sp, relative_to)
            w.writerow([r.subject_id, r.site, r.diagnosis, sp])


def load_series_array(records) -> np.ndarray:
    """Stack every record's series into one [N, T, S, S, S] array."""
    arrays = [load_volume_series(r.series_path, r.subject_id).data for r in records]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"series have differing shapes: {sorted(shapes)}")
    return np.stack(arrays)


# ---------------------------------------------------------------------------
# splits


def make_kfold_splits(records, k: int, seed: int) -> FoldAssignment:
    """K folds stratified jointly by (site, diagnosis).

    Each stratum is shuffled with ``seed`` and dealt round-robin; the dealing
    position carries over between strata so total fold sizes stay balanced.
    """
    records = sorted(records, key=lambda r: r.subject_id)
    n = len(records)
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if k > n:
        raise SplitError(f"k={k} exceeds the number of records ({n})")
    strata: dict[tuple[int, int], list[str]] = defaultdict(list)
    for r in records:
        strata[(r.site, r.diagnosis)].append(r.subject_id)
    rng = np.random.default_rng(seed)
    test_sets: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for key in sorted(strata):
        members = strata[key]
        for idx in rng.permutation(len(members)):
            test_sets[pos % k].append(members[idx])
            pos += 1
    all_ids = [r.subject_id for r in records]
    folds = []
    for test in test_sets:
        test_set = set(test)
        folds.append(([s for s in all_ids if s not in test_set], sorted(test)))
    return FoldAssignment(folds, "k_fold", seed)


def make_loso_splits(records, site_names=None) -> FoldAssignment:
    """One fold per site; the test set is every subject of that site.

    ``site_names`` optionally maps site index to a display name for the fold.
    """
    records = sorted(records, key=lambda r: r.subject_id)
    sites = sorted({r.site for r in records})
    if len(sites) < 2:
        raise SplitError("leave-one-site-out needs at least two sites")
    folds = []
    for s in sites:
        test = [r.subject_id for r in records if r.site == s]
        train = [r.subject_id for r in records if r.site != s]
        folds.append((train, test))
    names = [str(site_names[s]) if site_names is not None else str(s) for s in sites]
    return FoldAssignment(folds, "leave_one_site_out", None, names)


def index_records(records) -> dict[str, SubjectRecord]:
    return {r.subject_id: r for r in records}
