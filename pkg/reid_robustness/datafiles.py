"""Readers and writers for the toolkit's flat files.

* Manifests are JSON Lines: an optional header ``{"dataset", "schema_version"}``
  followed by one record per image.
* Embeddings ("CILE"), distance matrices ("CILD") and logits ("CILL") are little
  endian binary files with a fixed header.
* Plans and reports are JSON, written with sorted keys so identical content
  gives identical bytes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
import hashlib
import json
import logging
from pathlib import Path
import struct
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import voluptuous as vol

from .const import (
    DATASET_PRESETS,
    MANIFEST_SCHEMA_VERSION,
    MAX_SEVERITY,
    MODALITY_IR,
    MODALITY_RGB,
    SEED_MASK,
    SETTINGS,
    SPLIT_TRAIN,
    SPLITS,
    TAP_POST_BNNECK,
    TAP_PRE_BNNECK,
    TAP_UNSPECIFIED,
    TAPS,
)
from .errors import (
    CountMismatchError,
    DataError,
    DuplicateImageIdError,
    EmbeddingFormatError,
    EmptyManifestError,
    ManifestFormatError,
    MissingImageError,
    NonFiniteError,
    SplitCountMismatchError,
    TruncatedFileError,
    UnknownSplitError,
    UsageError,
)
from .metrics import ImageMeta

_LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]

EMBEDDING_MAGIC = b"CILE"
DISTANCE_MAGIC = b"CILD"
LOGITS_MAGIC = b"CILL"
FORMAT_VERSION = 1

# magic, version, tap code, reserved, count, dim, manifest checksum
EMBEDDING_HEADER = struct.Struct("<4sHBBII8s")
# magic, version, reserved, rows, columns
MATRIX_HEADER = struct.Struct("<4sHHII")

NO_CHECKSUM = bytes(8)

TAP_CODES = {TAP_UNSPECIFIED: 0, TAP_PRE_BNNECK: 1, TAP_POST_BNNECK: 2}
_TAP_NAMES = {code: name for name, code in TAP_CODES.items()}

_UINT64 = vol.All(int, vol.Range(min=0, max=SEED_MASK))
_NONNEGATIVE = vol.All(int, vol.Range(min=0))

HEADER_SCHEMA = vol.Schema(
    {
        vol.Required("dataset"): vol.All(str, vol.Length(min=1)),
        vol.Required("schema_version"): vol.All(
            int, vol.Range(min=1, max=MANIFEST_SCHEMA_VERSION)
        ),
    }
)

RECORD_SCHEMA = vol.Schema(
    {
        vol.Required("image_id"): _UINT64,
        vol.Required("path"): vol.All(str, vol.Length(min=1)),
        vol.Required("person_id"): _NONNEGATIVE,
        vol.Required("camera_id"): _NONNEGATIVE,
        vol.Required("modality"): vol.In([MODALITY_RGB, MODALITY_IR]),
        vol.Required("split"): vol.In(SPLITS),
        vol.Optional("junk", default=False): bool,
    }
)

_PLAN_ENTRY_SCHEMA = vol.Schema(
    {
        vol.Required("image_id"): _UINT64,
        vol.Required("type"): str,
        vol.Required("severity"): vol.All(int, vol.Range(min=0, max=MAX_SEVERITY)),
        vol.Required("seed"): _UINT64,
    }
)

PLAN_SCHEMA = vol.Schema(
    {
        vol.Required("toolkit_version"): str,
        vol.Required("master_seed"): _UINT64,
        vol.Required("repeat_index"): _NONNEGATIVE,
        vol.Required("setting"): vol.In(SETTINGS),
        vol.Required("fixed"): vol.Any(None, str),
        vol.Required("entries"): [_PLAN_ENTRY_SCHEMA],
    }
)

_STATS_SCHEMA = vol.Schema(
    {
        vol.Required("mean"): vol.Coerce(float),
        vol.Required("std"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Required("raw"): [vol.Coerce(float)],
    }
)

_ROW_SCHEMA = vol.Schema(
    {
        vol.Required("tap"): vol.In(TAPS),
        vol.Required("setting"): str,
        vol.Required("metrics"): {str: _STATS_SCHEMA},
        vol.Required("skipped"): [_NONNEGATIVE],
        vol.Required("n_valid"): [_NONNEGATIVE],
    }
)

REPORT_SCHEMA = vol.Schema(
    {
        vol.Required("toolkit_version"): str,
        vol.Required("dataset"): str,
        vol.Required("protocol"): str,
        vol.Required("mode"): vol.Any(None, str),
        vol.Required("repeats"): vol.All(int, vol.Range(min=1)),
        vol.Required("master_seed"): _UINT64,
        vol.Required("config"): dict,
        vol.Required("seeds"): dict,
        vol.Required("rows"): [_ROW_SCHEMA],
    }
)


@dataclass(frozen=True)
class ManifestRecord:
    image_id: int
    path: str
    person_id: int
    camera_id: int
    modality: str
    split: str
    junk: bool = False

    @property
    def meta(self) -> ImageMeta:
        return ImageMeta(self.person_id, self.camera_id, self.image_id, self.junk)

    def as_dict(self) -> dict:
        out = {
            "image_id": self.image_id,
            "path": self.path,
            "person_id": self.person_id,
            "camera_id": self.camera_id,
            "modality": self.modality,
            "split": self.split,
        }
        if self.junk:
            out["junk"] = True
        return out


@dataclass(frozen=True)
class DatasetManifest:
    dataset: str
    records: Tuple[ManifestRecord, ...]
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Optional[Path] = field(default=None, compare=False)

    def split(self, name: str) -> Tuple[ManifestRecord, ...]:
        if name not in SPLITS:
            raise UsageError(f"Unknown split {name!r}, expected one of {SPLITS}")
        return tuple(r for r in self.records if r.split == name)

    @property
    def test_records(self) -> Tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.split != SPLIT_TRAIN)

    def by_id(self) -> Dict[int, ManifestRecord]:
        return {r.image_id: r for r in self.records}

    def resolve(self, record: ManifestRecord) -> Path:
        path = Path(record.path)
        if self.root is None or path.is_absolute():
            return path
        return self.root / path

    def split_counts(self) -> Dict[str, int]:
        counts = dict.fromkeys(SPLITS, 0)
        for record in self.records:
            counts[record.split] += 1
        return counts


def expected_stats(dataset: str) -> Dict[str, int]:
    """Published query/gallery sizes of a dataset preset."""
    try:
        preset = DATASET_PRESETS[dataset]
    except KeyError:
        raise UsageError(
            f"Unknown dataset {dataset!r}, expected one of {sorted(DATASET_PRESETS)}"
        ) from None
    return {
        split: preset[split]
        for split in ("query", "gallery")
        if preset.get(split) is not None
    }


def parse_manifest(lines: Iterable[str], source: str = "<manifest>", **kwargs) -> DatasetManifest:
    header = None
    records: List[ManifestRecord] = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise ManifestFormatError(f"{source}:{lineno}: invalid JSON: {err}") from err
        if not isinstance(obj, dict):
            raise ManifestFormatError(f"{source}:{lineno}: expected a JSON object")
        if header is None and not records and "image_id" not in obj:
            try:
                header = HEADER_SCHEMA(obj)
            except vol.Invalid as err:
                raise ManifestFormatError(f"{source}:{lineno}: bad header: {err}") from err
            continue
        if "split" in obj and obj["split"] not in SPLITS:
            raise UnknownSplitError(obj["split"], lineno)
        try:
            data = RECORD_SCHEMA(obj)
        except vol.Invalid as err:
            raise ManifestFormatError(f"{source}:{lineno}: {err}") from err
        if data["image_id"] in seen:
            raise DuplicateImageIdError(data["image_id"])
        seen.add(data["image_id"])
        records.append(ManifestRecord(**data))
    if not records:
        raise EmptyManifestError(f"{source}: manifest has no records")
    header = header or {"dataset": "custom", "schema_version": MANIFEST_SCHEMA_VERSION}
    return DatasetManifest(header["dataset"], tuple(records), header["schema_version"], **kwargs)


def load_manifest(
    path: PathLike,
    expected: Optional[Union[str, Mapping[str, int]]] = None,
    *,
    check_paths: bool = True,
) -> DatasetManifest:
    """Load and validate a manifest.

    ``expected`` is either split sizes such as ``{"query": 3368}`` or the name
    of a dataset preset. Relative image paths resolve against the manifest's
    directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Manifest not found: {path}")
    with path.open(encoding="utf-8") as handle:
        manifest = parse_manifest(handle, str(path), root=path.parent)
    if expected is not None:
        check_split_counts(manifest, expected)
    if check_paths:
        missing = [r for r in manifest.records if not manifest.resolve(r).is_file()]
        if missing:
            raise MissingImageError(
                f"{len(missing)} image(s) listed in {path} do not exist, first is "
                f"{manifest.resolve(missing[0])}"
            )
    _LOGGER.info(
        "Loaded manifest %s: dataset %s, %s records", path, manifest.dataset, len(manifest.records)
    )
    return manifest


def check_split_counts(
    manifest: DatasetManifest, expected: Union[str, Mapping[str, int]]
) -> None:
    if isinstance(expected, str):
        expected = expected_stats(expected)
    counts = manifest.split_counts()
    for split, count in expected.items():
        if split not in SPLITS:
            raise UsageError(f"Unknown split {split!r} in expected statistics")
        if counts[split] != count:
            raise SplitCountMismatchError(split, count, counts[split])


def dump_manifest(manifest: DatasetManifest) -> str:
    header = {"dataset": manifest.dataset, "schema_version": manifest.schema_version}
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(r.as_dict(), sort_keys=True) for r in manifest.records)
    return "\n".join(lines) + "\n"


def write_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    Path(path).write_text(dump_manifest(manifest), encoding="utf-8")


def manifest_checksum(image_ids: Sequence[int]) -> bytes:
    """First 8 bytes of SHA-256 over the ordered ids as little endian u64."""
    packed = np.asarray(list(image_ids), dtype="<u8").tobytes()
    return hashlib.sha256(packed).digest()[:8]


@dataclass(frozen=True)
class EmbeddingMatrix:
    vectors: np.ndarray
    tap: str = TAP_UNSPECIFIED
    checksum: bytes = NO_CHECKSUM

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _require_finite(path: PathLike, values: np.ndarray) -> None:
    if not np.isfinite(values).all():
        first = int(np.flatnonzero(~np.isfinite(values).all(axis=1))[0])
        raise NonFiniteError(f"{path}: non-finite value in row {first}")


def encode_embeddings(
    vectors: np.ndarray,
    *,
    tap: str = TAP_UNSPECIFIED,
    image_ids: Optional[Sequence[int]] = None,
    checksum: Optional[bytes] = None,
) -> bytes:
    """Serialize ``vectors``. Pass the ordered manifest ``image_ids`` (or a
    precomputed ``checksum``) to let readers detect misaligned rows."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise UsageError(f"embeddings must be a 2-D matrix, got shape {vectors.shape}")
    if tap not in TAP_CODES:
        raise UsageError(f"Unknown tap {tap!r}, expected one of {TAPS}")
    payload = np.ascontiguousarray(vectors, dtype="<f4")
    _require_finite("<embeddings>", payload)
    if image_ids is None:
        checksum = NO_CHECKSUM if checksum is None else checksum
        if len(checksum) != 8:
            raise UsageError("checksum must be 8 bytes")
    else:
        if len(image_ids) != payload.shape[0]:
            raise UsageError(f"{len(image_ids)} ids for {payload.shape[0]} embeddings")
        checksum = manifest_checksum(image_ids)
    header = EMBEDDING_HEADER.pack(
        EMBEDDING_MAGIC, FORMAT_VERSION, TAP_CODES[tap], 0, *payload.shape, checksum
    )
    return header + payload.tobytes()


def write_embeddings(path: PathLike, vectors: np.ndarray, **kwargs) -> None:
    Path(path).write_bytes(encode_embeddings(vectors, **kwargs))
    _LOGGER.debug("Wrote embeddings %s with shape %s", path, np.shape(vectors))


def _read_header(path: Path, data: bytes, header: struct.Struct, magic: bytes) -> tuple:
    if len(data) < header.size:
        raise TruncatedFileError(str(path), len(data), header.size)
    fields = header.unpack_from(data)
    if fields[0] != magic:
        raise EmbeddingFormatError(f"{path}: bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != FORMAT_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported format version {fields[1]}")
    return fields


def _check_length(path: Path, data: bytes, expected: int) -> None:
    if len(data) < expected:
        raise TruncatedFileError(str(path), len(data), expected)
    if len(data) > expected:
        raise EmbeddingFormatError(
            f"{path}: {len(data) - expected} unexpected trailing bytes after offset {expected}"
        )


def read_embeddings(path: PathLike) -> EmbeddingMatrix:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Embedding file not found: {path}")
    data = path.read_bytes()
    _, _, tap_code, _, count, dim, checksum = _read_header(
        path, data, EMBEDDING_HEADER, EMBEDDING_MAGIC
    )
    if tap_code not in _TAP_NAMES:
        raise EmbeddingFormatError(f"{path}: unknown tap code {tap_code}")
    _check_length(path, data, EMBEDDING_HEADER.size + count * dim * 4)
    vectors = np.frombuffer(data, dtype="<f4", offset=EMBEDDING_HEADER.size).reshape(count, dim)
    _require_finite(path, vectors)
    return EmbeddingMatrix(vectors.astype(np.float32), _TAP_NAMES[tap_code], checksum)


def load_embeddings(
    path: PathLike, records: Sequence[ManifestRecord], *, dim: Optional[int] = None
) -> EmbeddingMatrix:
    """Read embeddings whose rows follow ``records`` one to one."""
    matrix = read_embeddings(path)
    if matrix.count != len(records):
        raise CountMismatchError(
            str(path), f"{matrix.count} embeddings for {len(records)} manifest records"
        )
    if dim is not None and matrix.dim != dim:
        raise CountMismatchError(str(path), f"dimension {matrix.dim}, expected {dim}")
    if matrix.checksum != NO_CHECKSUM and matrix.checksum != manifest_checksum(
        [r.image_id for r in records]
    ):
        raise CountMismatchError(str(path), "rows are not in manifest order (checksum differs)")
    return matrix


def write_distances(path: PathLike, dist: np.ndarray) -> None:
    dist = np.ascontiguousarray(dist, dtype="<f8")
    if dist.ndim != 2:
        raise UsageError(f"distance matrix must be 2-D, got shape {dist.shape}")
    _require_finite("<distances>", dist)
    header = MATRIX_HEADER.pack(DISTANCE_MAGIC, FORMAT_VERSION, 0, *dist.shape)
    Path(path).write_bytes(header + dist.tobytes())


def read_distances(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Distance file not found: {path}")
    data = path.read_bytes()
    _, _, _, rows, cols = _read_header(path, data, MATRIX_HEADER, DISTANCE_MAGIC)
    _check_length(path, data, MATRIX_HEADER.size + rows * cols * 8)
    dist = np.frombuffer(data, dtype="<f8", offset=MATRIX_HEADER.size).reshape(rows, cols)
    _require_finite(path, dist)
    return dist.astype(np.float64)


def write_logits(path: PathLike, logits: np.ndarray, labels: np.ndarray) -> None:
    logits = np.ascontiguousarray(logits, dtype="<f8")
    labels = np.ascontiguousarray(labels, dtype="<i8")
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise UsageError(f"logits {logits.shape} and labels {labels.shape} do not match")
    header = MATRIX_HEADER.pack(LOGITS_MAGIC, FORMAT_VERSION, 0, *logits.shape)
    Path(path).write_bytes(header + logits.tobytes() + labels.tobytes())


def read_logits(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Logits file not found: {path}")
    data = path.read_bytes()
    _, _, _, rows, cols = _read_header(path, data, MATRIX_HEADER, LOGITS_MAGIC)
    labels_at = MATRIX_HEADER.size + rows * cols * 8
    _check_length(path, data, labels_at + rows * 8)
    logits = np.frombuffer(data, dtype="<f8", offset=MATRIX_HEADER.size, count=rows * cols)
    labels = np.frombuffer(data, dtype="<i8", offset=labels_at, count=rows)
    return logits.reshape(rows, cols).astype(np.float64), labels.astype(np.int64)


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, obj) -> None:
    Path(path).write_text(dumps_json(obj), encoding="utf-8")


def read_json(path: PathLike):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"File not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: invalid JSON: {err}") from err


def validate_plan(obj: dict, source: str = "<plan>") -> dict:
    try:
        return PLAN_SCHEMA(obj)
    except vol.Invalid as err:
        raise DataError(f"{source}: invalid plan: {err}") from err


def validate_report(obj: dict, source: str = "<report>") -> dict:
    try:
        return REPORT_SCHEMA(obj)
    except vol.Invalid as err:
        raise DataError(f"{source}: invalid report: {err}") from err


def read_score_csv(path: PathLike, column: Optional[str] = None) -> Dict[str, float]:
    """Read one numeric column of a CSV file keyed by the columns before it.

    The column defaults to ``mAP`` when the header has it, else the second
    column, so ``model,score`` files and exported report tables both work.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise DataError(f"{path}: expected a header and at least one row of two columns")
    header = rows[0]
    if column is None:
        column = "mAP" if "mAP" in header else header[1]
    if column not in header or header.index(column) == 0:
        raise UsageError(f"{path}: no value column {column!r} in {header}")
    index = header.index(column)
    scores = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        key = "/".join(row[:index])
        try:
            scores[key] = float(row[index])
        except (IndexError, ValueError):
            raise DataError(f"{path}:{lineno}: no number in column {column!r}") from None
    return scores
