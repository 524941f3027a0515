"""Benchmark protocol: corruption plans, materialization, repeated evaluation,
fixed-corruption sweeps and the synthetic embedder used for end-to-end runs."""
from __future__ import annotations

import asyncio
from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import dataclass, field
from enum import Enum
import io
import logging
import math
from pathlib import Path
import shutil
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)
import uuid

import numpy as np

from .const import (
    CROSS_MODALITY_DATASETS,
    DATASET_PRESETS,
    DEFAULT_MAX_RANK,
    DEFAULT_WORKERS,
    DISTANCE_COSINE,
    INCOMPLETE_MARKER,
    MAX_SEVERITY,
    MODALITY_IR,
    MODALITY_RGB,
    MODE_A,
    MODE_B,
    PLAN_FILE,
    PROTOCOL_REGDB,
    PROTOCOL_SINGLE,
    PROTOCOL_SYSU,
    REPORT_RANKS,
    SETTING_BOTH,
    SETTING_CLEAN,
    SETTING_GALLERY,
    SETTING_QUERY,
    SETTINGS,
    SPLIT_GALLERY,
    SPLIT_QUERY,
    SYNTH_DIM,
    SYNTH_GAIN,
    SYNTH_SIGMA0,
    SYNTH_SIGMA1,
    SYSU_ALL_SEARCH_CAMS,
    SYSU_GALLERY_DRAWS,
    SYSU_INDOOR_CAMS,
    TAP_UNSPECIFIED,
    VERSION,
    XMODAL_ALL_RGB,
    XMODAL_GALLERY_ONLY,
)
from .corruptions import (
    CorruptionSpec,
    CorruptionType,
    corrupt_file,
    corruption_grid,
    distortion_score,
)
from .datafiles import (
    DatasetManifest,
    ManifestRecord,
    load_embeddings,
    read_json,
    validate_plan,
    write_embeddings,
    write_json,
)
from .errors import (
    CountMismatchError,
    DataError,
    MaterializeError,
    MissingEmbeddingError,
    UsageError,
)
from .imaging import read_image, write_png
from .metrics import MetricSummary, evaluate, pairwise_distances
from .rng import check_seed, derive_image_seed, derive_seed, make_rng, splitmix64

_LOGGER = logging.getLogger(__name__)

_T = TypeVar("_T")
_R = TypeVar("_R")

SIDE_QUERY = "query"
SIDE_GALLERY = "gallery"
SWEEP_DIR = "sweep"

_GRID = corruption_grid()


class EvalSetting(str, Enum):
    """Which side of the retrieval pair is corrupted."""

    QUERY = SETTING_QUERY
    GALLERY = SETTING_GALLERY
    BOTH = SETTING_BOTH
    CLEAN = SETTING_CLEAN

    @classmethod
    def parse(cls, value: Union[str, "EvalSetting"]) -> "EvalSetting":
        try:
            return cls(value)
        except ValueError:
            raise UsageError(f"Unknown setting {value!r}, expected one of {SETTINGS}") from None

    @property
    def sides(self) -> FrozenSet[str]:
        return _SETTING_SIDES[self]


_SETTING_SIDES = {
    EvalSetting.QUERY: frozenset({SIDE_QUERY}),
    EvalSetting.GALLERY: frozenset({SIDE_GALLERY}),
    EvalSetting.BOTH: frozenset({SIDE_QUERY, SIDE_GALLERY}),
    EvalSetting.CLEAN: frozenset(),
}

_MODE_NAMES = {
    ("sysu-mm01", MODE_A): "all-search",
    ("sysu-mm01", MODE_B): "indoor-search",
    ("regdb", MODE_A): "visible-to-thermal",
    ("regdb", MODE_B): "thermal-to-visible",
}


@dataclass(frozen=True)
class CrossModalityMode:
    dataset: str
    mode: str = MODE_A

    def __post_init__(self) -> None:
        if (self.dataset, self.mode) not in _MODE_NAMES:
            raise UsageError(
                f"No cross-modality mode {self.mode!r} for dataset {self.dataset!r}"
            )

    @property
    def name(self) -> str:
        return _MODE_NAMES[(self.dataset, self.mode)]


class PlanEntry(NamedTuple):
    image_id: int
    spec: CorruptionSpec


@dataclass(frozen=True)
class CorruptionPlan:
    master_seed: int
    repeat_index: int
    entries: Tuple[PlanEntry, ...]
    setting: str = SETTING_BOTH
    fixed: Optional[Tuple[CorruptionType, int]] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def image_ids(self) -> List[int]:
        return [e.image_id for e in self.entries]

    def specs(self) -> Dict[int, CorruptionSpec]:
        return {e.image_id: e.spec for e in self.entries}

    @property
    def subdir(self) -> Path:
        """Directory of this plan below an output root, without the repeat."""
        if self.fixed is None:
            return Path(self.setting)
        return Path(SWEEP_DIR, sweep_label(*self.fixed))

    def as_dict(self) -> dict:
        return {
            "toolkit_version": VERSION,
            "master_seed": self.master_seed,
            "repeat_index": self.repeat_index,
            "setting": self.setting,
            "fixed": None if self.fixed is None else sweep_label(*self.fixed),
            "entries": [{"image_id": e.image_id, **e.spec.as_dict()} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, obj: dict, source: str = "<plan>") -> "CorruptionPlan":
        data = validate_plan(obj, source)
        entries = tuple(
            PlanEntry(e["image_id"], CorruptionSpec(e["type"], e["severity"], e["seed"]))
            for e in data["entries"]
        )
        fixed = None
        if data["fixed"] is not None:
            name, _, level = data["fixed"].rpartition("-")
            fixed = (CorruptionType.from_name(name), int(level))
        return cls(data["master_seed"], data["repeat_index"], entries, data["setting"], fixed)


def sweep_label(ctype: Union[CorruptionType, str], severity: int) -> str:
    return f"{CorruptionType(ctype).value}-{severity}"


def _check_ids(ids: Sequence[int]) -> List[int]:
    ids = [check_seed(i) for i in ids]
    if not ids:
        raise UsageError("cannot plan an empty split")
    if len(set(ids)) != len(ids):
        raise UsageError("image ids in a plan must be unique")
    return ids


def plan_cell(image_seed: int) -> Tuple[CorruptionType, int]:
    """Map a per-image seed to one of the 100 (type, severity) cells."""
    return _GRID[image_seed % len(_GRID)]


def sample_plan(
    ids: Sequence[int], master_seed: int, repeat_index: int, *, setting: str = SETTING_BOTH
) -> CorruptionPlan:
    """Draw one corruption type and severity per image.

    The image seed is ``splitmix64(master_seed ^ (repeat_index << 32) ^ image_id)``;
    ``seed % 100`` selects the cell in enumeration order and one more SplitMix64
    round of the image seed seeds the corruption itself.
    """
    check_seed(master_seed)
    entries = []
    for image_id in _check_ids(ids):
        image_seed = derive_image_seed(master_seed, repeat_index, image_id)
        ctype, severity = plan_cell(image_seed)
        entries.append(PlanEntry(image_id, CorruptionSpec(ctype, severity, splitmix64(image_seed))))
    return CorruptionPlan(master_seed, repeat_index, tuple(entries), EvalSetting.parse(setting).value)


def sweep_plan(
    ids: Sequence[int],
    ctype: Union[CorruptionType, str],
    severity: int,
    master_seed: int,
    repeat_index: int,
) -> CorruptionPlan:
    """Plan corrupting every image with the same ``(ctype, severity)``."""
    check_seed(master_seed)
    ctype = CorruptionType.from_name(ctype) if isinstance(ctype, str) else ctype
    entries = tuple(
        PlanEntry(
            image_id,
            CorruptionSpec(
                ctype, severity, splitmix64(derive_image_seed(master_seed, repeat_index, image_id))
            ),
        )
        for image_id in _check_ids(ids)
    )
    return CorruptionPlan(master_seed, repeat_index, entries, SETTING_BOTH, (ctype, severity))


@dataclass(frozen=True)
class Roles:
    """Query and gallery records of one evaluation, in manifest order."""

    dataset: str
    protocol: str
    query: Tuple[ManifestRecord, ...]
    gallery: Tuple[ManifestRecord, ...]
    mode: Optional[str] = None

    @property
    def cross_modality(self) -> bool:
        return self.dataset in CROSS_MODALITY_DATASETS

    def side(self, name: str) -> Tuple[ManifestRecord, ...]:
        return self.query if name == SIDE_QUERY else self.gallery


def resolve_roles(
    manifest: DatasetManifest, mode: Optional[str] = None, dataset: Optional[str] = None
) -> Roles:
    """Pick query and gallery records for ``dataset`` (default: the manifest's).

    RegDB mode A searches thermal images with visible queries and mode B the
    reverse. SYSU-MM01 queries are the infrared test images; the gallery pool is
    the RGB test images of cameras 1, 2, 4 and 5 (A) or 1 and 2 (B).
    """
    dataset = dataset or manifest.dataset
    protocol = DATASET_PRESETS.get(dataset, {}).get("protocol", PROTOCOL_SINGLE)
    if dataset in CROSS_MODALITY_DATASETS:
        mode = CrossModalityMode(dataset, mode or MODE_A).mode
        pool = manifest.test_records
        if protocol == PROTOCOL_REGDB:
            visible = tuple(r for r in pool if r.modality == MODALITY_RGB)
            thermal = tuple(r for r in pool if r.modality == MODALITY_IR)
            query, gallery = (visible, thermal) if mode == MODE_A else (thermal, visible)
        else:
            cams = SYSU_ALL_SEARCH_CAMS if mode == MODE_A else SYSU_INDOOR_CAMS
            query = tuple(r for r in pool if r.modality == MODALITY_IR)
            gallery = tuple(
                r for r in pool if r.modality == MODALITY_RGB and r.camera_id in cams
            )
    else:
        if mode is not None:
            _LOGGER.warning("Mode %s ignored for single-modality dataset %s", mode, dataset)
            mode = None
        query = manifest.split(SPLIT_QUERY)
        gallery = manifest.split(SPLIT_GALLERY)
    if not query or not gallery:
        raise DataError(
            f"Dataset {dataset} has {len(query)} query and {len(gallery)} gallery records"
        )
    return Roles(dataset, protocol, query, gallery, mode)


def plan_targets(
    roles: Roles, setting: Union[str, EvalSetting], cross_modality: str = XMODAL_GALLERY_ONLY
) -> Dict[str, Tuple[ManifestRecord, ...]]:
    """Records that get corrupted under ``setting``, keyed by side.

    On cross-modality datasets only RGB images are corrupted, and with
    ``gallery-only`` only those in the gallery.
    """
    if cross_modality not in (XMODAL_GALLERY_ONLY, XMODAL_ALL_RGB):
        raise UsageError(f"Unknown cross-modality rule {cross_modality!r}")
    targets = {}
    for side in EvalSetting.parse(setting).sides:
        records = roles.side(side)
        if roles.cross_modality:
            if cross_modality == XMODAL_GALLERY_ONLY and side == SIDE_QUERY:
                continue
            records = tuple(r for r in records if r.modality == MODALITY_RGB)
        if records:
            targets[side] = records
    return targets


def corrupted_sides(
    roles: Roles, setting: Union[str, EvalSetting], cross_modality: str = XMODAL_GALLERY_ONLY
) -> FrozenSet[str]:
    return frozenset(plan_targets(roles, setting, cross_modality))


def build_plan(
    roles: Roles,
    setting: Union[str, EvalSetting],
    master_seed: int,
    repeat_index: int,
    *,
    cross_modality: str = XMODAL_GALLERY_ONLY,
    fixed: Optional[Tuple[CorruptionType, int]] = None,
) -> CorruptionPlan:
    """Plan for one repeat of ``setting``; empty when nothing is corrupted."""
    setting = EvalSetting.parse(setting)
    if fixed is not None:
        setting = EvalSetting.BOTH
    targets = plan_targets(roles, setting, cross_modality)
    ids: List[int] = []
    seen = set()
    for side in (SIDE_QUERY, SIDE_GALLERY):
        for record in targets.get(side, ()):
            if record.image_id not in seen:
                seen.add(record.image_id)
                ids.append(record.image_id)
    if not ids:
        if setting is not EvalSetting.CLEAN:
            _LOGGER.warning("Setting %s corrupts no images of %s", setting.value, roles.dataset)
        return CorruptionPlan(check_seed(master_seed), repeat_index, (), setting.value)
    if fixed is not None:
        return sweep_plan(ids, fixed[0], fixed[1], master_seed, repeat_index)
    return sample_plan(ids, master_seed, repeat_index, setting=setting.value)


class BenchmarkRunner:
    """Runs blocking jobs on a thread pool from an asyncio event loop.

    Results come back in job order; a failing job yields its exception in place
    of a result instead of cancelling the others.
    """

    def __init__(self, workers: int = DEFAULT_WORKERS) -> None:
        if workers < 1:
            raise UsageError(f"workers must be >= 1, got {workers}")
        self.workers = workers

    async def async_map(
        self, func: Callable[[_T], _R], items: Iterable[_T]
    ) -> List[Union[_R, BaseException]]:
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return await asyncio.gather(
                *(loop.run_in_executor(pool, func, item) for item in items),
                return_exceptions=True,
            )

    async def async_map_strict(self, func: Callable[[_T], _R], items: Iterable[_T]) -> List[_R]:
        """Like :meth:`async_map` but re-raise the first failure in job order."""
        results = await self.async_map(func, items)
        for result in results:
            if isinstance(result, BaseException):
                raise result
        return results


async def async_materialize(
    plan: CorruptionPlan,
    manifest: DatasetManifest,
    out_dir: Union[str, Path],
    *,
    records: Optional[Sequence[ManifestRecord]] = None,
    workers: int = DEFAULT_WORKERS,
) -> Path:
    """Write ``out_dir/<setting>/<repeat>/<image_id>.png`` for every record plus
    the plan file.

    ``records`` defaults to the manifest's query and gallery records. Records
    without a plan entry are copied pixel for pixel. The directory is built under
    a temporary name and renamed on success; on failure it keeps an
    ``INCOMPLETE`` file listing the failed images.
    """
    records = manifest.test_records if records is None else tuple(records)
    known = {r.image_id for r in records}
    unknown = [i for i in plan.image_ids if i not in known]
    if unknown:
        raise DataError(
            f"{len(unknown)} plan entries are not in the manifest, first is image_id {unknown[0]}"
        )
    specs = plan.specs()
    parent = Path(out_dir) / plan.subdir
    parent.mkdir(parents=True, exist_ok=True)
    final = parent / str(plan.repeat_index)
    partial = parent / f".{plan.repeat_index}.partial-{uuid.uuid4().hex}"
    partial.mkdir()

    def work(record: ManifestRecord) -> None:
        dst = partial / f"{record.image_id}.png"
        src = manifest.resolve(record)
        spec = specs.get(record.image_id)
        if spec is None:
            write_png(read_image(src), dst)
        else:
            corrupt_file(src, dst, spec)

    results = await BenchmarkRunner(workers).async_map(work, records)
    failures = [
        (record.image_id, str(result))
        for record, result in zip(records, results)
        if isinstance(result, Exception)
    ]
    if failures:
        for image_id, message in failures:
            _LOGGER.warning("Image %s failed: %s", image_id, message)
        (partial / INCOMPLETE_MARKER).write_text(
            "".join(f"{image_id}\t{message}\n" for image_id, message in failures),
            encoding="utf-8",
        )
        raise MaterializeError(failures, str(partial))
    write_json(partial / PLAN_FILE, plan.as_dict())
    if final.exists():
        shutil.rmtree(final)
    partial.rename(final)
    _LOGGER.info(
        "Materialized %s images (%s corrupted) into %s", len(records), len(plan), final
    )
    return final


def materialize(plan: CorruptionPlan, manifest: DatasetManifest, out_dir, **kwargs) -> Path:
    return asyncio.run(async_materialize(plan, manifest, out_dir, **kwargs))


@dataclass(frozen=True)
class EvalEmbeddings:
    """Embeddings of one tap.

    Corrupted matrices are keyed by ``(setting, repeat)``; rows follow the
    resolved query or gallery records.
    """

    clean_query: np.ndarray
    clean_gallery: np.ndarray
    corrupted_query: Mapping[Tuple[str, int], np.ndarray] = field(default_factory=dict)
    corrupted_gallery: Mapping[Tuple[str, int], np.ndarray] = field(default_factory=dict)
    tap: str = TAP_UNSPECIFIED

    def pair(
        self, setting: str, repeat: int, sides: FrozenSet[str]
    ) -> Tuple[np.ndarray, np.ndarray]:
        query, gallery = self.clean_query, self.clean_gallery
        if SIDE_QUERY in sides:
            query = self._corrupted(self.corrupted_query, SIDE_QUERY, setting, repeat)
        if SIDE_GALLERY in sides:
            gallery = self._corrupted(self.corrupted_gallery, SIDE_GALLERY, setting, repeat)
        return query, gallery

    def _corrupted(self, table, side: str, setting: str, repeat: int) -> np.ndarray:
        try:
            return table[(setting, repeat)]
        except KeyError:
            raise MissingEmbeddingError(
                f"No corrupted {side} embeddings for tap {self.tap}, setting {setting}, "
                f"repeat {repeat}"
            ) from None


@dataclass(frozen=True)
class EvalOptions:
    max_rank: int = DEFAULT_MAX_RANK
    distance: str = DISTANCE_COSINE
    cross_modality: str = XMODAL_GALLERY_ONLY
    sysu_draws: int = SYSU_GALLERY_DRAWS
    workers: int = DEFAULT_WORKERS
    config: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "EvalOptions":
        return cls(
            max_rank=config["max_rank"],
            distance=config["distance"],
            cross_modality=config["cross_modality_corruption"],
            sysu_draws=config["sysu_gallery_draws"],
            workers=config["workers"],
            config=config,
        )

    @property
    def ranks(self) -> Tuple[int, ...]:
        return tuple(k for k in REPORT_RANKS if k <= self.max_rank)


@dataclass(frozen=True)
class MetricStats:
    mean: float
    std: float
    raw: Tuple[float, ...]

    @classmethod
    def from_raw(cls, raw: Sequence[float]) -> "MetricStats":
        """Mean and population standard deviation over repeats."""
        raw = tuple(float(v) for v in raw)
        if not raw:
            raise UsageError("cannot aggregate zero repeats")
        if all(v == raw[0] for v in raw):
            return cls(raw[0], 0.0, raw)
        mean = min(max(math.fsum(raw) / len(raw), min(raw)), max(raw))
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in raw) / len(raw))
        return cls(mean, std, raw)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "raw": list(self.raw)}

    def format(self, scale: float = 100.0) -> str:
        return f"{self.mean * scale:.2f} ({self.std * scale:.2f})"


@dataclass(frozen=True)
class ReportRow:
    tap: str
    setting: str
    metrics: Dict[str, MetricStats]
    skipped: Tuple[int, ...]
    n_valid: Tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "tap": self.tap,
            "setting": self.setting,
            "metrics": {name: stats.as_dict() for name, stats in self.metrics.items()},
            "skipped": list(self.skipped),
            "n_valid": list(self.n_valid),
        }


@dataclass(frozen=True)
class EvalReport:
    dataset: str
    protocol: str
    mode: Optional[str]
    repeats: int
    master_seed: int
    config: Mapping[str, Any]
    rows: Tuple[ReportRow, ...]
    seeds: Mapping[str, Any]
    toolkit_version: str = VERSION

    def row(self, setting: str, tap: str = TAP_UNSPECIFIED) -> ReportRow:
        for row in self.rows:
            if row.setting == setting and row.tap == tap:
                return row
        raise KeyError((tap, setting))

    def as_dict(self) -> dict:
        return {
            "toolkit_version": self.toolkit_version,
            "dataset": self.dataset,
            "protocol": self.protocol,
            "mode": self.mode,
            "repeats": self.repeats,
            "master_seed": self.master_seed,
            "config": dict(self.config),
            "seeds": dict(self.seeds),
            "rows": [row.as_dict() for row in self.rows],
        }


class _Job(NamedTuple):
    embeddings: EvalEmbeddings
    setting: str
    sides: FrozenSet[str]
    repeat: int


class _RepeatResult(NamedTuple):
    values: Dict[str, float]
    skipped: int
    n_valid: int


def gallery_draws(
    gallery: Sequence[ManifestRecord], master_seed: int, repeat_index: int, draws: int
) -> List[np.ndarray]:
    """Per draw, one random gallery index for every (identity, camera) pair."""
    groups: Dict[Tuple[int, int], List[int]] = {}
    for index, record in enumerate(gallery):
        groups.setdefault((record.person_id, record.camera_id), []).append(index)
    keys = sorted(groups)
    out = []
    for draw in range(draws):
        rng = make_rng(derive_seed(master_seed, repeat_index, draw))
        picks = [groups[key][int(rng.integers(len(groups[key])))] for key in keys]
        out.append(np.array(sorted(picks), dtype=np.int64))
    return out


def _check_shapes(roles: Roles, job: _Job, query: np.ndarray, gallery: np.ndarray) -> None:
    label = f"tap {job.embeddings.tap}, setting {job.setting}, repeat {job.repeat}"
    if query.ndim != 2 or query.shape[0] != len(roles.query):
        raise CountMismatchError(label, f"{query.shape} query embeddings for {len(roles.query)} records")
    if gallery.ndim != 2 or gallery.shape[0] != len(roles.gallery):
        raise CountMismatchError(
            label, f"{gallery.shape} gallery embeddings for {len(roles.gallery)} records"
        )
    if query.shape[1] != gallery.shape[1]:
        raise CountMismatchError(label, f"dimension {query.shape[1]} vs {gallery.shape[1]}")


def score_distances(
    roles: Roles, dist: np.ndarray, master_seed: int, repeat: int, options: EvalOptions
) -> _RepeatResult:
    """Metrics of one repeat from a query x gallery-pool distance matrix.

    On SYSU-MM01 the values are averaged over the repeat's gallery draws and the
    query counts are summed over them.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (len(roles.query), len(roles.gallery)):
        raise CountMismatchError(
            "<distances>",
            f"shape {dist.shape}, expected ({len(roles.query)}, {len(roles.gallery)})",
        )
    qmeta = [r.meta for r in roles.query]
    gmeta = [r.meta for r in roles.gallery]
    if roles.protocol == PROTOCOL_SYSU:
        summaries: List[MetricSummary] = [
            evaluate(
                dist[:, idx],
                qmeta,
                [gmeta[i] for i in idx],
                options.max_rank,
                protocol=roles.protocol,
            )
            for idx in gallery_draws(roles.gallery, master_seed, repeat, options.sysu_draws)
        ]
    else:
        summaries = [evaluate(dist, qmeta, gmeta, options.max_rank, protocol=roles.protocol)]
    per_draw = [s.as_dict(options.ranks) for s in summaries]
    values = {
        name: math.fsum(d[name] for d in per_draw) / len(per_draw) for name in per_draw[0]
    }
    return _RepeatResult(
        values, sum(len(s.skipped) for s in summaries), sum(s.n_valid for s in summaries)
    )


def _evaluate_job(
    roles: Roles, master_seed: int, options: EvalOptions, job: _Job
) -> _RepeatResult:
    query, gallery = job.embeddings.pair(job.setting, job.repeat, job.sides)
    _check_shapes(roles, job, np.asarray(query), np.asarray(gallery))
    result = score_distances(
        roles, pairwise_distances(query, gallery, options.distance), master_seed, job.repeat, options
    )
    _LOGGER.debug(
        "Tap %s setting %s repeat %s: %s", job.embeddings.tap, job.setting, job.repeat, result.values
    )
    return result


async def _async_rows(
    roles: Roles,
    items: Sequence[Tuple[str, EvalEmbeddings, str]],
    repeats: int,
    master_seed: int,
    options: EvalOptions,
) -> List[Tuple[str, Dict[str, MetricStats], Tuple[int, ...], Tuple[int, ...]]]:
    """Evaluate ``(label, embeddings, setting)`` items over all repeats."""
    if repeats < 1:
        raise UsageError(f"repeats must be >= 1, got {repeats}")
    check_seed(master_seed)
    jobs = []
    for _, embeddings, setting in items:
        sides = corrupted_sides(roles, setting, options.cross_modality)
        jobs.extend(_Job(embeddings, setting, sides, r) for r in range(repeats))

    def work(job: _Job) -> _RepeatResult:
        return _evaluate_job(roles, master_seed, options, job)

    results = await BenchmarkRunner(options.workers).async_map_strict(work, jobs)
    rows = []
    for index, (label, _, _) in enumerate(items):
        chunk = results[index * repeats:(index + 1) * repeats]
        metrics = {
            name: MetricStats.from_raw([r.values[name] for r in chunk]) for name in chunk[0].values
        }
        rows.append(
            (label, metrics, tuple(r.skipped for r in chunk), tuple(r.n_valid for r in chunk))
        )
    return rows


def _seeds(roles: Roles, master_seed: int, repeats: int, options: EvalOptions) -> dict:
    seeds: Dict[str, Any] = {
        "master_seed": master_seed,
        "repeat_indices": list(range(repeats)),
        "gallery_draw_seeds": [],
    }
    if roles.protocol == PROTOCOL_SYSU:
        seeds["gallery_draw_seeds"] = [
            [derive_seed(master_seed, r, d) for d in range(options.sysu_draws)]
            for r in range(repeats)
        ]
    return seeds


def _as_list(embeddings) -> List[EvalEmbeddings]:
    if isinstance(embeddings, EvalEmbeddings):
        embeddings = [embeddings]
    embeddings = list(embeddings)
    taps = [e.tap for e in embeddings]
    if not embeddings or len(set(taps)) != len(taps):
        raise UsageError(f"expected embeddings with distinct taps, got {taps}")
    return embeddings


async def async_run_eval(
    manifest: DatasetManifest,
    embeddings: Union[EvalEmbeddings, Sequence[EvalEmbeddings]],
    settings: Union[str, Sequence[str]],
    repeats: int,
    master_seed: int,
    mode: Optional[str] = None,
    *,
    dataset: Optional[str] = None,
    options: Optional[EvalOptions] = None,
) -> EvalReport:
    """Evaluate every tap under every setting for ``repeats`` repeats.

    Rows are ordered tap first, then setting. Each row aggregates one metric
    value per repeat; on SYSU-MM01 a repeat's value is the mean over its
    gallery draws.
    """
    options = options or EvalOptions()
    roles = resolve_roles(manifest, mode, dataset)
    if isinstance(settings, str):
        settings = [settings]
    settings = [EvalSetting.parse(s).value for s in settings]
    items = [(e.tap, e, s) for e in _as_list(embeddings) for s in settings]
    rows = await _async_rows(roles, items, repeats, master_seed, options)
    report_rows = tuple(
        ReportRow(tap, setting, metrics, skipped, n_valid)
        for (tap, metrics, skipped, n_valid), (_, _, setting) in zip(rows, items)
    )
    _LOGGER.info("Evaluated %s rows over %s repeats", len(report_rows), repeats)
    return _report(roles, report_rows, repeats, master_seed, options)


def _report(
    roles: Roles,
    rows: Tuple[ReportRow, ...],
    repeats: int,
    master_seed: int,
    options: EvalOptions,
) -> EvalReport:
    config = dict(options.config) or {
        "max_rank": options.max_rank,
        "distance": options.distance,
        "cross_modality_corruption": options.cross_modality,
        "sysu_gallery_draws": options.sysu_draws,
    }
    return EvalReport(
        dataset=roles.dataset,
        protocol=roles.protocol,
        mode=roles.mode,
        repeats=repeats,
        master_seed=master_seed,
        config=config,
        rows=rows,
        seeds=_seeds(roles, master_seed, repeats, options),
    )


def run_eval(*args, **kwargs) -> EvalReport:
    return asyncio.run(async_run_eval(*args, **kwargs))


def report_from_distances(
    manifest: DatasetManifest,
    dist: np.ndarray,
    setting: str = SETTING_CLEAN,
    master_seed: int = 0,
    mode: Optional[str] = None,
    *,
    dataset: Optional[str] = None,
    options: Optional[EvalOptions] = None,
) -> EvalReport:
    """Single-repeat report from a precomputed query x gallery distance matrix."""
    options = options or EvalOptions()
    roles = resolve_roles(manifest, mode, dataset)
    result = score_distances(roles, dist, check_seed(master_seed), 0, options)
    row = ReportRow(
        TAP_UNSPECIFIED,
        EvalSetting.parse(setting).value,
        {name: MetricStats.from_raw([value]) for name, value in result.values.items()},
        (result.skipped,),
        (result.n_valid,),
    )
    return _report(roles, (row,), 1, master_seed, options)


def _report_cells(report: Mapping[str, Any]) -> Tuple[List[str], List[List[str]]]:
    rows = report["rows"]
    names: List[str] = []
    for row in rows:
        names.extend(n for n in row["metrics"] if n not in names)
    table = []
    for row in rows:
        cells = [row["tap"], row["setting"]]
        for name in names:
            stats = row["metrics"].get(name)
            cells.append("-" if stats is None else MetricStats(**{**stats, "raw": ()}).format())
        table.append(cells)
    return names, table


def render_report(report: Mapping[str, Any]) -> str:
    """Text table of a report dict, ``mean (std)`` cells in percent."""
    names, table = _report_cells(report)
    lines = [["tap", "setting", *names], *table]
    widths = [max(len(line[i]) for line in lines) for i in range(len(lines[0]))]
    title = (
        f"{report['dataset']} ({report['protocol']}), {report['repeats']} repeat(s), "
        f"seed {report['master_seed']}"
    )
    body = "\n".join(
        "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
        for line in lines
    )
    return f"{title}\n{body}\n"


def report_to_csv(report: Mapping[str, Any]) -> str:
    names, _ = _report_cells(report)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["tap", "setting", *(f"{n}{s}" for n in names for s in ("", "_std"))])
    for row in report["rows"]:
        cells = []
        for name in names:
            stats = row["metrics"].get(name)
            cells.extend(("", "") if stats is None else (repr(stats["mean"]), repr(stats["std"])))
        writer.writerow([row["tap"], row["setting"], *cells])
    return buffer.getvalue()


class SweepRow(NamedTuple):
    ctype: Optional[CorruptionType]
    severity: int
    metrics: Dict[str, MetricStats]

    @property
    def label(self) -> str:
        return "clean" if self.ctype is None else self.ctype.value


@dataclass(frozen=True)
class SweepTable:
    rows: Tuple[SweepRow, ...]
    repeats: int

    def row(self, ctype: Optional[Union[CorruptionType, str]], severity: int) -> SweepRow:
        for row in self.rows:
            if row.severity == severity and (
                severity == 0 or row.ctype == CorruptionType(ctype)
            ):
                return row
        raise KeyError((ctype, severity))

    @property
    def metric_names(self) -> List[str]:
        return list(self.rows[0].metrics) if self.rows else []

    def render(self) -> str:
        """Text table with ``mean (std)`` cells in percent."""
        header = ["type", "severity", *self.metric_names]
        lines = [header]
        for row in self.rows:
            lines.append(
                [row.label, str(row.severity)]
                + [row.metrics[name].format() for name in self.metric_names]
            )
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
            for line in lines
        ) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        names = self.metric_names
        writer.writerow(["type", "severity", *(f"{n}{s}" for n in names for s in ("", "_std"))])
        for row in self.rows:
            cells = []
            for name in names:
                cells.extend((repr(row.metrics[name].mean), repr(row.metrics[name].std)))
            writer.writerow([row.label, row.severity, *cells])
        return buffer.getvalue()


SweepKey = Tuple[Optional[Union[CorruptionType, str]], int]


def _parse_cell(key: SweepKey) -> Tuple[Optional[CorruptionType], int]:
    ctype, severity = key
    if (
        isinstance(severity, bool)
        or not isinstance(severity, int)
        or not 0 <= severity <= MAX_SEVERITY
    ):
        raise UsageError(f"Invalid sweep severity {severity!r}")
    if severity == 0:
        return None, 0
    if ctype is None:
        raise UsageError(f"Sweep cell with severity {severity} needs a corruption type")
    if not isinstance(ctype, CorruptionType):
        ctype = CorruptionType.from_name(ctype)
    return ctype, severity


async def async_run_sweep(
    manifest: DatasetManifest,
    embeddings: Mapping[SweepKey, EvalEmbeddings],
    repeats: int,
    master_seed: int,
    mode: Optional[str] = None,
    *,
    dataset: Optional[str] = None,
    options: Optional[EvalOptions] = None,
) -> SweepTable:
    """Evaluate fixed-corruption cells.

    Each cell's embeddings hold corrupted matrices under the ``both`` setting;
    severity 0 evaluates the clean matrices.
    """
    options = options or EvalOptions()
    roles = resolve_roles(manifest, mode, dataset)
    cells = [(_parse_cell(key), value) for key, value in embeddings.items()]
    # clean row first, then enumeration order
    cells.sort(key=lambda item: (-1 if item[0][0] is None else item[0][0].position, item[0][1]))
    items = [
        ("clean", value, SETTING_CLEAN)
        if ctype is None
        else (sweep_label(ctype, severity), value, SETTING_BOTH)
        for (ctype, severity), value in cells
    ]
    rows = await _async_rows(roles, items, repeats, master_seed, options)
    table = SweepTable(
        tuple(
            SweepRow(ctype, severity, metrics)
            for ((ctype, severity), _), (_, metrics, _, _) in zip(cells, rows)
        ),
        repeats,
    )
    _LOGGER.info("Swept %s cells over %s repeats", len(table.rows), repeats)
    return table


def run_sweep(*args, **kwargs) -> SweepTable:
    return asyncio.run(async_run_sweep(*args, **kwargs))


def synthetic_embed(
    record,
    distortion: float,
    dim: int = SYNTH_DIM,
    seed: int = 0,
    *,
    sigma0: float = SYNTH_SIGMA0,
    sigma1: float = SYNTH_SIGMA1,
) -> np.ndarray:
    """Identity one-hot blended with seeded noise, L2-normalized.

    ``record`` is anything with ``person_id`` and ``image_id``. The noise vector
    depends on ``seed`` and the image id only.
    """
    if not 0.0 <= distortion <= 1.0:
        raise UsageError(f"distortion must lie in [0, 1], got {distortion}")
    if dim < 1:
        raise UsageError(f"dim must be >= 1, got {dim}")
    noise = make_rng(derive_seed(seed, record.image_id)).standard_normal(dim)
    vector = noise * (sigma0 + sigma1 * distortion)
    vector[record.person_id % dim] += 1.0 - distortion
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise UsageError("synthetic embedding is zero; raise sigma0 or sigma1")
    return vector / norm


@dataclass(frozen=True)
class SyntheticEmbedder:
    """Stand-in for a trained network: embeddings degrade with the pixel
    distortion between an image and its clean source."""

    dim: int = SYNTH_DIM
    seed: int = 0
    sigma0: float = SYNTH_SIGMA0
    sigma1: float = SYNTH_SIGMA1
    gain: float = SYNTH_GAIN

    @classmethod
    def from_config(cls, config: Mapping[str, Any], seed: int = 0) -> "SyntheticEmbedder":
        return cls(
            dim=config["dim"],
            seed=seed,
            sigma0=config["sigma0"],
            sigma1=config["sigma1"],
            gain=config["distortion_gain"],
        )

    def distortion(self, clean: np.ndarray, corrupted: np.ndarray) -> float:
        return min(1.0, self.gain * distortion_score(clean, corrupted))

    def embed(self, record, distortion: float = 0.0) -> np.ndarray:
        return synthetic_embed(
            record, distortion, self.dim, self.seed, sigma0=self.sigma0, sigma1=self.sigma1
        )

    def embed_images(
        self,
        records: Sequence[ManifestRecord],
        clean: Mapping[int, np.ndarray],
        corrupted: Optional[Mapping[int, np.ndarray]] = None,
    ) -> np.ndarray:
        """Embed ``records``; images missing from ``corrupted`` count as clean."""
        corrupted = corrupted or {}
        rows = []
        for record in records:
            image = corrupted.get(record.image_id)
            d = 0.0 if image is None else self.distortion(clean[record.image_id], image)
            rows.append(self.embed(record, d))
        return np.stack(rows) if rows else np.zeros((0, self.dim))


def synthesize_tree(
    manifest: DatasetManifest,
    roles: Roles,
    images_root: Union[str, Path],
    out_root: Union[str, Path],
    embedder: SyntheticEmbedder,
) -> List[Path]:
    """Embed clean images and every materialized directory below ``images_root``.

    Writes ``clean/{query,gallery}.cile`` plus ``<dir>/{query,gallery}.cile`` for
    each directory holding a plan file, mirroring the image tree.
    """
    images_root = Path(images_root)
    out_root = Path(out_root)
    records = {r.image_id: r for r in roles.query + roles.gallery}
    clean = {i: read_image(manifest.resolve(r)) for i, r in records.items()}
    written = []

    def emit(directory: Path, corrupted: Mapping[int, np.ndarray]) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        for side in (SIDE_QUERY, SIDE_GALLERY):
            side_records = roles.side(side)
            path = directory / f"{side}.cile"
            write_embeddings(
                path,
                embedder.embed_images(side_records, clean, corrupted),
                image_ids=[r.image_id for r in side_records],
            )
            written.append(path)

    emit(out_root / SETTING_CLEAN, {})
    for plan_path in sorted(images_root.rglob(PLAN_FILE)):
        directory = plan_path.parent
        if any(part.startswith(".") for part in directory.relative_to(images_root).parts):
            continue
        plan_ids = {e.image_id for e in load_plan(plan_path).entries}
        if not plan_ids:
            continue
        corrupted = {
            i: read_image(directory / f"{i}.png") for i in plan_ids if i in records
        }
        emit(out_root / directory.relative_to(images_root), corrupted)
    _LOGGER.info("Wrote %s embedding files under %s", len(written), out_root)
    return written


def load_plan(path: Union[str, Path]) -> CorruptionPlan:
    return CorruptionPlan.from_dict(read_json(path), str(path))


def load_embedding_tree(
    root: Union[str, Path],
    roles: Roles,
    settings: Sequence[str],
    repeats: int,
    *,
    cross_modality: str = XMODAL_GALLERY_ONLY,
    fixed: Optional[Tuple[CorruptionType, int]] = None,
) -> EvalEmbeddings:
    """Read the embedding files an evaluation needs from a directory tree.

    Clean matrices come from ``clean/``; corrupted ones from
    ``<setting>/<repeat>/`` (or ``sweep/<type>-<severity>/<repeat>/`` for a
    fixed cell), and only for sides the setting corrupts.
    """
    root = Path(root)
    clean_q = load_embeddings(root / SETTING_CLEAN / "query.cile", roles.query)
    clean_g = load_embeddings(
        root / SETTING_CLEAN / "gallery.cile", roles.gallery, dim=clean_q.dim
    )
    tables: Dict[str, Dict[Tuple[str, int], np.ndarray]] = {SIDE_QUERY: {}, SIDE_GALLERY: {}}
    for setting in settings:
        base = root / (setting if fixed is None else Path(SWEEP_DIR, sweep_label(*fixed)))
        for side in sorted(corrupted_sides(roles, setting, cross_modality)):
            for repeat in range(repeats):
                matrix = load_embeddings(
                    base / str(repeat) / f"{side}.cile", roles.side(side), dim=clean_q.dim
                )
                tables[side][(setting, repeat)] = matrix.vectors
    return EvalEmbeddings(
        clean_q.vectors,
        clean_g.vectors,
        tables[SIDE_QUERY],
        tables[SIDE_GALLERY],
        tap=clean_q.tap,
    )
