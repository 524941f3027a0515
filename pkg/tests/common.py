"""Helpers for building small on-disk corpora in tests."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from reid_robustness.datafiles import DatasetManifest, ManifestRecord, write_manifest
from reid_robustness.imaging import write_png
from reid_robustness.rng import make_rng

IMAGE_HEIGHT = 64
IMAGE_WIDTH = 32


def make_image(seed: int, height: int = IMAGE_HEIGHT, width: int = IMAGE_WIDTH) -> np.ndarray:
    """Textured RGB image with values in [0.3, 0.9] of full scale."""
    rng = make_rng(seed)
    coarse = rng.uniform(0.3, 0.9, size=(height // 8, width // 8, 3))
    base = np.kron(coarse, np.ones((8, 8, 1)))
    fine = rng.uniform(-0.05, 0.05, size=(height, width, 3))
    return np.round(np.clip(base + fine, 0.3, 0.9) * 255).astype(np.uint8)


def single_records(
    n_ids: int, query_per_id: int = 1, gallery_per_id: int = 3, cameras: int = 3
) -> List[ManifestRecord]:
    """Queries at camera 0, gallery images spread over cameras 1..cameras."""
    records = []
    image_id = 0
    for pid in range(n_ids):
        for _ in range(query_per_id):
            records.append(
                ManifestRecord(image_id, f"img/{image_id}.png", pid, 0, "rgb", "query")
            )
            image_id += 1
        for k in range(gallery_per_id):
            records.append(
                ManifestRecord(
                    image_id, f"img/{image_id}.png", pid, 1 + k % cameras, "rgb", "gallery"
                )
            )
            image_id += 1
    return records


def regdb_records(n_ids: int, per_modality: int = 2) -> List[ManifestRecord]:
    records = []
    image_id = 0
    for pid in range(n_ids):
        for modality, camera in (("rgb", 0), ("ir", 1)):
            for _ in range(per_modality):
                split = "query" if modality == "rgb" else "gallery"
                records.append(
                    ManifestRecord(image_id, f"img/{image_id}.png", pid, camera, modality, split)
                )
                image_id += 1
    return records


def sysu_records(n_ids: int) -> List[ManifestRecord]:
    """Per identity: two IR queries (cameras 3 and 6), one RGB image per RGB camera."""
    records = []
    image_id = 0
    for pid in range(n_ids):
        for camera in (3, 6):
            records.append(
                ManifestRecord(image_id, f"img/{image_id}.png", pid, camera, "ir", "query")
            )
            image_id += 1
        for camera in (1, 2, 4, 5):
            for _ in range(2):
                records.append(
                    ManifestRecord(
                        image_id, f"img/{image_id}.png", pid, camera, "rgb", "gallery"
                    )
                )
                image_id += 1
    return records


def write_corpus(
    root: Path,
    records: Iterable[ManifestRecord],
    dataset: str = "custom",
    *,
    broken: Optional[Iterable[int]] = None,
) -> Path:
    """Write one image per record plus ``manifest.jsonl``; return the manifest path.

    Images listed in ``broken`` get bytes that do not decode.
    """
    records = tuple(records)
    broken = set(broken or ())
    (root / "img").mkdir(parents=True, exist_ok=True)
    for record in records:
        path = root / record.path
        if record.image_id in broken:
            path.write_bytes(b"not an image")
        else:
            write_png(make_image(record.image_id), path)
    manifest_path = root / "manifest.jsonl"
    write_manifest(manifest_path, DatasetManifest(dataset, records))
    return manifest_path
