"""JSON-lines dataset manifests.

One record per line; paths are stored relative to the manifest's directory.
Loading validates referenced files, binary labels, pair linkage (a pair id
joins exactly one real and one fake record), and split disjointness by
pair id.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .images import ImageBuffer, load_label_png, load_png

LABELS = ("real", "fake")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    split: str
    generator: str = ""
    pair_id: str | None = None
    mask: str | None = None
    segmentation: str | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


@dataclass
class Manifest:
    base_dir: Path
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        self.base_dir = Path(self.base_dir)
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def add(self, record: ManifestRecord) -> None:
        self.records.append(record)

    def filter(self, split: str | None = None, label: str | None = None) -> list[ManifestRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if label is not None:
            out = [r for r in out if r.label == label]
        return out

    def resolve(self, rel_path: str) -> Path:
        return self.base_dir / rel_path

    def load_image(self, record: ManifestRecord, cache: bool = True) -> ImageBuffer:
        if cache:
            arr = self._cache.get(record.path)
            if arr is None:
                arr = np.clip(np.rint(load_png(self.resolve(record.path)).arr * 255), 0, 255).astype(np.uint8)
                self._cache[record.path] = arr
            return ImageBuffer(arr.astype(np.float32) / 255.0)
        return load_png(self.resolve(record.path))

    def load_mask(self, record: ManifestRecord) -> np.ndarray:
        if record.mask is None:
            raise DataError(f"record {record.path} has no mask")
        return load_label_png(self.resolve(record.mask))

    def load_segmentation(self, record: ManifestRecord) -> np.ndarray:
        if record.segmentation is None:
            raise DataError(f"record {record.path} has no segmentation map")
        return load_label_png(self.resolve(record.segmentation))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(r.to_json() + "\n")
        return path

    def validate(self) -> None:
        pairs: dict[str, list[ManifestRecord]] = {}
        pair_splits: dict[str, set[str]] = {}
        for r in self.records:
            if r.label not in LABELS:
                raise DataError(f"label must be real|fake, got {r.label!r}")
            if r.split not in SPLITS:
                raise DataError(f"split must be one of {SPLITS}, got {r.split!r}")
            for rel in (r.path, r.mask, r.segmentation):
                if rel is not None and not self.resolve(rel).exists():
                    raise DataError(f"missing file referenced by manifest: {rel}")
            if r.pair_id is not None:
                pairs.setdefault(r.pair_id, []).append(r)
                pair_splits.setdefault(r.pair_id, set()).add(r.split)
        for pid, members in pairs.items():
            labels = sorted(m.label for m in members)
            if labels != ["fake", "real"]:
                raise DataError(f"pair {pid!r} must link exactly one real and one fake record")
            if len(pair_splits[pid]) != 1:
                raise DataError(f"pair {pid!r} leaks across splits {sorted(pair_splits[pid])}")


def load_manifest(path, validate: bool = True) -> Manifest:
    path = Path(path)
    manifest = Manifest(base_dir=path.parent)
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: invalid JSON ({e})") from e
            manifest.add(ManifestRecord(
                path=d["path"], label=d["label"], split=d["split"],
                generator=d.get("generator", ""), pair_id=d.get("pair_id"),
                mask=d.get("mask"), segmentation=d.get("segmentation")))
    if validate:
        manifest.validate()
    return manifest
