"""Class-balanced, pairing-aware batch construction.

Every batch holds exactly half real and half fake records. When the fake
records carry pair ids, each fake co-occurs with its paired real in the
same batch. One epoch visits every record of each class exactly once
(permutation without replacement), which requires equal class counts.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .images import ImageBuffer, augment, resize
from .manifest import Manifest, ManifestRecord

LABEL_INDEX = {"real": 0, "fake": 1}


def epoch_batches(records: list[ManifestRecord], batch_size: int,
                  rng: np.random.Generator) -> list[list[ManifestRecord]]:
    """Split one epoch into balanced batches (the last may be smaller)."""
    if batch_size < 2 or batch_size % 2 != 0:
        raise DataError(f"batch_size must be even and >= 2, got {batch_size}")
    reals = [r for r in records if r.label == "real"]
    fakes = [r for r in records if r.label == "fake"]
    if not reals or not fakes:
        raise DataError("both label classes must be nonempty")
    if len(reals) != len(fakes):
        raise DataError(f"balanced epochs need equal class counts, got "
                        f"{len(reals)} real vs {len(fakes)} fake")
    half = batch_size // 2

    paired_fakes = [f for f in fakes if f.pair_id is not None]
    if paired_fakes and len(paired_fakes) == len(fakes):
        by_pair = {r.pair_id: r for r in reals if r.pair_id is not None}
        if len(by_pair) != len(reals):
            raise DataError("paired manifest mixes paired and unpaired reals")
        pairs = []
        for f in fakes:
            if f.pair_id not in by_pair:
                raise DataError(f"fake record {f.path} pairs to missing real {f.pair_id!r}")
            pairs.append((by_pair[f.pair_id], f))
        order = rng.permutation(len(pairs))
        batches = []
        for i in range(0, len(pairs), half):
            chunk = [pairs[j] for j in order[i:i + half]]
            batches.append([r for r, _ in chunk] + [f for _, f in chunk])
        return batches
    if paired_fakes:
        raise DataError("manifest mixes paired and unpaired fake records")

    r_order = rng.permutation(len(reals))
    f_order = rng.permutation(len(fakes))
    batches = []
    for i in range(0, len(reals), half):
        batches.append([reals[j] for j in r_order[i:i + half]] +
                       [fakes[j] for j in f_order[i:i + half]])
    return batches


def materialize(manifest: Manifest, records: list[ManifestRecord], size: int,
                augment_mode: str = "none",
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Load records into a model input batch.

    Images are resized to the classifier's native ``size`` (skipped when
    already native), optionally augmented, then mapped from [0, 1] to
    [-1, 1]. Returns (N, C, H, W) float32 images and int label indices.
    """
    imgs = []
    labels = np.empty(len(records), dtype=np.int64)
    for i, rec in enumerate(records):
        img = manifest.load_image(rec)
        if augment_mode != "none":
            img = augment(img, augment_mode, rng, size)
        elif img.height != size or img.width != size:
            img = resize(img, size, size, "lanczos")
        imgs.append(img.arr)
        labels[i] = LABEL_INDEX[rec.label]
    x = np.stack(imgs).transpose(0, 3, 1, 2)
    return (x * 2.0 - 1.0).astype(np.float32), labels


def load_batch(manifest: Manifest, batch_size: int, rng: np.random.Generator,
               size: int, split: str | None = None,
               augment_mode: str = "none") -> tuple[np.ndarray, np.ndarray]:
    """Draw the first balanced batch of a fresh epoch (the spec-level op)."""
    records = manifest.filter(split=split)
    batch = epoch_batches(records, batch_size, rng)[0]
    return materialize(manifest, batch, size, augment_mode, rng)


def to_model_input(images: list[ImageBuffer]) -> np.ndarray:
    x = np.stack([im.arr for im in images]).transpose(0, 3, 1, 2)
    return (x * 2.0 - 1.0).astype(np.float32)
