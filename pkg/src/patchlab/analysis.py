"""Interpretation tools: heatmaps, predictive-patch clustering, and
latent-shift exaggeration.

Heatmap grids hold raw per-patch fake probabilities plus the receptive-
field geometry needed to map grid cells back to pixel boxes. Normalization
is per image, min-max into [0, 1]; a constant grid maps to all 0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbones import BackboneSpec, ReceptiveFieldInfo, receptive_field
from .batching import materialize
from .classifier import FAKE, REAL, PatchGrid, aggregate, patch_grids
from .errors import DataError, ShapeMismatch
from .images import save_png, ImageBuffer
from .layers import ComputeGraph
from .manifest import Manifest, ManifestRecord
from .optim import Adam
from .tensor import Tensor


@dataclass
class Heatmap:
    raw: np.ndarray                   # (h, w) fake probabilities
    normalized: np.ndarray            # (h, w) in [0, 1]
    norm_min: float
    norm_max: float
    geometry: ReceptiveFieldInfo
    image_size: int
    shortfall: int = 0                # averaged heatmaps: images short of k

    def pixel_box(self, i: int, j: int) -> tuple[int, int, int, int]:
        """Inclusive (top, left, bottom, right) input window of cell (i, j),
        clipped to image bounds."""
        return cell_pixel_box(self.geometry, self.image_size, i, j)


def cell_pixel_box(geo: ReceptiveFieldInfo, image_size: int, i: int, j: int) -> tuple[int, int, int, int]:
    half = (geo.rf - 1) / 2
    cy = geo.start + i * geo.jump
    cx = geo.start + j * geo.jump
    top = int(np.clip(np.ceil(cy - half), 0, image_size - 1))
    bottom = int(np.clip(np.floor(cy + half), 0, image_size - 1))
    left = int(np.clip(np.ceil(cx - half), 0, image_size - 1))
    right = int(np.clip(np.floor(cx + half), 0, image_size - 1))
    return top, left, bottom, right


def normalize_grid(grid: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        return (grid - lo) / (hi - lo), lo, hi
    return np.full_like(grid, 0.5), lo, hi


def heatmap(graph: ComputeGraph, spec: BackboneSpec, image: np.ndarray) -> Heatmap:
    """Per-patch fake-probability heatmap for one model input image
    (C, H, W), already in model input range."""
    if image.ndim != 3:
        raise ShapeMismatch(f"heatmap expects a single (C, H, W) image, got {image.shape}")
    grid = patch_grids(graph, image[None])[0]
    return heatmap_from_grid(grid, spec, image.shape[-1])


def heatmap_from_grid(grid: PatchGrid, spec: BackboneSpec, image_size: int) -> Heatmap:
    raw = grid.fake_probs.copy()
    normalized, lo, hi = normalize_grid(raw)
    geo = receptive_field(spec.layer_list())
    return Heatmap(raw=raw, normalized=normalized, norm_min=lo, norm_max=hi,
                   geometry=geo, image_size=image_size)


def average_heatmap(graph: ComputeGraph, spec: BackboneSpec, manifest: Manifest,
                    records: list[ManifestRecord] | None = None, k: int = 100,
                    class_filter: str = "fake", batch_size: int = 32) -> Heatmap:
    """Average the raw grids of the k most confidently correct images of one
    class, normalizing once at the end ("easiest" = highest correct-class
    ensemble confidence). If fewer than k qualify, all are used and the
    shortfall is recorded."""
    records = manifest.records if records is None else records
    pool = [r for r in records if r.label == class_filter]
    if not pool:
        raise DataError(f"no records of class {class_filter!r}")
    scored: list[tuple[float, np.ndarray]] = []
    for start in range(0, len(pool), batch_size):
        chunk = pool[start:start + batch_size]
        x, _ = materialize(manifest, chunk, spec.input_size)
        for rec, grid in zip(chunk, patch_grids(graph, x)):
            pred, score = aggregate(grid)
            confidence = score if class_filter == "fake" else 1.0 - score
            if pred == rec.label:
                scored.append((confidence, grid.fake_probs.copy()))
    if not scored:
        raise DataError("no correctly classified images to average")
    scored.sort(key=lambda t: -t[0])
    top = scored[:k]
    raw = np.mean([g for _, g in top], axis=0)
    normalized, lo, hi = normalize_grid(raw)
    geo = receptive_field(spec.layer_list())
    return Heatmap(raw=raw, normalized=normalized, norm_min=lo, norm_max=hi,
                   geometry=geo, image_size=spec.input_size,
                   shortfall=max(0, k - len(top)))


def top_patch(graph: ComputeGraph, spec: BackboneSpec, image: np.ndarray
              ) -> tuple[tuple[int, int], tuple[int, int, int, int], float]:
    """Cell, pixel box, and confidence of the most predictive patch: the
    cell with maximum probability of the image's predicted class. Ties
    resolve row-major first."""
    grid = patch_grids(graph, image[None])[0]
    pred, _ = aggregate(grid)
    cls = FAKE if pred == "fake" else REAL
    probs = grid.probs[cls]
    flat = int(np.argmax(probs))
    i, j = divmod(flat, probs.shape[1])
    geo = receptive_field(spec.layer_list())
    box = cell_pixel_box(geo, image.shape[-1], i, j)
    return (i, j), box, float(probs[i, j])


def assign_cluster(box: tuple[int, int, int, int], segmentation: np.ndarray) -> int:
    """Assign a pixel box to the segmentation class with the highest
    in-box pixel count normalized by that class's whole-image pixel count.
    Classes absent from the image are excluded; ties take the lowest id."""
    top, left, bottom, right = box
    if bottom < top or right < left:
        raise DataError(f"empty pixel box {box}")
    patch = segmentation[top:bottom + 1, left:right + 1]
    if patch.size == 0:
        raise DataError(f"pixel box {box} falls outside the segmentation map")
    ids, totals = np.unique(segmentation, return_counts=True)
    best_id, best_score = None, -1.0
    for cid, total in zip(ids, totals):
        score = int((patch == cid).sum()) / int(total)
        if score > best_score:
            best_id, best_score = int(cid), score
    return best_id


@dataclass
class ClusterHistogram:
    counts: dict[int, int]
    total: int
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"counts": {str(k): v for k, v in sorted(self.counts.items())},
                           "total": self.total, "provenance": self.provenance},
                          sort_keys=True)


def cluster_histogram(graph: ComputeGraph, spec: BackboneSpec, manifest: Manifest,
                      records: list[ManifestRecord] | None = None,
                      mode: str = "top", rng: np.random.Generator | None = None,
                      batch_size: int = 32) -> ClusterHistogram:
    """Tally one patch per image (most predictive, or seeded uniform random)
    into segmentation clusters."""
    if mode not in ("top", "random"):
        raise DataError(f"cluster mode must be top|random, got {mode!r}")
    if mode == "random" and rng is None:
        rng = np.random.default_rng(0)
    records = manifest.records if records is None else records
    missing = [r.path for r in records if r.segmentation is None]
    if missing:
        raise DataError(f"records lack segmentation maps, e.g. {missing[0]}")
    geo = receptive_field(spec.layer_list())
    counts: dict[int, int] = {}
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x, _ = materialize(manifest, chunk, spec.input_size)
        grids = patch_grids(graph, x)
        for rec, grid in zip(chunk, grids):
            h, w = grid.grid_shape
            if mode == "top":
                pred, _ = aggregate(grid)
                cls = FAKE if pred == "fake" else REAL
                flat = int(np.argmax(grid.probs[cls]))
                i, j = divmod(flat, w)
            else:
                i = int(rng.integers(0, h))
                j = int(rng.integers(0, w))
            seg = manifest.load_segmentation(rec)
            cid = assign_cluster(cell_pixel_box(geo, spec.input_size, i, j), seg)
            counts[cid] = counts.get(cid, 0) + 1
    return ClusterHistogram(counts=counts, total=len(records),
                            provenance={"mode": mode, "n_images": len(records)})


# -- latent-shift exaggeration -------------------------------------------------


@dataclass
class LatentShift:
    w: np.ndarray
    lam: float
    trace: list[float] = field(default_factory=list)


def sample_latents(rng: np.random.Generator, batch: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Antithetic standard-normal batch (z paired with -z), so every batch
    has exactly zero mean; cuts Monte-Carlo bias in the shift estimate."""
    half = rng.standard_normal((batch // 2, dim)).astype(dtype)
    return np.concatenate([half, -half], axis=0)


def exaggerate(generator, fake_loss, perceptual_loss, latent_dim: int,
               lam: float = 1.0, steps: int = 200, lr: float = 0.01,
               batch: int = 64, rng: np.random.Generator | None = None,
               tail_average: float = 0.25) -> LatentShift:
    """Optimize a latent shift w so shifted samples G(z - w) minimize
    E_z[fake_loss(G(z - w)) + lam * perceptual_loss(G(z), G(z - w))].

    ``generator`` maps a latent Tensor (B, d) to outputs; ``fake_loss`` maps
    outputs to a scalar Tensor; ``perceptual_loss`` takes (reference,
    shifted) outputs. The returned shift is the tail-average of the Adam
    iterates, which damps the optimizer's terminal oscillation.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    w = Tensor(np.zeros(latent_dim, dtype=np.float32), requires_grad=True)
    opt = Adam({"w": w}, lr=lr)
    trace: list[float] = []
    tail: list[np.ndarray] = []
    tail_from = steps - max(1, int(round(tail_average * steps))) if steps > 0 else 0
    for step in range(steps):
        z = Tensor(sample_latents(rng, batch, latent_dim))
        ref = generator(z)
        shifted = generator(T.sub(z, T.reshape(w, (1, latent_dim))))
        loss = fake_loss(shifted)
        if lam != 0.0:
            loss = loss + lam * perceptual_loss(ref, shifted)
        w.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if step >= tail_from:
            tail.append(w.data.copy())
    final = np.mean(tail, axis=0) if tail else w.data.copy()
    return LatentShift(w=final, lam=lam, trace=trace)


def export_heatmap_png(hm: Heatmap, path) -> Path:
    """Write the normalized heatmap as grayscale PNG plus a JSON sidecar with
    geometry and the normalization record."""
    path = Path(path)
    save_png(ImageBuffer(hm.normalized[:, :, None]), path)
    sidecar = {
        "rf": hm.geometry.rf, "jump": hm.geometry.jump, "start": hm.geometry.start,
        "image_size": hm.image_size, "norm_min": hm.norm_min, "norm_max": hm.norm_max,
        "grid_shape": list(hm.raw.shape), "shortfall": hm.shortfall,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path
