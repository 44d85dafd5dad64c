"""Patch-wise training, ensembling, and evaluation of truncated classifiers.

The per-image loss is the mean negative log-likelihood over the output
grid: every patch of a real image should be called real and every patch of
a fake image fake. Image-level decisions average the per-patch softmax fake
probabilities and threshold at one half, ties resolving to real.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbones import BackboneSpec, build_backbone
from .batching import epoch_batches, materialize
from .errors import DataError, ShapeMismatch
from .layers import ComputeGraph
from .manifest import Manifest, ManifestRecord
from .metrics import average_precision
from .optim import Adam
from .tensor import LOG_CLAMP, Tensor

log = logging.getLogger("patchlab")

REAL, FAKE = 0, 1


@dataclass
class PatchGrid:
    """Per-patch 2-class outputs for one image: logits and softmax probs,
    both shaped (2, h, w)."""

    logits: np.ndarray
    probs: np.ndarray

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.logits.shape[1], self.logits.shape[2]

    @property
    def n_patches(self) -> int:
        h, w = self.grid_shape
        return h * w

    @property
    def fake_probs(self) -> np.ndarray:
        return self.probs[FAKE]


@dataclass
class TrainConfig:
    batch_size: int = 32           # 16 real + 16 fake
    lr: float = 0.001
    max_epochs: int = 60
    patience_multiplier: int | None = None   # None: derive from backbone spec
    patience_epochs_per_p: int = 5           # the "5*p epochs" rule; 10 selects the alternate scheme
    seed: int = 0
    augment: str = "none"

    def patience(self, spec: BackboneSpec) -> int:
        p = self.patience_multiplier if self.patience_multiplier is not None \
            else spec.patience_multiplier()
        return self.patience_epochs_per_p * p


@dataclass
class EvalResult:
    ap: float
    patch_acc: float
    image_acc: float
    per_image: list[tuple[str, str, float]] = field(default_factory=list)  # path, label, fake score


def patch_grids(graph: ComputeGraph, images: np.ndarray) -> list[PatchGrid]:
    """Run the classifier in eval mode and split the batch into grids."""
    out = graph.forward(images, train=False)
    logits = out.data
    if logits.shape[1] != 2:
        raise ShapeMismatch(f"expected 2-channel patch logits, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return [PatchGrid(logits=logits[i], probs=probs[i]) for i in range(logits.shape[0])]


def patch_loss_value(grid: PatchGrid, label: int | str) -> float:
    """Mean NLL of the true class over the grid (the per-image loss)."""
    t = {"real": REAL, "fake": FAKE}.get(label, label)
    p = np.maximum(grid.probs[t], LOG_CLAMP)
    return float(-np.log(p).mean())


def batch_patch_loss(graph: ComputeGraph, images: np.ndarray, labels: np.ndarray) -> Tensor:
    """Differentiable mean patch NLL over a batch (train mode forward)."""
    out = graph.forward(images, train=True)
    probs = T.softmax(out, axis=1)
    p_true = T.gather_class(probs, labels)
    clamped = T.clamp_min(p_true, LOG_CLAMP)
    n_clamped = int((p_true.data <= LOG_CLAMP).sum())
    if n_clamped:
        log.debug("patch_loss clamped %d saturated probabilities", n_clamped)
    return -(T.log(clamped).mean())


def aggregate(grid: PatchGrid) -> tuple[str, float]:
    """Ensemble a grid into (predicted label, fake score).

    The fake score is the plain average of per-patch fake probabilities;
    the argmax over class-averaged probabilities reduces to comparing that
    score with 1/2. Exact ties go to real.
    """
    score = float(grid.fake_probs.mean())
    return ("fake" if score > 0.5 else "real"), score


def raw_patch_accuracy(graph: ComputeGraph, manifest: Manifest,
                       records: list[ManifestRecord] | None = None,
                       size: int | None = None, batch_size: int = 32) -> float:
    """Fraction of patches (all images pooled) whose argmax matches the
    image label, without ensembling. Per-patch ties count as real."""
    records = manifest.records if records is None else records
    if not records:
        raise DataError("raw_patch_accuracy on empty record list")
    size = size if size is not None else _native_size(graph)
    correct = 0
    total = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x, labels = materialize(manifest, chunk, size)
        out = graph.forward(x, train=False).data
        pred_fake = out[:, FAKE] > out[:, REAL]
        want_fake = (labels == FAKE)[:, None, None]
        correct += int((pred_fake == want_fake).sum())
        total += pred_fake.size
    return correct / total


def evaluate(graph: ComputeGraph, manifest: Manifest,
             records: list[ManifestRecord] | None = None,
             size: int | None = None, batch_size: int = 32) -> EvalResult:
    """AP, raw patch accuracy, and ensembled image accuracy over records."""
    records = manifest.records if records is None else records
    if not records:
        raise DataError("evaluate on empty record list")
    size = size if size is not None else _native_size(graph)
    per_image = []
    patch_correct = 0
    patch_total = 0
    image_correct = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x, labels = materialize(manifest, chunk, size)
        for rec, grid, label in zip(chunk, patch_grids(graph, x), labels):
            pred, score = aggregate(grid)
            per_image.append((rec.path, rec.label, score))
            image_correct += int(pred == rec.label)
            pred_fake = grid.logits[FAKE] > grid.logits[REAL]
            patch_correct += int((pred_fake == (label == FAKE)).sum())
            patch_total += pred_fake.size
    scores = np.array([s for _, _, s in per_image])
    y = np.array([1 if lbl == "fake" else 0 for _, lbl, _ in per_image])
    return EvalResult(ap=average_precision(scores, y),
                      patch_acc=patch_correct / patch_total,
                      image_acc=image_correct / len(records),
                      per_image=per_image)


def _native_size(graph: ComputeGraph) -> int:
    size = getattr(graph, "native_size", None)
    if size is None:
        raise DataError("graph has no native_size; pass size= explicitly")
    return size


def train(graph: ComputeGraph, spec: BackboneSpec, manifest: Manifest,
          train_records: list[ManifestRecord], val_records: list[ManifestRecord],
          cfg: TrainConfig) -> tuple[ComputeGraph, list[dict]]:
    """Early-stopped Adam minimization of the patch loss.

    Validation raw patch accuracy is measured after every epoch; training
    stops when it fails to strictly improve for the patience window or when
    max_epochs is hit. The returned graph carries the parameters of the
    best-validation epoch (initialization if no epoch ran).
    """
    if not train_records or not val_records:
        raise DataError("train and val record lists must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(graph.parameters(), lr=cfg.lr)
    patience = cfg.patience(spec)
    size = spec.input_size

    best = graph.snapshot()
    best_acc = -np.inf
    stale = 0
    history: list[dict] = []

    for epoch in range(cfg.max_epochs):
        losses = []
        for batch in epoch_batches(train_records, cfg.batch_size, rng):
            x, labels = materialize(manifest, batch, size, cfg.augment, rng)
            loss = batch_patch_loss(graph, x, labels)
            graph.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_acc = raw_patch_accuracy(graph, manifest, val_records, size=size,
                                     batch_size=cfg.batch_size)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_patch_acc": val_acc})
        log.info("epoch %d: loss %.4f, val patch acc %.4f", epoch,
                 history[-1]["train_loss"], val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best = graph.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break

    graph.restore(best)
    return graph, history


# -- checkpoint and history containers ----------------------------------------

CHECKPOINT_VERSION = 1


def save_model(path, spec: BackboneSpec, graph: ComputeGraph, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "spec": spec.to_dict(),
            "metadata": metadata or {}}
    arrays = dict(graph.state_arrays())
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    return path


def load_model(path, dtype=np.float32) -> tuple[BackboneSpec, ComputeGraph, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')}")
        spec = BackboneSpec.from_dict(meta["spec"])
        graph = build_backbone(spec, rng_seed=0, dtype=dtype)
        graph.load_state_arrays({k: z[k] for k in z.files if k != "__meta__"})
    graph.native_size = spec.input_size
    return spec, graph, meta["metadata"]


def save_history(path, history: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path
