"""Synthetic toy corpora with ground-truth artifact annotations.

Three modes:

* ``generated``: "real" images are procedural textures (band-limited noise
  plus sharp-edged shapes); "fake" images are the same texture model with a
  high-frequency checkerboard pattern injected under a fixed smooth
  modulation map (the canonical upsampling artifact).
* ``spliced``: fake = its paired real image with the checkerboard injected
  only inside a recorded elliptical mask, placed within one segmentation
  class so localization experiments have ground truth.
* ``codec_confound``: both classes draw from the identical texture
  distribution; each class then passes through the codec simulator at its
  own strength. Equal strengths leave nothing learnable.

Everything is deterministic in the config seed: per-image RNG streams are
derived from (seed, split, class, index), so re-running a config rewrites
byte-identical images and manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .images import ImageBuffer, codec_confound, save_label_png, save_png
from .manifest import Manifest, ManifestRecord

MODES = ("generated", "spliced", "codec_confound")

# Smallest classifier-compatible size: twice the deepest desk-scale output
# stride (jump 8 for truncation 2).
MIN_SIZE = 16


@dataclass(frozen=True)
class SynthConfig:
    mode: str = "generated"
    size: int = 64
    channels: int = 3
    train_per_class: int = 200
    val_per_class: int = 50
    test_per_class: int = 50
    # texture model
    texture_low: float = 2.0
    texture_high: float = 12.0
    texture_contrast: float = 0.16
    shapes_min: int = 1
    shapes_max: int = 4
    # artifact model
    artifact_amplitude: float = 0.1
    artifact_cell: int = 1
    artifact_mod_low: float = 1.0
    artifact_mod_high: float = 3.0
    splice_class: int = 7
    seg_radius_min: float = 0.12
    seg_radius_max: float = 0.30
    # codec confound
    real_codec_strength: float = 0.0
    fake_codec_strength: float = 0.0
    seed: int = 0
    generator_tag: str = "toy"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown synth mode {self.mode!r}")
        if self.size < MIN_SIZE:
            raise ConfigError(f"size must be >= {MIN_SIZE}")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 1:
            raise ConfigError("per-split counts must be >= 1")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        for s in (self.real_codec_strength, self.fake_codec_strength):
            if not 0.0 <= s <= 1.0:
                raise ConfigError("codec strengths must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _band_noise(rng: np.random.Generator, size: int, low: float, high: float) -> np.ndarray:
    """Zero-mean noise with energy restricted to [low, high] cycles/image."""
    spec = np.fft.fft2(rng.standard_normal((size, size)))
    fy = np.fft.fftfreq(size)[:, None] * size
    fx = np.fft.fftfreq(size)[None, :] * size
    r = np.hypot(fy, fx)
    spec *= (r >= low) & (r <= high)
    field = np.fft.ifft2(spec).real
    std = field.std()
    return field / std if std > 0 else field


def _texture(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    base = _band_noise(rng, cfg.size, cfg.texture_low, cfg.texture_high)
    gains = rng.uniform(0.6, 1.0, size=cfg.channels)
    tints = rng.uniform(-0.08, 0.08, size=cfg.channels)
    img = 0.5 + cfg.texture_contrast * base[:, :, None] * gains[None, None, :] + tints[None, None, :]

    yy, xx = np.mgrid[0:cfg.size, 0:cfg.size]
    for _ in range(int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))):
        cy, cx = rng.uniform(0.15, 0.85, 2) * cfg.size
        ry, rx = rng.uniform(0.08, 0.28, 2) * cfg.size
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        color = rng.uniform(0.15, 0.85, cfg.channels)
        img[inside] = color[None, :] + 0.3 * cfg.texture_contrast * base[inside, None]
    return np.clip(img, 0.0, 1.0)


def _checkerboard(size: int, cell: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.where(((yy // cell) + (xx // cell)) % 2 == 0, 1.0, -1.0)


def _modulation_map(cfg: SynthConfig) -> np.ndarray:
    """Dataset-level smooth map in [0, 1] fixing where artifacts concentrate."""
    rng = np.random.default_rng([cfg.seed, 0xA57])
    field = _band_noise(rng, cfg.size, cfg.artifact_mod_low, cfg.artifact_mod_high)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.full_like(field, 0.5)


def _inject_artifact(img: np.ndarray, cfg: SynthConfig, mod: np.ndarray,
                     rng: np.random.Generator, region: np.ndarray | None = None) -> np.ndarray:
    pattern = cfg.artifact_amplitude * mod * _checkerboard(cfg.size, cfg.artifact_cell)
    pattern = pattern * float(rng.uniform(0.75, 1.0))
    if region is not None:
        pattern = pattern * region
    return np.clip(img + pattern[:, :, None], 0.0, 1.0)


def _segmentation(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Class-id map (uint8) plus the ellipse interior of the splice class."""
    seg = np.zeros((cfg.size, cfg.size), dtype=np.uint8)
    yy, xx = np.mgrid[0:cfg.size, 0:cfg.size]
    class_ids = [c for c in (1, 2, 3, 5, cfg.splice_class) if c != 0]
    splice_region = None
    for cid in class_ids:
        cy, cx = rng.uniform(0.2, 0.8, 2) * cfg.size
        ry, rx = rng.uniform(cfg.seg_radius_min, cfg.seg_radius_max, 2) * cfg.size
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        seg[inside] = cid
        if cid == cfg.splice_class:
            sub = ((yy - cy) / (0.6 * ry)) ** 2 + ((xx - cx) / (0.6 * rx)) ** 2 <= 1.0
            splice_region = sub
    # drawing order can overwrite earlier blobs; keep splice class on top
    seg[splice_region] = cfg.splice_class
    return seg, splice_region


def _record_rng(cfg: SynthConfig, split: str, label: str, idx: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, hash_tag(split), hash_tag(label), idx])


def hash_tag(s: str) -> int:
    # Stable tiny string hash (builtin hash() is salted per process).
    h = 0
    for ch in s:
        h = (h * 131 + ord(ch)) % (2 ** 31)
    return h


def synth_dataset(cfg: SynthConfig, out_dir) -> Manifest:
    """Generate images plus manifest under ``out_dir``; returns the manifest.

    The manifest file itself is written as ``manifest.jsonl``; generated
    mode also writes the dataset-level artifact modulation map
    (``artifact_map.npy``) for localization oracles, and every run saves the
    per-class pipeline audit to ``audit.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(base_dir=out_dir)
    mod = _modulation_map(cfg)

    counts = {"train": cfg.train_per_class, "val": cfg.val_per_class,
              "test": cfg.test_per_class}
    for split, n in counts.items():
        for idx in range(n):
            if cfg.mode == "spliced":
                _emit_spliced(cfg, manifest, out_dir, split, idx, mod)
            elif cfg.mode == "generated":
                _emit_generated(cfg, manifest, out_dir, split, idx, mod)
            else:
                _emit_codec(cfg, manifest, out_dir, split, idx)

    if cfg.mode == "generated":
        np.save(out_dir / "artifact_map.npy", cfg.artifact_amplitude * mod)
    audit = {
        "save": {"format": "png", "bits": 8},
        "real_chain": _class_chain(cfg, "real"),
        "fake_chain": _class_chain(cfg, "fake"),
    }
    (out_dir / "audit.json").write_text(json.dumps(audit, indent=2, sort_keys=True))
    (out_dir / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    manifest.save(out_dir / "manifest.jsonl")
    manifest.validate()
    return manifest


def _class_chain(cfg: SynthConfig, label: str) -> list:
    chain = [{"op": "texture"}]
    if cfg.mode == "generated" and label == "fake":
        chain.append({"op": "artifact"})
    if cfg.mode == "spliced" and label == "fake":
        chain.append({"op": "splice_artifact"})
    if cfg.mode == "codec_confound":
        s = cfg.real_codec_strength if label == "real" else cfg.fake_codec_strength
        chain.append({"op": "codec", "strength": s})
    chain.append({"op": "save_png", "bits": 8})
    return chain


def _emit_generated(cfg, manifest, out_dir, split, idx, mod):
    for label in ("real", "fake"):
        rng = _record_rng(cfg, split, label, idx)
        img = _texture(rng, cfg)
        if label == "fake":
            img = _inject_artifact(img, cfg, mod, rng)
        rel = f"{split}/{label}_{idx:05d}.png"
        save_png(ImageBuffer(img), out_dir / rel)
        manifest.add(ManifestRecord(path=rel, label=label, split=split,
                                    generator=cfg.generator_tag))


def _emit_spliced(cfg, manifest, out_dir, split, idx, mod):
    rng = _record_rng(cfg, split, "pair", idx)
    base = _texture(rng, cfg)
    seg, region = _segmentation(rng, cfg)
    fake = _inject_artifact(base, cfg, np.maximum(mod, 0.5), rng, region=region)

    pair = f"{split}-p{idx:05d}"
    seg_rel = f"{split}/seg_{idx:05d}.png"
    save_label_png(seg, out_dir / seg_rel)

    real_rel = f"{split}/real_{idx:05d}.png"
    save_png(ImageBuffer(base), out_dir / real_rel)
    manifest.add(ManifestRecord(path=real_rel, label="real", split=split,
                                generator=cfg.generator_tag, pair_id=pair,
                                segmentation=seg_rel))

    fake_rel = f"{split}/fake_{idx:05d}.png"
    mask_rel = f"{split}/mask_{idx:05d}.png"
    save_png(ImageBuffer(fake), out_dir / fake_rel)
    save_label_png(np.where(region, 255, 0).astype(np.uint8), out_dir / mask_rel)
    manifest.add(ManifestRecord(path=fake_rel, label="fake", split=split,
                                generator=cfg.generator_tag, pair_id=pair,
                                mask=mask_rel, segmentation=seg_rel))


def _emit_codec(cfg, manifest, out_dir, split, idx):
    for label, strength in (("real", cfg.real_codec_strength),
                            ("fake", cfg.fake_codec_strength)):
        rng = _record_rng(cfg, split, label, idx)
        img = ImageBuffer(_texture(rng, cfg))
        if strength > 0:
            img = codec_confound(img, strength)
        rel = f"{split}/{label}_{idx:05d}.png"
        save_png(img, out_dir / rel)
        manifest.add(ManifestRecord(path=rel, label=label, split=split,
                                    generator=cfg.generator_tag))
