"""End-to-end desk-scale experiment procedures.

Each function composes synthesis, training, and evaluation into one
reproducible experiment keyed on a single seed. The acceptance suite and
the scripts under scripts/ both call these, so the numbers they report
come from identical code paths.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adversary import (AdversaryBundle, EvasionConfig, GanConfig, build_reprojection_manifest,
                        evasion_finetune, gan_train, params_digest)
from .analysis import average_heatmap, cell_pixel_box, cluster_histogram, heatmap_from_grid, top_patch
from .backbones import BackboneSpec, build_backbone, receptive_field
from .batching import materialize, to_model_input
from .classifier import TrainConfig, evaluate, patch_grids, train
from .images import ImageBuffer, save_png
from .manifest import Manifest, ManifestRecord
from .synth import SynthConfig, synth_dataset

log = logging.getLogger("patchlab")


def _train_classifier(manifest: Manifest, spec: BackboneSpec, seed: int,
                      max_epochs: int, lr: float = 0.001, batch_size: int = 32,
                      augment: str = "none"):
    graph = build_backbone(spec, rng_seed=seed)
    cfg = TrainConfig(batch_size=batch_size, lr=lr, max_epochs=max_epochs,
                      seed=seed, augment=augment)
    graph, history = train(graph, spec, manifest, manifest.filter("train"),
                           manifest.filter("val"), cfg)
    return graph, history


def codec_confound_experiment(work_dir, seed: int = 0, n_train: int = 2000,
                              n_val: int = 200, n_test: int = 300, size: int = 64,
                              truncation: int = 2, max_epochs: int = 1,
                              matched_strength: float = 0.35,
                              mismatched_strength: float = 0.6) -> dict:
    """Matched vs mismatched codec pipelines on identical content.

    Returns test AP for both settings; matched corpora give the classifier
    nothing real to learn while the mismatched codec is a formatting
    confound it learns almost immediately.
    """
    work_dir = Path(work_dir)
    spec = BackboneSpec(family="xception", truncation=truncation, input_size=size)
    out = {}
    for name, real_s, fake_s in (("matched", matched_strength, matched_strength),
                                 ("mismatched", 0.0, mismatched_strength)):
        cfg = SynthConfig(mode="codec_confound", size=size, seed=seed,
                          train_per_class=n_train, val_per_class=n_val,
                          test_per_class=n_test, real_codec_strength=real_s,
                          fake_codec_strength=fake_s,
                          generator_tag=f"codec-{name}")
        manifest = synth_dataset(cfg, work_dir / f"{name}_{seed}")
        graph, _ = _train_classifier(manifest, spec, seed, max_epochs)
        res = evaluate(graph, manifest, manifest.filter("test"), size=size)
        out[f"{name}_ap"] = res.ap
        log.info("codec %s seed %d: AP %.4f", name, seed, res.ap)
    return out


def localization_experiment(work_dir, seed: int = 0, n_train: int = 300,
                            n_val: int = 60, n_test: int = 80, size: int = 64,
                            truncation: int = 1, max_epochs: int = 4) -> dict:
    """Train on the spliced corpus and measure artifact localization.

    Reports mean raw heat inside/outside the ground-truth mask over test
    fakes, the rate at which the most predictive patch lands inside the
    mask, and cluster histograms for the top and random patch rules.
    """
    work_dir = Path(work_dir)
    spec = BackboneSpec(family="xception", truncation=truncation, input_size=size)
    cfg = SynthConfig(mode="spliced", size=size, seed=seed, train_per_class=n_train,
                      val_per_class=n_val, test_per_class=n_test,
                      generator_tag="spliced-toy")
    manifest = synth_dataset(cfg, work_dir / f"spliced_{seed}")
    graph, _ = _train_classifier(manifest, spec, seed, max_epochs)

    test_fakes = manifest.filter("test", label="fake")
    geo = receptive_field(spec.layer_list())
    inside_vals, outside_vals = [], []
    hits = 0
    for start in range(0, len(test_fakes), 32):
        chunk = test_fakes[start:start + 32]
        x, _ = materialize(manifest, chunk, size)
        grids = patch_grids(graph, x)
        for rec, grid, img in zip(chunk, grids, x):
            mask = manifest.load_mask(rec) > 0
            hm = heatmap_from_grid(grid, spec, size)
            h, w = hm.raw.shape
            cell_inside = np.zeros((h, w), dtype=bool)
            for i in range(h):
                for j in range(w):
                    cy = int(round(geo.start + i * geo.jump))
                    cx = int(round(geo.start + j * geo.jump))
                    cy = min(max(cy, 0), size - 1)
                    cx = min(max(cx, 0), size - 1)
                    cell_inside[i, j] = mask[cy, cx]
            if cell_inside.any() and (~cell_inside).any():
                inside_vals.append(hm.raw[cell_inside].mean())
                outside_vals.append(hm.raw[~cell_inside].mean())
            (ti, tj), _, _ = top_patch(graph, spec, img)
            ty = min(max(int(round(geo.start + ti * geo.jump)), 0), size - 1)
            tx = min(max(int(round(geo.start + tj * geo.jump)), 0), size - 1)
            if mask[ty, tx]:
                hits += 1

    top_hist = cluster_histogram(graph, spec, manifest, test_fakes, mode="top")
    rnd_hist = cluster_histogram(graph, spec, manifest, test_fakes, mode="random",
                                 rng=np.random.default_rng(seed))
    # area prior of each class over the test fakes
    area: dict[int, float] = {}
    for rec in test_fakes:
        seg = manifest.load_segmentation(rec)
        ids, counts = np.unique(seg, return_counts=True)
        for cid, cnt in zip(ids, counts):
            area[int(cid)] = area.get(int(cid), 0.0) + cnt / seg.size
    total_area = sum(area.values())
    priors = {cid: a / total_area for cid, a in area.items()}

    splice_class = cfg.splice_class
    return {
        "heat_inside": float(np.mean(inside_vals)),
        "heat_outside": float(np.mean(outside_vals)),
        "heat_margin": float(np.mean(inside_vals) - np.mean(outside_vals)),
        "top_patch_in_mask_rate": hits / len(test_fakes),
        "top_cluster_splice_frac": top_hist.counts.get(splice_class, 0) / top_hist.total,
        "random_cluster_priors": priors,
        "random_cluster_counts": rnd_hist.counts,
        "n_test_fakes": len(test_fakes),
    }


def generalization_experiment(work_dir, seed: int = 0, n_train: int = 400,
                              n_val: int = 80, n_test: int = 150, size: int = 64,
                              max_epochs: int = 2) -> dict:
    """Train on toy generator A, test on toy generator B.

    A and B share the checkerboard artifact carrier but differ in seed,
    texture band, artifact modulation frequency, and amplitude. Returns
    within- and cross-generator AP for the truncation-2 and truncation-5
    classifiers.
    """
    work_dir = Path(work_dir)
    cfg_a = SynthConfig(mode="generated", size=size, seed=seed * 2 + 1,
                        train_per_class=n_train, val_per_class=n_val,
                        test_per_class=n_test, generator_tag="gen-A")
    cfg_b = SynthConfig(mode="generated", size=size, seed=seed * 2 + 2,
                        train_per_class=1, val_per_class=1, test_per_class=n_test,
                        texture_low=3.0, texture_high=14.0,
                        artifact_mod_low=2.0, artifact_mod_high=5.0,
                        artifact_amplitude=0.08, generator_tag="gen-B")
    man_a = synth_dataset(cfg_a, work_dir / f"genA_{seed}")
    man_b = synth_dataset(cfg_b, work_dir / f"genB_{seed}")

    out = {}
    for trunc in (2, 5):
        spec = BackboneSpec(family="xception", truncation=trunc, input_size=size)
        graph, _ = _train_classifier(man_a, spec, seed, max_epochs)
        within = evaluate(graph, man_a, man_a.filter("test"), size=size).ap
        cross = evaluate(graph, man_b, man_b.filter("test"), size=size).ap
        out[f"trunc{trunc}_within_ap"] = within
        out[f"trunc{trunc}_cross_ap"] = cross
        log.info("generalization seed %d trunc %d: within %.4f cross %.4f",
                 seed, trunc, within, cross)
    return out


def _samples_manifest(bundle: AdversaryBundle, manifest: Manifest, out_dir,
                      per_split: dict[str, int], seed: int, tag: str) -> Manifest:
    """Real records from ``manifest`` paired with fresh generator samples."""
    out_dir = Path(out_dir)
    out = Manifest(base_dir=out_dir)
    rng = np.random.default_rng(seed)
    for split, n in per_split.items():
        reals = manifest.filter(split, label="real")[:n]
        if len(reals) < n:
            raise ValueError(f"not enough real records in split {split}")
        samples = bundle.sample_images(n, rng)
        for i, (rec, img) in enumerate(zip(reals, samples)):
            real_rel = f"{split}/real_{i:05d}.png"
            fake_rel = f"{split}/{tag}_{i:05d}.png"
            save_png(manifest.load_image(rec), out_dir / real_rel)
            save_png(img, out_dir / fake_rel)
            out.add(ManifestRecord(path=real_rel, label="real", split=split,
                                   generator=rec.generator))
            out.add(ManifestRecord(path=fake_rel, label="fake", split=split,
                                   generator=tag))
    out.save(out_dir / "manifest.jsonl")
    out.validate()
    return out


def discriminator_accuracy(bundle: AdversaryBundle, manifest: Manifest,
                           records: list[ManifestRecord], seed: int = 0) -> float:
    """Held-out accuracy of the bundle's discriminator on real vs fresh
    generator samples (balanced)."""
    rng = np.random.default_rng(seed)
    x_real, _ = materialize(manifest, records, bundle.image_size)
    real01 = (x_real + 1.0) * 0.5
    fakes = bundle.decode(bundle.sample_latents(len(records), rng)).data
    logits_real = bundle.discriminator.forward(real01.astype(np.float32)).data[:, 0]
    logits_fake = bundle.discriminator.forward(fakes.astype(np.float32)).data[:, 0]
    correct = int((logits_real > 0).sum()) + int((logits_fake <= 0).sum())
    return correct / (2 * len(records))


def evasion_experiment(work_dir, seed: int = 0, n_real: int = 500, size: int = 64,
                       gan_steps: int = 1200, evasion_steps: int = 500,
                       classifier_truncation: int = 1, classifier_epochs: int = 4,
                       n_cls_train: int = 400, n_cls_val: int = 80,
                       n_cls_test: int = 150) -> dict:
    """Full evasion cycle: GAN, detector, finetune against it, retrain.

    Returns ensembled detector accuracies before and after generator
    finetuning, the retrained detector's accuracy, and the GAN
    discriminator's held-out equilibrium accuracy.
    """
    work_dir = Path(work_dir)
    need = max(n_real, n_cls_train + 10)
    texture_cfg = SynthConfig(mode="generated", size=size, seed=seed,
                              train_per_class=need, val_per_class=n_cls_val,
                              test_per_class=n_cls_test, generator_tag="texture")
    textures = synth_dataset(texture_cfg, work_dir / f"textures_{seed}")

    gan_cfg = GanConfig(steps=gan_steps, seed=seed, image_size=size)
    bundle = gan_train(textures, textures.filter("train", label="real")[:n_real], gan_cfg)
    d_acc = discriminator_accuracy(bundle, textures,
                                   textures.filter("test", label="real"), seed)

    per_split = {"train": n_cls_train, "val": n_cls_val, "test": n_cls_test}
    before = _samples_manifest(bundle, textures, work_dir / f"samples_{seed}",
                               per_split, seed * 7 + 1, "gan")
    spec = BackboneSpec(family="xception", truncation=classifier_truncation, input_size=size)
    detector, _ = _train_classifier(before, spec, seed, classifier_epochs)
    acc_before = evaluate(detector, before, before.filter("test"), size=size).image_acc

    digest = params_digest(detector)
    evasion_cfg = EvasionConfig(steps=evasion_steps, seed=seed)
    bundle = evasion_finetune(bundle, detector, textures,
                              textures.filter("train", label="real")[:n_real], evasion_cfg)
    assert params_digest(detector) == digest

    after = _samples_manifest(bundle, textures, work_dir / f"evaded_{seed}",
                              per_split, seed * 7 + 2, "gan-evaded")
    acc_after = evaluate(detector, after, after.filter("test"), size=size).image_acc

    retrained, _ = _train_classifier(after, spec, seed + 1, classifier_epochs)
    acc_retrained = evaluate(retrained, after, after.filter("test"), size=size).image_acc

    return {"detector_acc_before": acc_before, "detector_acc_after": acc_after,
            "detector_acc_retrained": acc_retrained, "d_equilibrium_acc": d_acc,
            "g_trace_tail": bundle.g_trace[-5:]}


def reprojection_shift_experiment(work_dir, seed: int = 0, size: int = 64,
                                  gan_steps: int = 600, n_pairs: int = 24,
                                  reproject_steps: int = 150,
                                  classifier_epochs: int = 3) -> dict:
    """Compare top-patch cluster histograms of classifiers trained with
    samples-only vs reprojections-included fake sets (total-variation
    distance of the two histograms on a segmented test corpus)."""
    work_dir = Path(work_dir)
    spliced_cfg = SynthConfig(mode="spliced", size=size, seed=seed,
                              train_per_class=max(n_pairs, 60), val_per_class=20,
                              test_per_class=40, generator_tag="spliced-toy")
    corpus = synth_dataset(spliced_cfg, work_dir / f"corpus_{seed}")

    gan_cfg = GanConfig(steps=gan_steps, seed=seed, image_size=size)
    bundle = gan_train(corpus, corpus.filter("train", label="real"), gan_cfg)

    train_reals = corpus.filter("train", label="real")[:n_pairs]
    val_reals = corpus.filter("val", label="real")[:max(8, n_pairs // 3)]

    # samples-only fake set
    per_split = {"train": n_pairs, "val": len(val_reals)}
    samples_man = _samples_manifest(bundle, corpus, work_dir / f"samples_{seed}",
                                    per_split, seed + 11, "gan")

    # reprojection fake set (pair-linked hard negatives)
    reproj_train = build_reprojection_manifest(bundle, corpus, train_reals,
                                               work_dir / f"reproj_{seed}",
                                               steps=reproject_steps, seed=seed)
    reproj_val = build_reprojection_manifest(bundle, corpus, val_reals,
                                             work_dir / f"reproj_val_{seed}",
                                             steps=reproject_steps, seed=seed + 1)
    merged = Manifest(base_dir=work_dir)
    for man, split in ((reproj_train, "train"), (reproj_val, "val")):
        for rec in man.records:
            rel = str((man.base_dir / rec.path).relative_to(work_dir))
            merged.add(ManifestRecord(path=rel, label=rec.label, split=split,
                                      generator=rec.generator, pair_id=rec.pair_id))
    merged.validate()

    spec = BackboneSpec(family="xception", truncation=1, input_size=size)
    cls_samples, _ = _train_classifier(samples_man, spec, seed, classifier_epochs,
                                       batch_size=8)
    cls_reproj, _ = _train_classifier(merged, spec, seed, classifier_epochs,
                                      batch_size=8)

    seg_test = corpus.filter("test", label="fake")
    hist_a = cluster_histogram(cls_samples, spec, corpus, seg_test, mode="top")
    hist_b = cluster_histogram(cls_reproj, spec, corpus, seg_test, mode="top")
    ids = sorted(set(hist_a.counts) | set(hist_b.counts))
    pa = np.array([hist_a.counts.get(i, 0) for i in ids], dtype=float)
    pb = np.array([hist_b.counts.get(i, 0) for i in ids], dtype=float)
    tv = 0.5 * np.abs(pa / pa.sum() - pb / pb.sum()).sum()
    return {"tv_distance": float(tv), "hist_samples": hist_a.counts,
            "hist_reproj": hist_b.counts}
