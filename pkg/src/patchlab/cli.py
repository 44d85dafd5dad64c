"""Command-line front end.

Subcommands: synth, train, eval, heatmap, clusters, exaggerate, gan, evade,
reproject, selftest. Every run writes its resolved configuration into the
output directory so artifacts can be re-created byte-exactly from that file
and the recorded seed. Exit codes: 0 success, 1 runtime failure, 2 usage
error, 3 config/validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, PatchLabError

log = logging.getLogger("patchlab")


def _metrics_json(res, extra: dict | None = None) -> str:
    payload = {"schema": 1, "ap": round(res.ap, 4),
               "patch_acc": round(res.patch_acc, 6),
               "image_acc": round(res.image_acc, 6),
               "n_images": len(res.per_image)}
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _load_cfg(args) -> "ExperimentConfig":
    from .config import load_config

    return load_config(args.config, overrides=args.set or [],
                       seed=args.seed, out=args.out, threads=args.threads)


def _resolve_out(cfg, args_subdir: str | None = None) -> Path:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_resolved(cfg, out: Path) -> None:
    from .config import dump_config

    dump_config(cfg, out / "resolved.cfg")


def cmd_synth(args) -> int:
    from .synth import synth_dataset

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    _dump_resolved(cfg, out)
    manifest = synth_dataset(cfg.dataset, out / "dataset")
    print(f"wrote {len(manifest)} records to {out / 'dataset' / 'manifest.jsonl'}")
    return 0


def _manifest_for(args, cfg, fallback_subdir="dataset/manifest.jsonl"):
    from .manifest import load_manifest

    path = args.manifest or (cfg.out_dir() / fallback_subdir)
    return load_manifest(path)


def cmd_train(args) -> int:
    from .backbones import build_backbone
    from .classifier import TrainConfig, evaluate, save_history, save_model, train

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    _dump_resolved(cfg, out)
    manifest = _manifest_for(args, cfg)
    graph = build_backbone(cfg.model, rng_seed=cfg.training.seed)
    graph, history = train(graph, cfg.model, manifest, manifest.filter("train"),
                           manifest.filter("val"), cfg.training)
    save_model(out / "checkpoint.npz", cfg.model, graph,
               {"seed": cfg.training.seed, "epochs_run": len(history),
                "best_val_patch_acc": max((h["val_patch_acc"] for h in history), default=None)})
    save_history(out / "history.jsonl", history)
    res = evaluate(graph, manifest, manifest.filter("test"), size=cfg.model.input_size)
    _write(out / "metrics.json", _metrics_json(res, {"split": "test"}))
    print((out / "metrics.json").read_text(), end="")
    return 0


def cmd_eval(args) -> int:
    from .classifier import evaluate, load_model

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    spec, graph, _ = load_model(args.model)
    manifest = _manifest_for(args, cfg)
    records = manifest.filter(args.split) if args.split else manifest.records
    if not records:
        raise DataError(f"no records in split {args.split!r}")
    res = evaluate(graph, manifest, records, size=spec.input_size)
    _write(out / "metrics.json", _metrics_json(res, {"split": args.split or "all"}))
    print((out / "metrics.json").read_text(), end="")
    return 0


def cmd_heatmap(args) -> int:
    from .analysis import average_heatmap, export_heatmap_png, heatmap_from_grid
    from .batching import materialize
    from .classifier import load_model, patch_grids

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    spec, graph, _ = load_model(args.model)
    manifest = _manifest_for(args, cfg)
    records = manifest.filter(args.split, label=args.label) if args.split \
        else manifest.filter(label=args.label)
    if not records:
        raise DataError("no matching records for heatmaps")
    subset = records[:args.limit] if args.limit else records
    hm_dir = out / "heatmaps"
    for rec in subset:
        x, _ = materialize(manifest, [rec], spec.input_size)
        grid = patch_grids(graph, x)[0]
        hm = heatmap_from_grid(grid, spec, spec.input_size)
        export_heatmap_png(hm, hm_dir / (Path(rec.path).stem + "_heat.png"))
    avg = average_heatmap(graph, spec, manifest, records, k=cfg.analysis.k,
                          class_filter=args.label)
    export_heatmap_png(avg, hm_dir / f"average_{args.label}.png")
    print(f"wrote {len(subset) + 1} heatmaps to {hm_dir}")
    return 0


def cmd_clusters(args) -> int:
    from .analysis import cluster_histogram
    from .classifier import load_model

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    spec, graph, _ = load_model(args.model)
    manifest = _manifest_for(args, cfg)
    records = manifest.filter(args.split) if args.split else manifest.records
    hist = cluster_histogram(graph, spec, manifest, records,
                             mode=cfg.analysis.cluster_mode,
                             rng=np.random.default_rng(cfg.run.seed))
    _write(out / "clusters.json", hist.to_json() + "\n")
    _render_histogram(hist, out / "clusters.png")
    print((out / "clusters.json").read_text(), end="")
    return 0


def _render_histogram(hist, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ids = sorted(hist.counts)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar([str(i) for i in ids], [hist.counts[i] for i in ids], color="#4878d0")
    ax.set_xlabel("segmentation class id")
    ax.set_ylabel("patches")
    ax.set_title(f"most predictive patches by class ({hist.provenance.get('mode')})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_gan(args) -> int:
    from .adversary import gan_train, save_bundle

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    _dump_resolved(cfg, out)
    manifest = _manifest_for(args, cfg)
    bundle = gan_train(manifest, None, cfg.adversary_gan)
    save_bundle(out / "gan.npz", bundle, cfg.adversary_gan)
    traces = [{"step": i, "d_loss": d, "g_loss": g}
              for i, (d, g) in enumerate(zip(bundle.d_trace, bundle.g_trace))]
    _write(out / "gan_trace.jsonl",
           "".join(json.dumps(t, sort_keys=True) + "\n" for t in traces))
    print(f"trained GAN for {len(traces)} steps -> {out / 'gan.npz'}")
    return 0


def cmd_evade(args) -> int:
    from .adversary import evasion_finetune, load_bundle, save_bundle
    from .classifier import evaluate, load_model
    from .experiments import _samples_manifest

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    _dump_resolved(cfg, out)
    bundle, gan_cfg = load_bundle(args.gan)
    spec, classifier, _ = load_model(args.model)
    manifest = _manifest_for(args, cfg)

    n_eval = min(len(manifest.filter("test", label="real")), 128) or None
    per_split = {"test": n_eval} if n_eval else {}
    before = _samples_manifest(bundle, manifest, out / "samples_before", per_split,
                               cfg.run.seed, "gan") if per_split else None
    acc_before = evaluate(classifier, before, before.filter("test"),
                          size=spec.input_size).image_acc if before else None

    bundle = evasion_finetune(bundle, classifier, manifest, None, cfg.adversary_evasion)
    save_bundle(out / "gan_evaded.npz", bundle, gan_cfg)

    acc_after = None
    if per_split:
        after = _samples_manifest(bundle, manifest, out / "samples_after", per_split,
                                  cfg.run.seed + 1, "gan-evaded")
        acc_after = evaluate(classifier, after, after.filter("test"),
                             size=spec.input_size).image_acc
    payload = {"schema": 1, "acc_before": acc_before, "acc_after": acc_after,
               "steps": cfg.adversary_evasion.steps}
    _write(out / "evasion.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print((out / "evasion.json").read_text(), end="")
    return 0


def cmd_reproject(args) -> int:
    from .adversary import build_reprojection_manifest, load_bundle

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    _dump_resolved(cfg, out)
    bundle, _ = load_bundle(args.gan)
    manifest = _manifest_for(args, cfg)
    reals = manifest.filter(label="real")
    if args.limit:
        reals = reals[:args.limit]
    reproj = build_reprojection_manifest(bundle, manifest, reals,
                                         out / "reprojections", steps=args.steps,
                                         seed=cfg.run.seed)
    print(f"wrote {len(reproj)} records to {out / 'reprojections' / 'manifest.jsonl'}")
    return 0


def cmd_exaggerate(args) -> int:
    from .adversary import exaggerate_against_classifier, load_bundle
    from .classifier import load_model
    from .images import ImageBuffer, save_png
    from .tensor import Tensor

    cfg = _load_cfg(args)
    out = _resolve_out(cfg)
    _dump_resolved(cfg, out)
    bundle, _ = load_bundle(args.gan)
    spec, classifier, _ = load_model(args.model)
    shift = exaggerate_against_classifier(bundle, classifier, lam=cfg.analysis.lam,
                                          steps=cfg.analysis.exaggerate_steps,
                                          lr=cfg.analysis.exaggerate_lr,
                                          seed=cfg.run.seed)
    np.savez(out / "shift.npz", w=shift.w, lam=shift.lam, trace=np.array(shift.trace))
    rng = np.random.default_rng(cfg.run.seed)
    z = bundle.sample_latents(args.samples, rng)
    for name, zz in (("original", z), ("exaggerated", z - shift.w[None, :]),
                     ("attenuated", z + shift.w[None, :])):
        imgs = bundle.decode(zz).data
        for i in range(imgs.shape[0]):
            save_png(ImageBuffer(imgs[i].transpose(1, 2, 0)),
                     out / "exaggeration" / f"{name}_{i:02d}.png")
    print(f"final shift norm {np.linalg.norm(shift.w):.4f}; "
          f"samples in {out / 'exaggeration'}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(fast=args.fast)
    return 0 if ok else 1


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="override every seed field")
    p.add_argument("--out", default=None,
                   help="output directory (default: $PATCHLAB_OUT/run_seed<seed>)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (results are identical at any value)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a single config value; repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchlab",
                                 description="patch-wise fake-image forensics toolkit")
    ap.add_argument("--version", action="version", version=f"patchlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    specs = {
        "synth": (cmd_synth, "generate a synthetic dataset", []),
        "train": (cmd_train, "train a patch classifier", [("--manifest", {})]),
        "eval": (cmd_eval, "evaluate a checkpoint on a manifest",
                 [("--model", {"required": True}), ("--manifest", {}),
                  ("--split", {"default": "test"})]),
        "heatmap": (cmd_heatmap, "export per-image and averaged heatmaps",
                    [("--model", {"required": True}), ("--manifest", {}),
                     ("--split", {"default": "test"}), ("--label", {"default": "fake"}),
                     ("--limit", {"type": int, "default": 8})]),
        "clusters": (cmd_clusters, "cluster most-predictive patches by segmentation class",
                     [("--model", {"required": True}), ("--manifest", {}),
                      ("--split", {"default": "test"})]),
        "gan": (cmd_gan, "train the toy generator/discriminator", [("--manifest", {})]),
        "evade": (cmd_evade, "finetune the generator against a frozen classifier",
                  [("--gan", {"required": True}), ("--model", {"required": True}),
                   ("--manifest", {})]),
        "reproject": (cmd_reproject, "reproject real images into the generator",
                      [("--gan", {"required": True}), ("--manifest", {}),
                       ("--limit", {"type": int, "default": 0}),
                       ("--steps", {"type": int, "default": 300})]),
        "exaggerate": (cmd_exaggerate, "optimize and render a latent exaggeration shift",
                       [("--gan", {"required": True}), ("--model", {"required": True}),
                        ("--samples", {"type": int, "default": 4})]),
        "selftest": (cmd_selftest, "run gradient checks, rf probes, and metric oracles",
                     [("--fast", {"action": "store_true"})]),
    }
    for name, (fn, help_text, extra) in specs.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        for flag, kw in extra:
            p.add_argument(flag, **kw)
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataError) as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 3
    except PatchLabError as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
