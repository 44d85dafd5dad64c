"""Toy generative adversary: GAN training, classifier-evasion finetuning,
and gradient-descent reprojection of targets into the generator.

The generator decodes a 16-d standard-normal latent through upsample+conv
stages to a sigmoid-bounded image; the discriminator is a small strided
conv stack. Losses are the non-saturating cross-entropy variants built on
softplus. Evasion finetuning adds the frozen classifier's real-class NLL
to the generator objective; the classifier parameters are verified
bit-unchanged afterwards.
"""

from __future__ import annotations

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .batching import materialize
from .classifier import FAKE, REAL
from .errors import ContractViolation, DataError
from .images import ImageBuffer
from .layers import (BatchNorm2dSpec, ComputeGraph, Conv2d, Conv2dSpec, Dense,
                     GlobalMean, Layer, PointwiseConv, PointwiseConvSpec, ReLU,
                     Reshape, Sigmoid, Upsample2x)
from .manifest import Manifest, ManifestRecord
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger("patchlab")

LATENT_DIM = 16


class LeakyReLU(Layer):
    def __init__(self, alpha: float = 0.2):
        self.alpha = alpha

    def __call__(self, x, train=False):
        return T.leaky_relu(x, self.alpha)


@dataclass
class GanConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    latent_dim: int = LATENT_DIM
    seed: int = 0
    image_size: int = 64
    channels: int = 3


@dataclass
class EvasionConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 2e-4
    l_gan_weight: float = 1.0
    l_real_weight: float = 1.0
    seed: int = 0


@dataclass
class AdversaryBundle:
    generator: ComputeGraph
    discriminator: ComputeGraph
    latent_dim: int
    image_size: int
    channels: int
    g_trace: list[float] = field(default_factory=list)
    d_trace: list[float] = field(default_factory=list)

    def sample_latents(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.latent_dim)).astype(np.float32)

    def decode(self, z) -> Tensor:
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=np.float32))
        return self.generator_forward(z)

    def generator_forward(self, z: Tensor, train: bool = False) -> Tensor:
        return self.generator.forward(z, train=train)

    def sample_images(self, n: int, rng: np.random.Generator) -> list[ImageBuffer]:
        z = self.sample_latents(n, rng)
        out = self.decode(z).data  # (N, C, H, W) in [0, 1]
        return [ImageBuffer(out[i].transpose(1, 2, 0)) for i in range(n)]


def build_generator(cfg: GanConfig, seed: int) -> ComputeGraph:
    rng = np.random.default_rng(seed)
    if cfg.image_size % 16 != 0:
        raise DataError("generator image_size must be a multiple of 16")
    base = cfg.image_size // 16
    g = ComputeGraph(in_channels=cfg.latent_dim, input_kind="vector")
    g.add("project", Dense(cfg.latent_dim, 48 * base * base, rng))
    g.add("to_map", Reshape((48, base, base)))
    widths = [(48, 48), (48, 24), (24, 12), (12, 8)]
    for i, (cin, cout) in enumerate(widths):
        g.add(f"up{i}", Upsample2x())
        g.add(f"conv{i}", Conv2d(Conv2dSpec(3, 1, 1, cin, cout, bias=True), rng))
        g.add(f"relu{i}", ReLU())
    g.add("to_rgb", Conv2d(Conv2dSpec(3, 1, 1, 8, cfg.channels, bias=True), rng))
    g.add("bound", Sigmoid())
    return g


def build_discriminator(cfg: GanConfig, seed: int) -> ComputeGraph:
    rng = np.random.default_rng(seed)
    d = ComputeGraph(in_channels=cfg.channels)
    widths = [(cfg.channels, 12), (12, 24), (24, 48)]
    for i, (cin, cout) in enumerate(widths):
        d.add(f"conv{i}", Conv2d(Conv2dSpec(3, 2, 1, cin, cout, bias=True), rng))
        d.add(f"lrelu{i}", LeakyReLU())
    d.add("logit_map", PointwiseConv(PointwiseConvSpec(48, 1, bias=True), rng))
    d.add("logit", GlobalMean())
    return d


def _generator_input(z: np.ndarray) -> Tensor:
    return Tensor(np.asarray(z, dtype=np.float32))


def _bce_real(logits: Tensor) -> Tensor:
    # -log sigmoid(x), stable
    return T.softplus(-logits).mean()


def _bce_fake(logits: Tensor) -> Tensor:
    # -log(1 - sigmoid(x)), stable
    return T.softplus(logits).mean()


def to_classifier_range(x01: Tensor) -> Tensor:
    """Map [0, 1] generator output into the classifier's [-1, 1] domain."""
    return x01 * 2.0 - 1.0


def classifier_real_nll(classifier: ComputeGraph, images: Tensor) -> Tensor:
    """Mean NLL of the real class over all patches of ``images``."""
    out = classifier.forward(images, train=False)
    probs = T.softmax(out, axis=1)
    p_real = T.gather_class(probs, np.full(images.shape[0], REAL, dtype=np.int64))
    return -(T.log(T.clamp_min(p_real, T.LOG_CLAMP)).mean())


def classifier_fake_nll(classifier: ComputeGraph, images: Tensor) -> Tensor:
    out = classifier.forward(images, train=False)
    probs = T.softmax(out, axis=1)
    p_fake = T.gather_class(probs, np.full(images.shape[0], FAKE, dtype=np.int64))
    return -(T.log(T.clamp_min(p_fake, T.LOG_CLAMP)).mean())


def _real_batch_stream(manifest: Manifest, records: list[ManifestRecord],
                       batch: int, size: int, rng: np.random.Generator):
    if not records:
        raise DataError("gan_train needs a nonempty real manifest")
    order = rng.permutation(len(records))
    pos = 0
    while True:
        if pos + batch > len(order):
            order = rng.permutation(len(records))
            pos = 0
        chunk = [records[i] for i in order[pos:pos + batch]]
        pos += batch
        x, _ = materialize(manifest, chunk, size)
        yield (x + 1.0) * 0.5  # back to [0, 1] for the adversary


def _adversarial_steps(bundle: AdversaryBundle, real_stream, steps: int, lr: float,
                       rng: np.random.Generator, classifier: ComputeGraph | None = None,
                       l_gan_weight: float = 1.0, l_real_weight: float = 0.0) -> None:
    """Alternating non-saturating GAN updates (one D step, one G step per
    iteration), optionally adding the frozen classifier's real-NLL to G."""
    g, d = bundle.generator, bundle.discriminator
    g_params, d_params = g.parameters(), d.parameters()
    g_opt = Adam(g_params, lr=lr)
    d_opt = Adam(d_params, lr=lr)

    for step in range(steps):
        # D step
        real = Tensor(next(real_stream))
        z = _generator_input(bundle.sample_latents(real.shape[0], rng))
        fake = bundle.generator_forward(z, train=True).detach()
        d_loss = _bce_real(d.forward(real, train=True)) + _bce_fake(d.forward(fake, train=True))
        for p in d_params.values():
            p.zero_grad()
        d_loss.backward()
        d_opt.step()

        # G step
        z = _generator_input(bundle.sample_latents(real.shape[0], rng))
        gen = bundle.generator_forward(z, train=True)
        g_loss = _bce_real(d.forward(gen, train=True))
        if l_gan_weight != 1.0:
            g_loss = g_loss * l_gan_weight
        if classifier is not None and l_real_weight != 0.0:
            g_loss = g_loss + l_real_weight * classifier_real_nll(
                classifier, to_classifier_range(gen))
        for p in g_params.values():
            p.zero_grad()
        for p in d_params.values():
            p.zero_grad()
        g_loss.backward()
        g_opt.step()

        bundle.d_trace.append(d_loss.item())
        bundle.g_trace.append(g_loss.item())

        if step % 200 == 0:
            probe = bundle.decode(bundle.sample_latents(8, np.random.default_rng(999))).data
            if float(probe.var()) < 1e-4:
                log.warning("generator output variance < 1e-4 at step %d (mode collapse?)", step)


def gan_train(manifest: Manifest, records: list[ManifestRecord] | None,
              cfg: GanConfig) -> AdversaryBundle:
    """Train the toy GAN on real records; returns the bundle with loss traces."""
    records = manifest.filter(label="real") if records is None else records
    rng = np.random.default_rng(cfg.seed)
    bundle = AdversaryBundle(
        generator=build_generator(cfg, seed=cfg.seed),
        discriminator=build_discriminator(cfg, seed=cfg.seed + 1),
        latent_dim=cfg.latent_dim, image_size=cfg.image_size, channels=cfg.channels)
    stream = _real_batch_stream(manifest, records, cfg.batch_size, cfg.image_size, rng)
    _adversarial_steps(bundle, stream, cfg.steps, cfg.lr, rng)
    return bundle


def params_digest(graph: ComputeGraph) -> str:
    h = hashlib.sha256()
    params = graph.parameters()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


@contextmanager
def frozen(graph: ComputeGraph):
    """Temporarily stop gradient flow into a graph's parameters."""
    params = list(graph.parameters().values())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
        p.zero_grad()
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def evasion_finetune(bundle: AdversaryBundle, classifier: ComputeGraph,
                     manifest: Manifest, records: list[ManifestRecord] | None,
                     cfg: EvasionConfig) -> AdversaryBundle:
    """Continue adversarial training with the classifier's real-NLL added to
    the generator loss. The classifier is frozen: its parameters take no
    updates and are hash-verified unchanged."""
    records = manifest.filter(label="real") if records is None else records
    digest_before = params_digest(classifier)
    rng = np.random.default_rng(cfg.seed)
    stream = _real_batch_stream(manifest, records, cfg.batch_size, bundle.image_size, rng)
    with frozen(classifier):
        _adversarial_steps(bundle, stream, cfg.steps, cfg.lr, rng,
                           classifier=classifier, l_gan_weight=cfg.l_gan_weight,
                           l_real_weight=cfg.l_real_weight)

    if params_digest(classifier) != digest_before:
        raise ContractViolation("classifier parameters changed during evasion finetuning")
    if any(p.grad is not None for p in classifier.parameters().values()):
        raise ContractViolation("classifier accumulated gradients during evasion finetuning")
    return bundle


# -- reprojection ---------------------------------------------------------------


@dataclass
class ReprojectionResult:
    z: np.ndarray
    reconstruction: ImageBuffer
    loss: float
    best_trace: list[float]


def reproject(bundle: AdversaryBundle, target: ImageBuffer, steps: int = 300,
              seed: int = 0, restarts: int = 4, lr: float = 0.05,
              init: np.ndarray | None = None) -> ReprojectionResult:
    """Adam descent on mean absolute pixel error from prior-sampled inits.

    Restarts run batched through the generator with independent per-restart
    losses (their gradients never mix), and the best latent over all
    restarts wins. The best-so-far trace is non-increasing by construction.
    """
    if target.height != bundle.image_size or target.width != bundle.image_size:
        raise DataError("target size does not match generator output size")
    r = max(1, restarts)
    x = Tensor(np.broadcast_to(target.arr.transpose(2, 0, 1)[None],
                               (r, target.channels, target.height, target.width)).copy())
    rng = np.random.default_rng(seed)
    if init is not None:
        z0 = np.broadcast_to(np.asarray(init, dtype=np.float32).reshape(-1, bundle.latent_dim),
                             (r, bundle.latent_dim)).copy()
    else:
        z0 = rng.standard_normal((r, bundle.latent_dim)).astype(np.float32)
    z = Tensor(z0, requires_grad=True)
    opt = Adam({"z": z}, lr=lr)

    def per_restart_losses() -> np.ndarray:
        recon = bundle.generator_forward(Tensor(z.data), train=False)
        return np.abs(recon.data - x.data).mean(axis=(1, 2, 3))

    best_z, best_loss = None, np.inf
    trace: list[float] = []

    def track(losses: np.ndarray) -> None:
        nonlocal best_z, best_loss
        i = int(losses.argmin())
        if losses[i] < best_loss:
            best_loss = float(losses[i])
            best_z = z.data[i].copy()
        trace.append(best_loss)

    track(per_restart_losses())
    for _ in range(steps):
        recon = bundle.generator_forward(z, train=False)
        # sum of per-restart means: restart gradients stay independent
        loss = T.tabs(recon - x).mean(axis=3).mean(axis=2).mean(axis=1).sum()
        z.zero_grad()
        loss.backward()
        opt.step()
        track(per_restart_losses())
    recon = bundle.decode(best_z[None]).data[0].transpose(1, 2, 0)
    return ReprojectionResult(z=best_z[None], reconstruction=ImageBuffer(recon),
                              loss=best_loss, best_trace=trace)


def build_reprojection_manifest(bundle: AdversaryBundle, manifest: Manifest,
                                records: list[ManifestRecord] | None, out_dir,
                                steps: int = 300, seed: int = 0) -> Manifest:
    """Reproject each real record; fakes are pair-linked reconstructions.

    Per-target seeds derive from the master seed so targets are independent
    and the whole manifest is reproducible.
    """
    from .images import save_png

    records = manifest.filter(label="real") if records is None else records
    out_dir = Path(out_dir)
    out = Manifest(base_dir=out_dir)
    for idx, rec in enumerate(records):
        img = manifest.load_image(rec)
        if img.height != bundle.image_size:
            from .images import resize
            img = resize(img, bundle.image_size, bundle.image_size, "lanczos")
        res = reproject(bundle, img, steps=steps, seed=seed * 100003 + idx)
        pair = rec.pair_id or f"{rec.split}-r{idx:05d}"
        real_rel = f"{rec.split}/real_{idx:05d}.png"
        fake_rel = f"{rec.split}/reproj_{idx:05d}.png"
        save_png(img, out_dir / real_rel)
        save_png(res.reconstruction, out_dir / fake_rel)
        out.add(ManifestRecord(path=real_rel, label="real", split=rec.split,
                               generator=rec.generator, pair_id=pair))
        out.add(ManifestRecord(path=fake_rel, label="fake", split=rec.split,
                               generator="reprojection", pair_id=pair))
    out.save(out_dir / "manifest.jsonl")
    out.validate()
    return out


BUNDLE_VERSION = 1


def save_bundle(path, bundle: AdversaryBundle, cfg: GanConfig) -> Path:
    """Persist generator + discriminator in the shared npz container format."""
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": BUNDLE_VERSION,
            "gan": {"latent_dim": cfg.latent_dim, "image_size": cfg.image_size,
                    "channels": cfg.channels, "seed": cfg.seed,
                    "steps": cfg.steps, "batch_size": cfg.batch_size, "lr": cfg.lr}}
    arrays = {f"g:{k}": v for k, v in bundle.generator.state_arrays().items()}
    arrays.update({f"d:{k}": v for k, v in bundle.discriminator.state_arrays().items()})
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    return path


def load_bundle(path) -> tuple[AdversaryBundle, GanConfig]:
    import json

    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != BUNDLE_VERSION:
            raise DataError(f"unsupported bundle version {meta.get('version')}")
        cfg = GanConfig(**meta["gan"])
        bundle = AdversaryBundle(generator=build_generator(cfg, cfg.seed),
                                 discriminator=build_discriminator(cfg, cfg.seed + 1),
                                 latent_dim=cfg.latent_dim, image_size=cfg.image_size,
                                 channels=cfg.channels)
        bundle.generator.load_state_arrays(
            {k[2:]: z[k] for k in z.files if k.startswith("g:")})
        bundle.discriminator.load_state_arrays(
            {k[2:]: z[k] for k in z.files if k.startswith("d:")})
    return bundle, cfg


def exaggerate_against_classifier(bundle: AdversaryBundle, classifier: ComputeGraph,
                                  lam: float = 1.0, steps: int = 200, lr: float = 0.01,
                                  seed: int = 0, feature_node: str | None = None):
    """Spec-level exaggeration: L_fake is the classifier's fake-class NLL on
    shifted samples; the perceptual term is squared distance in the
    classifier's penultimate feature space."""
    from .analysis import exaggerate

    if feature_node is None:
        feature_node = classifier.nodes[-2].name  # activation feeding the head

    def gen(z: Tensor) -> Tensor:
        return bundle.generator_forward(z, train=False)

    def feats(x01: Tensor) -> Tensor:
        ximg = to_classifier_range(x01)
        values = {"input": ximg}
        for node in classifier.nodes:
            args = [values[ref] for ref in node.inputs]
            values[node.name] = node.layer(*args, train=False)
            if node.name == feature_node:
                return values[node.name]
        raise DataError(f"feature node {feature_node!r} not found")

    def fake_loss(x01: Tensor) -> Tensor:
        return classifier_fake_nll(classifier, to_classifier_range(x01))

    def perceptual(ref: Tensor, shifted: Tensor) -> Tensor:
        diff = feats(ref.detach()) - feats(shifted)
        return (diff * diff).mean()

    with frozen(classifier):
        return exaggerate(gen, fake_loss, perceptual, latent_dim=bundle.latent_dim,
                          lam=lam, steps=steps, lr=lr,
                          rng=np.random.default_rng(seed))
