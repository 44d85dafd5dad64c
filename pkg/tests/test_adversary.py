"""Toy GAN contracts: determinism, gradient routing, freezing, reprojection."""

import numpy as np
import pytest

from patchlab.adversary import (AdversaryBundle, EvasionConfig, GanConfig,
                                _adversarial_steps, _real_batch_stream, build_discriminator,
                                build_generator, build_reprojection_manifest, frozen,
                                gan_train, load_bundle, params_digest, reproject,
                                save_bundle)
from patchlab.backbones import BackboneSpec, build_backbone
from patchlab.errors import DataError
from patchlab.images import ImageBuffer, save_png
from patchlab.manifest import Manifest, ManifestRecord

SIZE = 32


def tiny_manifest(tmp_path, n=12, split="train"):
    rng = np.random.default_rng(0)
    m = Manifest(base_dir=tmp_path)
    for i in range(n):
        arr = rng.uniform(0.2, 0.8, size=(SIZE, SIZE, 3)).astype(np.float32)
        rel = f"{split}/r{i}.png"
        save_png(ImageBuffer(arr), tmp_path / rel)
        m.add(ManifestRecord(path=rel, label="real", split=split))
    return m


def tiny_gan_cfg(steps=0, seed=0):
    return GanConfig(steps=steps, batch_size=4, seed=seed, image_size=SIZE)


def test_zero_steps_keeps_initialization(tmp_path):
    m = tiny_manifest(tmp_path)
    cfg = tiny_gan_cfg(steps=0)
    bundle = gan_train(m, None, cfg)
    fresh_g = build_generator(cfg, seed=cfg.seed)
    got = bundle.generator.parameters()
    want = fresh_g.parameters()
    assert all(np.array_equal(got[k].data, want[k].data) for k in got)


def test_generator_output_bounded(tmp_path):
    m = tiny_manifest(tmp_path)
    bundle = gan_train(m, None, tiny_gan_cfg(steps=3))
    imgs = bundle.sample_images(3, np.random.default_rng(0))
    for im in imgs:
        assert im.arr.min() >= 0.0 and im.arr.max() <= 1.0
        assert (im.height, im.width) == (SIZE, SIZE)


def test_fixed_seed_identical_traces(tmp_path):
    m = tiny_manifest(tmp_path)
    t1 = gan_train(m, None, tiny_gan_cfg(steps=5, seed=3))
    t2 = gan_train(m, None, tiny_gan_cfg(steps=5, seed=3))
    assert t1.d_trace == t2.d_trace
    assert t1.g_trace == t2.g_trace


def test_sampling_seed_deterministic(tmp_path):
    m = tiny_manifest(tmp_path)
    bundle = gan_train(m, None, tiny_gan_cfg(steps=2))
    a = bundle.sample_latents(5, np.random.default_rng(11))
    b = bundle.sample_latents(5, np.random.default_rng(11))
    assert np.array_equal(a, b)


def _spec32():
    return BackboneSpec(family="xception", truncation=1, input_size=SIZE)


def test_evasion_zero_weight_equals_gan_continuation(tmp_path):
    m = tiny_manifest(tmp_path)
    classifier = build_backbone(_spec32(), 0)

    runs = []
    for l_real_weight in (0.0, 0.0, 1.0):
        bundle = gan_train(m, None, tiny_gan_cfg(steps=2, seed=5))
        rng = np.random.default_rng(99)
        stream = _real_batch_stream(m, m.records, 4, SIZE, rng)
        with frozen(classifier):
            _adversarial_steps(bundle, stream, steps=3, lr=2e-4, rng=rng,
                               classifier=classifier, l_real_weight=l_real_weight)
        runs.append({k: v.data.copy() for k, v in bundle.generator.parameters().items()})

    # weight 0 twice: bitwise identical; weight 1 diverges
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])
    assert any(not np.array_equal(runs[0][k], runs[2][k]) for k in runs[0])


def test_evasion_with_weight_zero_matches_plain_gan_updates(tmp_path):
    """Dropping the classifier term entirely must reproduce gan_train's
    update equations bit for bit under the same seed."""
    m = tiny_manifest(tmp_path)
    classifier = build_backbone(_spec32(), 0)

    plain = gan_train(m, None, tiny_gan_cfg(steps=4, seed=8))

    bundle = AdversaryBundle(generator=build_generator(tiny_gan_cfg(seed=8), 8),
                             discriminator=build_discriminator(tiny_gan_cfg(seed=8), 9),
                             latent_dim=16, image_size=SIZE, channels=3)
    rng = np.random.default_rng(8)
    stream = _real_batch_stream(m, m.records, 4, SIZE, rng)
    with frozen(classifier):
        _adversarial_steps(bundle, stream, steps=4, lr=2e-4, rng=rng,
                           classifier=classifier, l_real_weight=0.0)

    got = bundle.generator.parameters()
    want = plain.generator.parameters()
    assert all(np.array_equal(got[k].data, want[k].data) for k in got)


def test_classifier_frozen_during_evasion(tmp_path):
    m = tiny_manifest(tmp_path)
    classifier = build_backbone(_spec32(), 1)
    digest = params_digest(classifier)
    bundle = gan_train(m, None, tiny_gan_cfg(steps=1, seed=2))
    from patchlab.adversary import evasion_finetune
    bundle = evasion_finetune(bundle, classifier, m, None,
                              EvasionConfig(steps=3, batch_size=4, seed=2))
    assert params_digest(classifier) == digest
    assert all(p.grad is None for p in classifier.parameters().values())
    assert all(p.requires_grad for p in classifier.parameters().values())


def test_reproject_fixed_point(tmp_path):
    m = tiny_manifest(tmp_path)
    bundle = gan_train(m, None, tiny_gan_cfg(steps=2, seed=4))
    z0 = bundle.sample_latents(1, np.random.default_rng(21))
    target = ImageBuffer(bundle.decode(z0).data[0].transpose(1, 2, 0))
    res = reproject(bundle, target, steps=0, restarts=1, init=z0)
    assert res.loss == pytest.approx(0.0, abs=1e-7)
    assert np.array_equal(res.z, z0)
    assert np.allclose(res.reconstruction.arr, target.arr, atol=1e-6)


def test_reproject_zero_steps_returns_init_decode(tmp_path):
    m = tiny_manifest(tmp_path)
    bundle = gan_train(m, None, tiny_gan_cfg(steps=1, seed=4))
    target = ImageBuffer(np.full((SIZE, SIZE, 3), 0.5, dtype=np.float32))
    res = reproject(bundle, target, steps=0, restarts=1, seed=77)
    z_init = np.random.default_rng(77).standard_normal((1, 16)).astype(np.float32)
    assert np.array_equal(res.z, z_init)
    recon = bundle.decode(z_init).data[0].transpose(1, 2, 0)
    assert np.allclose(res.reconstruction.arr, recon, atol=1e-7)


def test_reproject_best_trace_nonincreasing(tmp_path):
    m = tiny_manifest(tmp_path)
    bundle = gan_train(m, None, tiny_gan_cfg(steps=3, seed=6))
    target = m.load_image(m.records[0])
    res = reproject(bundle, target, steps=25, restarts=2, seed=1)
    assert all(b <= a + 1e-12 for a, b in zip(res.best_trace, res.best_trace[1:]))


def test_reproject_size_mismatch(tmp_path):
    m = tiny_manifest(tmp_path)
    bundle = gan_train(m, None, tiny_gan_cfg(steps=1))
    with pytest.raises(DataError):
        reproject(bundle, ImageBuffer(np.zeros((16, 16, 3), dtype=np.float32)), steps=1)


def test_reprojection_manifest_pairing(tmp_path):
    m = tiny_manifest(tmp_path, n=4)
    bundle = gan_train(m, None, tiny_gan_cfg(steps=2, seed=7))
    out = build_reprojection_manifest(bundle, m, m.records, tmp_path / "reproj",
                                      steps=5, seed=0)
    assert len(out) == 2 * len(m.records)
    fakes = out.filter(label="fake")
    reals = {r.pair_id for r in out.filter(label="real")}
    assert all(f.pair_id in reals for f in fakes)
    out.validate()


def test_bundle_checkpoint_roundtrip(tmp_path):
    m = tiny_manifest(tmp_path)
    cfg = tiny_gan_cfg(steps=3, seed=9)
    bundle = gan_train(m, None, cfg)
    save_bundle(tmp_path / "gan.npz", bundle, cfg)
    loaded, cfg2 = load_bundle(tmp_path / "gan.npz")
    assert cfg2.image_size == SIZE
    z = bundle.sample_latents(2, np.random.default_rng(1))
    assert np.array_equal(bundle.decode(z).data, loaded.decode(z).data)
