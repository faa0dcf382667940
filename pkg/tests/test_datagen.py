from dataclasses import replace

import numpy as np
import pytest

from avalign.core import datasets_equal
from avalign.datagen import (
    TANH,
    Collocation,
    ExtractorFamily,
    GenConfig,
    apply_extractor_family,
    divergence_angle,
    family_divergence,
    generate_dataset,
    load_families,
    make_family,
    save_families,
)

GEN = GenConfig(videos=20, T=10, C=5, L=4, D_audio=8, D_visual=8, seed=1)


def families(gen=GEN, seed=1):
    return make_family("a", gen.D_audio, gen.L, seed), make_family("v", gen.D_visual, gen.L, seed + 1)


def hand_family(name, transform, fingerprint):
    W = np.asarray(transform, float)
    return ExtractorFamily(name, W, np.zeros(W.shape[0]), "identity", np.asarray(fingerprint, float), 1.0)


def unit_cos(a, b):
    return np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


class TestGenerate:
    def test_contract(self):
        ds = generate_dataset(GEN, *families())
        assert len(ds) == 20
        assert all(len(s.seg_labels_audio) == 10 and len(s.seg_labels_visual) == 10 for s in ds.samples)
        assert all(s.audio.embeddings.shape == (10, 8) for s in ds.samples)

    def test_deterministic(self):
        assert datasets_equal(generate_dataset(GEN, *families()), generate_dataset(GEN, *families()))

    def test_seed_changes_data(self):
        a = generate_dataset(GEN, *families())
        b = generate_dataset(replace(GEN, seed=2), *families())
        assert not datasets_equal(a, b)

    def test_video_labels_are_union(self):
        for s in generate_dataset(GEN, *families()).samples:
            assert s.video_labels == frozenset().union(*s.seg_labels_audio, *s.seg_labels_visual)

    def test_audio_visual_events_in_both_tracks(self):
        gen = replace(GEN, av_fraction=1.0, density_audio=0.4, density_visual=0.4)
        for s in generate_dataset(gen, *families(gen)).samples:
            assert s.seg_labels_audio == s.seg_labels_visual

    def test_identical_families_noise_free_cosine_one(self):
        gen = replace(GEN, av_fraction=1.0, density_audio=0.4, density_visual=0.4, noise=0.0)
        fam = make_family("same", gen.D_audio, gen.L, 5)
        ds = generate_dataset(gen, fam, fam)
        labeled = 0
        for s in ds.samples:
            cos = unit_cos(s.audio.embeddings, s.visual.embeddings)
            mask = np.array([bool(x) for x in s.seg_labels_audio])
            labeled += mask.sum()
            # stored embeddings keep 9 significant digits
            assert np.allclose(cos[mask], 1.0, rtol=0, atol=1e-8)
        assert labeled > 0

    def test_density_within_ten_percent(self):
        gen = replace(GEN, videos=300, density_audio=0.5, density_visual=0.3)
        ds = generate_dataset(gen, *families(gen))
        for attr, target in (("seg_labels_audio", 0.5), ("seg_labels_visual", 0.3)):
            active = [bool(x) for s in ds.samples for x in getattr(s, attr)]
            assert len(active) >= 1000
            assert abs(np.mean(active) - target) <= 0.1 * target, attr

    def test_background_conflict(self):
        with pytest.raises(ValueError):
            GenConfig(density_audio=0.9, background_fraction=0.2)

    @pytest.mark.parametrize("kwargs", [dict(videos=0), dict(av_fraction=1.5), dict(noise=-1.0)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            GenConfig(**kwargs)

    def test_family_dims_checked(self):
        with pytest.raises(ValueError):
            generate_dataset(GEN, make_family("a", 9, 4, 0), make_family("v", 8, 4, 0))

    def test_cross_similarity_falls_with_divergence(self):
        divergences = (0.0, 0.25, 0.5, 0.75, 1.0)
        means = np.zeros(len(divergences))
        for seed in range(20):
            gen = replace(GEN, seed=seed, av_fraction=1.0, density_audio=0.4, density_visual=0.4)
            base = make_family("base", 8, 4, 100 + seed)
            for k, d in enumerate(divergences):
                other = make_family("other", 8, 4, 100 + seed, angle=divergence_angle(d))
                assert family_divergence(base, other) == pytest.approx(d, abs=1e-12)
                ds = generate_dataset(gen, base, other)
                sims = [unit_cos(s.audio.embeddings, s.visual.embeddings)[t]
                        for s in ds.samples for t in range(gen.T) if s.seg_labels_audio[t]]
                means[k] += np.mean(sims) / 20
        assert np.all(np.diff(means) < 0), means


class TestExtractor:
    def test_zero_latent(self):
        f = make_family("f", 6, 3, 0, rho=0.7)
        out = apply_extractor_family(np.zeros((2, 3)), f)
        assert np.allclose(out, f.bias + 0.7 * f.fingerprint, rtol=0, atol=1e-15)

    def test_pure_orthogonal_map_preserves_norms(self):
        f = make_family("f", 6, 3, 0, rho=0.0, bias_scale=0.0)
        x = np.random.default_rng(0).standard_normal((5, 3))
        assert np.allclose(np.linalg.norm(apply_extractor_family(x, f), axis=1), np.linalg.norm(x, axis=1), rtol=1e-14)

    def test_tanh(self):
        f = make_family("f", 6, 3, 0, nonlinearity=TANH)
        x = np.random.default_rng(0).standard_normal((5, 3))
        assert np.allclose(apply_extractor_family(x, f), np.tanh(x @ f.transform.T + f.bias) + f.rho * f.fingerprint, rtol=0, atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply_extractor_family(np.zeros((2, 4)), make_family("f", 6, 3, 0))

    def test_transform_is_orthonormal(self):
        f = make_family("f", 10, 4, 3, angle=0.7)
        assert np.allclose(f.transform.T @ f.transform, np.eye(4), atol=1e-12)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            hand_family("bad", [[2.0], [0.0]], [1.0, 0.0])

    def test_collocation_needs_shared_latent(self):
        with pytest.raises(ValueError):
            Collocation(make_family("a", 8, 4, 0), make_family("v", 8, 3, 0))


class TestDivergence:
    def test_self(self):
        f = make_family("f", 8, 4, 0)
        assert family_divergence(f, f) == 0.0

    def test_orthogonal(self):
        e = np.eye(4)
        a = hand_family("a", e[:, [0]], e[:, 2])
        b = hand_family("b", e[:, [1]], e[:, 3])
        assert family_divergence(a, b) == 1.0

    def test_sixty_degree_rotation(self):
        c, s = np.cos(np.pi / 3), np.sin(np.pi / 3)
        a = hand_family("a", np.eye(2), [1.0, 0.0])
        b = hand_family("b", [[c, -s], [s, c]], [1.0, 0.0])
        assert family_divergence(a, b) == pytest.approx(0.25, abs=1e-15)

    def test_angle_round_trip(self):
        for d in (0.0, 0.1, 0.4, 1.0):
            assert 1 - np.cos(divergence_angle(d)) == pytest.approx(d, abs=1e-15)
        with pytest.raises(ValueError):
            divergence_angle(1.5)

    def test_families_file_round_trip(self, tmp_path):
        fams = [make_family("a", 8, 4, 0, angle=0.3), make_family("b", 8, 4, 1, nonlinearity=TANH)]
        save_families(tmp_path / "f.json", fams)
        back = load_families(tmp_path / "f.json")
        assert [f.name for f in back] == ["a", "b"] and back[1].nonlinearity == TANH
        for f, g in zip(fams, back):
            assert np.allclose(f.transform, g.transform, rtol=1e-8, atol=0)
            assert family_divergence(f, g) == pytest.approx(0.0, abs=1e-8)
