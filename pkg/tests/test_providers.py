import json
from dataclasses import replace

import numpy as np
import pytest

from solar.exceptions import ConfigError, FixtureError
from solar.numerics import pairwise_cosine
from solar.providers import (
    BenchmarkTriplet, Dataset, FeatureSequence, SynthConfig, concept_dictionaries, grid_blocks,
    load_benchmark, load_fixture, save_benchmark, save_fixture, synth_benchmark, synth_generate,
    text_spans,
)


def test_zero_noise_tokens_are_dictionary_vectors():
    cfg = SynthConfig(noise_sigma=0.0, seed=3)
    student, _ = concept_dictionaries(cfg)
    for s in synth_generate(cfg, 5):
        for seq in (s.image, s.text):
            d = np.abs(seq.locals @ student.T)
            # every token is exactly one dictionary row
            assert np.allclose(d.max(axis=1), 1.0, atol=1e-12)
        for seq, gt, partner in ((s.image, s.ground_truth[0], s.text), (s.text, s.ground_truth[1], s.image)):
            sims = pairwise_cosine(seq.locals, partner.cls[None])[:, 0]
            assert sims[gt == 1].min() > sims[gt == 0].max()


def test_no_shared_concepts_gives_empty_masks():
    cfg = SynthConfig(shared_concepts_per_pair=0, seed=2)
    for s in synth_generate(cfg, 3):
        assert s.ground_truth[0].sum() == 0 and s.ground_truth[1].sum() == 0


def test_generation_is_deterministic():
    cfg = SynthConfig(seed=7)
    assert synth_generate(cfg, 4) == synth_generate(cfg, 4)
    assert synth_generate(cfg, 4) != synth_generate(replace(cfg, seed=8), 4)


def test_sample_depends_only_on_index():
    cfg = SynthConfig(seed=7)
    a = synth_generate(cfg, 6)
    b = synth_generate(cfg, 2, start=4)
    assert a[4].image == b[0].image and a[5].text == b[1].text


def test_shapes_and_validation():
    cfg = SynthConfig(seed=1)
    ds = synth_generate(cfg, 2)
    s = ds[0]
    assert s.image.locals.shape == (64, 16) and s.text.locals.shape == (24, 16)
    assert s.image.grid == (8, 8)
    ds.validate()


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(dictionary_size=4)
    with pytest.raises(ConfigError):
        SynthConfig(noise_sigma=-1)
    with pytest.raises(ConfigError):
        SynthConfig(text_length=0)


def test_grid_blocks_partition(rng):
    for k in range(1, 7):
        blocks = grid_blocks(8, 8, k, rng)
        assert len(blocks) == k
        assert sorted(i for b in blocks for i in b) == list(range(64))


def test_text_spans_partition(rng):
    spans = text_spans(24, 4, rng)
    assert [i for s in spans for i in s] == list(range(24))
    assert all(spans)


def test_fixture_round_trip(tmp_path):
    ds = synth_generate(SynthConfig(seed=4, patch_grid=(3, 3), text_length=6), 3)
    save_fixture(ds, tmp_path / "fx")
    assert load_fixture(tmp_path / "fx") == ds


def test_fixture_missing_tensor_names_file(tmp_path):
    ds = synth_generate(SynthConfig(seed=4, patch_grid=(3, 3), text_length=6), 2)
    root = save_fixture(ds, tmp_path / "fx")
    victim = next((root / "tensors").glob("*.text.locals.solt"))
    victim.unlink()
    with pytest.raises(FixtureError, match=victim.name):
        load_fixture(root)


def test_fixture_missing_manifest(tmp_path):
    with pytest.raises(FixtureError, match="manifest"):
        load_fixture(tmp_path)


def test_mixed_dims_rejected():
    a = synth_generate(SynthConfig(seed=1, concept_dim=16), 1)
    b = synth_generate(SynthConfig(seed=1, concept_dim=17), 1, start=1)
    with pytest.raises(FixtureError, match="dims"):
        Dataset(list(a) + list(b))


def test_sequence_validation():
    bad = FeatureSequence(cls=np.ones(3), locals=np.ones((4, 2)), modality="language")
    with pytest.raises(FixtureError):
        bad.validate()
    grid = FeatureSequence(cls=np.ones(2), locals=np.ones((4, 2)), modality="vision", grid=(3, 3))
    with pytest.raises(FixtureError, match="grid"):
        grid.validate()


def test_duplicate_ids_rejected():
    ds = synth_generate(SynthConfig(seed=1), 1)
    with pytest.raises(FixtureError, match="duplicate"):
        Dataset([ds[0], ds[0]])


def test_benchmark_structure(tmp_path):
    cfg = SynthConfig(seed=13)
    bench = synth_benchmark(cfg, n_triplets=20, n_distractors=30, variant_fraction=0.5)
    assert len(bench.triplets) == 20
    assert len(bench.pool_ids) == 20 + 20 + 30
    ids = set(bench.samples.ids)
    for t in bench.triplets:
        assert {t.anchor, t.positive, t.negative} <= ids
        assert t.positive in bench.pool_ids and t.anchor not in bench.pool_ids
        if t.variant:
            v, a = bench.samples.get(t.variant), bench.samples.get(t.anchor)
            assert v.image == a.image
    assert any(t.variant for t in bench.triplets)
    # disjoint from training streams
    train = synth_generate(cfg, 20)
    assert not any(np.array_equal(a.image.locals, b.image.locals) for a in train for b in bench.samples)
    save_benchmark(bench.triplets, tmp_path / "b.jsonl")
    assert load_benchmark(tmp_path / "b.jsonl") == bench.triplets


def test_triplet_ids_distinct():
    with pytest.raises(ValueError):
        BenchmarkTriplet("a", "a", "b")
