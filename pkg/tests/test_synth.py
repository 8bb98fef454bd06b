import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birdsed import audio_io, ingest, synth
from birdsed.audio_io import AudioClip
from birdsed.errors import (ConfigError, DataError, EmptySpeciesPool, PlanOutOfRange,
                            ZeroLengthBackground)
from birdsed.ingest import DEFAULT_SPECIES, PoolEntry, PoolManifest
from birdsed.synth import GainMode, LabelTrack, SynthesisConfig

RATE = 8000


def fixture_pool(per_species=(2, 3, 1, 4, 2, 2), rate=RATE, seed=0):
    """In-memory pool manifest plus the matching snippet clips, keyed by pool index."""
    rng = np.random.default_rng(seed)
    entries = []
    for sid, k in enumerate(per_species):
        for j in range(k):
            n = int(rng.integers(rate // 4, rate))
            entries.append(PoolEntry(sid, f"s{sid}_{j}", duration_s=n / rate, local_path=f"{sid}/{j}.wav",
                                     n_samples=n, sample_rate=rate, peak=0.0))
    entries = PoolManifest(DEFAULT_SPECIES, entries).entries
    clips, out = {}, []
    for i, e in enumerate(entries):
        x = rng.uniform(-0.5, 0.5, e.n_samples).astype(np.float32)
        peak = float(np.abs(x.astype(np.float64)).max())
        out.append(PoolEntry(e.species_id, e.source_ref, duration_s=e.duration_s, local_path=e.local_path,
                             n_samples=e.n_samples, sample_rate=rate, peak=peak))
        clips[i] = AudioClip(x, rate)
    return PoolManifest(DEFAULT_SPECIES, out), clips


def test_density_50_counts():
    pool, _ = fixture_pool()
    for seed in range(10):
        plan = synth.plan_embeddings(pool, 60 * RATE, SynthesisConfig(50, DEFAULT_SPECIES, seed), RATE)
        assert len(plan.placements) == 50
        assert sorted(plan.species_counts(6)) == [8, 8, 8, 8, 9, 9]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2 ** 64 - 1))
def test_counts_differ_by_at_most_one(density, seed):
    pool, _ = fixture_pool()
    plan = synth.plan_embeddings(pool, 10 * RATE, SynthesisConfig(density, DEFAULT_SPECIES, seed), RATE)
    counts = plan.species_counts(6)
    assert sum(counts) == density
    assert max(counts) - min(counts) <= 1
    for p in plan.placements:
        assert 0 <= p.start_sample and p.start_sample + p.trimmed_len_samples <= 10 * RATE
        assert pool.entries[p.pool_index].species_id == p.species_id


def test_density_equal_to_species_count():
    pool, _ = fixture_pool()
    plan = synth.plan_embeddings(pool, 5 * RATE, SynthesisConfig(6, DEFAULT_SPECIES, 3), RATE)
    assert plan.species_counts(6) == [1] * 6


def test_max_mode_places_every_entry_once():
    pool, _ = fixture_pool()
    plan = synth.plan_embeddings(pool, 5 * RATE, SynthesisConfig("max", DEFAULT_SPECIES, 3), RATE)
    assert sorted(p.pool_index for p in plan.placements) == list(range(len(pool.entries)))
    assert plan.species_counts(6) == [2, 3, 1, 4, 2, 2]


def test_max_mode_total_for_reference_pool_sizes():
    entries = [PoolEntry(sid, f"{sid}_{j}", n_samples=RATE, sample_rate=RATE, peak=0.5)
               for sid, n in enumerate(ingest.REFERENCE_POOL_COUNTS) for j in range(n)]
    pool = PoolManifest(DEFAULT_SPECIES, entries)
    total = 0
    for b in range(27):
        plan = synth.plan_embeddings(pool, 60 * RATE, SynthesisConfig("max", DEFAULT_SPECIES, b), RATE)
        total += len(plan.placements)
    assert len(plan.placements) == 905
    assert total == 27 * 905


def test_plan_is_deterministic_and_order_independent():
    pool, _ = fixture_pool()
    cfg = SynthesisConfig(17, DEFAULT_SPECIES, 99)
    a = synth.plan_embeddings(pool, 9 * RATE, cfg, RATE)
    shuffled = PoolManifest(DEFAULT_SPECIES, list(reversed(pool.entries)))
    b = synth.plan_embeddings(shuffled, 9 * RATE, cfg, RATE)
    c = synth.plan_embeddings(PoolManifest.loads(pool.dumps()), 9 * RATE, cfg, RATE)
    assert a.placements == b.placements == c.placements


def test_plan_errors():
    pool, _ = fixture_pool(per_species=(1, 1, 0, 1, 1, 1))
    with pytest.raises(EmptySpeciesPool) as info:
        synth.plan_embeddings(pool, RATE, SynthesisConfig(6, DEFAULT_SPECIES, 0), RATE)
    assert info.value.species_id == 2
    with pytest.raises(ZeroLengthBackground):
        synth.plan_embeddings(pool, 0, SynthesisConfig(6, DEFAULT_SPECIES, 0), RATE)


def test_snippets_longer_than_background_are_trimmed():
    pool, _ = fixture_pool()
    plan = synth.plan_embeddings(pool, 100, SynthesisConfig(12, DEFAULT_SPECIES, 1), RATE)
    assert all(p.trimmed_len_samples == 100 and p.start_sample == 0 for p in plan.placements)


def test_config_validation():
    for bad in (0, -3, 2.5, "lots", True):
        with pytest.raises(ConfigError):
            SynthesisConfig(bad)
    assert SynthesisConfig("MAX").fill_density == synth.MAX
    with pytest.raises(ConfigError):
        GainMode("peak_norm_uniform_gain", 0.0, 1.0)
    with pytest.raises(ConfigError):
        GainMode("peak_norm_uniform_gain", 0.8, 0.5)
    with pytest.raises(ConfigError):
        GainMode("loud")


def test_gain_modes():
    pool, _ = fixture_pool()
    rng = np.random.default_rng(0)
    e = pool.entries[0]
    g = synth._gain(GainMode(), e, rng, None)
    assert 0.25 * 0.9 / e.peak <= g <= 0.9 / e.peak
    assert synth._gain(GainMode("raw_add"), e, rng, None) == 1.0
    e2 = PoolEntry(0, "x", rms=0.1)
    assert synth._gain(GainMode("target_snr_db", snr_db=20), e2, rng, 0.01) == pytest.approx(1.0)


def test_empty_plan_is_identity():
    bg = AudioClip(np.random.default_rng(0).uniform(-0.3, 0.3, 500), RATE)
    mix, track = synth.render_mixture(bg, synth.EmbeddingPlan([]), {})
    np.testing.assert_array_equal(mix.samples, bg.samples)
    assert track.events == []


def test_single_placement_on_silence():
    snip = AudioClip(np.linspace(-0.5, 0.5, 100), RATE)
    plan = synth.EmbeddingPlan([synth.Placement(0, 4, 250, 0.5, 100)])
    mix, track = synth.render_mixture(AudioClip(np.zeros(1000), RATE), plan, {0: snip})
    np.testing.assert_array_equal(mix.samples[250:350], (0.5 * snip.samples.astype(np.float64)).astype(np.float32))
    assert not mix.samples[:250].any() and not mix.samples[350:].any()
    assert track.events == [(4, 250 / RATE, 350 / RATE)]


def within_one_ulp(mix, bg, expected):
    diff = mix.astype(np.float64) - bg.astype(np.float64)
    return np.all(np.abs(diff - expected) <= np.spacing(np.abs(mix).astype(np.float32)).astype(np.float64))


def non_overlapping_plan(pool, bg_len, rng):
    """Placements laid end to end with random gaps, so no two overlap."""
    placements, cursor = [], 0
    while True:
        idx = int(rng.integers(len(pool.entries)))
        e = pool.entries[idx]
        start = cursor + int(rng.integers(0, RATE // 2))
        if start + e.n_samples > bg_len:
            break
        gain = float(rng.uniform(0.25, 1.0)) * 0.9 / e.peak
        placements.append(synth.Placement(idx, e.species_id, start, gain, e.n_samples))
        cursor = start + e.n_samples
    return synth.EmbeddingPlan(placements, background_len_samples=bg_len)


def test_subtraction_oracle_on_random_plans():
    pool, clips = fixture_pool(seed=5)
    rng = np.random.default_rng(11)
    for _ in range(20):
        bg = AudioClip(rng.normal(0, 0.02, 8 * RATE).astype(np.float32), RATE)
        plan = non_overlapping_plan(pool, len(bg), rng)
        mix, track = synth.render_mixture(bg, plan, clips)
        assert len(plan.placements) >= 3
        for p, ev in zip(plan.placements, track.events):
            sl = slice(p.start_sample, p.start_sample + p.trimmed_len_samples)
            expected = p.gain * clips[p.pool_index].samples.astype(np.float64)
            assert np.abs(mix.samples[sl]).max() < 1.0  # no clamping involved
            assert within_one_ulp(mix.samples[sl], bg.samples[sl], expected)
            assert ev == (p.species_id, p.start_sample / RATE, (p.start_sample + p.trimmed_len_samples) / RATE)


def test_overlapping_placements_add_and_clamp():
    snip = AudioClip(np.full(10, 0.6), RATE)
    plan = synth.EmbeddingPlan([synth.Placement(0, 0, 0, 1.0, 10), synth.Placement(0, 1, 5, 1.0, 10)])
    mix, track = synth.render_mixture(AudioClip(np.zeros(20), RATE), plan, {0: snip})
    assert mix.samples[7] == 1.0
    assert mix.samples[2] == np.float32(0.6)
    assert len(track.events) == 2


def test_render_rejects_out_of_range():
    plan = synth.EmbeddingPlan([synth.Placement(0, 0, 95, 1.0, 10)])
    with pytest.raises(PlanOutOfRange):
        synth.render_mixture(AudioClip(np.zeros(100), RATE), plan, {0: AudioClip(np.ones(10), RATE)})


def test_label_track_validation_and_csv():
    with pytest.raises(DataError):
        LabelTrack([(0, 2.0, 1.0)], 5.0)
    with pytest.raises(DataError):
        LabelTrack([(0, 1.0, 6.0)], 5.0)
    t = LabelTrack([(1, 0.25, 1.5), (0, 1.0, 2.0), (1, 1.2, 4.0)], 5.0)
    text = t.to_csv(DEFAULT_SPECIES)
    assert text.splitlines()[0] == "species,start_s,end_s"
    assert text.splitlines()[1] == "Dark-capped Bulbul,0.250,1.500"
    assert LabelTrack.from_csv(text, DEFAULT_SPECIES, 5.0) == t
    with pytest.raises(DataError):
        LabelTrack.from_csv("species,start_s,end_s\nPenguin,0,1\n", DEFAULT_SPECIES, 5.0)


def test_file_seed():
    assert synth.file_seed(0, "a") == synth.stable_hash64("a")
    assert synth.file_seed(7, "a") != synth.file_seed(7, "b")
    assert 0 <= synth.file_seed(2 ** 64 - 1, "x") < 2 ** 64


def write_fixture_dirs(tmp_path, n_backgrounds=2, bg_seconds=3):
    pool_root, bg_root = tmp_path / "pool", tmp_path / "bg"
    rng = np.random.default_rng(1)
    for sid, name in enumerate(DEFAULT_SPECIES.common_names):
        d = pool_root / ingest.snake_case(name)
        d.mkdir(parents=True)
        audio_io.write_wav(d / "only.wav", AudioClip(rng.uniform(-0.5, 0.5, RATE // 2), RATE))
    bg_root.mkdir()
    for b in range(n_backgrounds):
        audio_io.write_wav(bg_root / f"bg{b}.wav", AudioClip(rng.normal(0, 0.02, bg_seconds * RATE), RATE))
    pool = ingest.build_pool_manifest(pool_root, DEFAULT_SPECIES)
    bgs = ingest.build_pool_manifest(bg_root, DEFAULT_SPECIES, ingest.BACKGROUNDS)
    return pool, bgs, pool_root, bg_root


def test_synth_dataset_writes_files_and_reruns_identically(tmp_path):
    pool, bgs, pool_root, bg_root = write_fixture_dirs(tmp_path, n_backgrounds=1)
    cfg = SynthesisConfig(6, DEFAULT_SPECIES, 42)
    ds = synth.synth_dataset(bgs, pool, cfg, tmp_path / "out", pool_root, bg_root, rate=RATE)
    assert len(ds.records) == 1
    rec = ds.records[0]
    track = ds.load_track(rec)
    assert len(track.events) == 6 and sorted(s for s, _, _ in track.events) == list(range(6))
    assert rec.seed == synth.file_seed(42, "bg0")
    assert audio_io.read_wav(ds.audio_path(rec), None).sample_rate == RATE
    first = {p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()}
    synth.synth_dataset(bgs, pool, cfg, tmp_path / "out", pool_root, bg_root, rate=RATE, jobs=2)
    assert {p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()} == first
    loaded = synth.DatasetManifest.load(tmp_path / "out" / "dataset_manifest.jsonl")
    assert loaded.records == ds.records and loaded.species == DEFAULT_SPECIES


def test_count_invariant_over_dataset(tmp_path):
    pool, bgs, pool_root, bg_root = write_fixture_dirs(tmp_path, n_backgrounds=3)
    ds = synth.synth_dataset(bgs, pool, SynthesisConfig(10, DEFAULT_SPECIES, 1), tmp_path / "o", pool_root,
                             bg_root, rate=RATE)
    assert sum(r.n_events for r in ds.records) == 30


def test_no_backgrounds_gives_empty_manifest(tmp_path):
    pool, _, pool_root, bg_root = write_fixture_dirs(tmp_path)
    empty = PoolManifest(DEFAULT_SPECIES, [], ingest.BACKGROUNDS)
    ds = synth.synth_dataset(empty, pool, SynthesisConfig(6), tmp_path / "o", pool_root, bg_root, rate=RATE)
    assert ds.records == []
    assert not list((tmp_path / "o").glob("*.wav"))
