"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``criterion N: PASS|FAIL ...`` line, shown even
when pytest captures output.
"""

import csv
import io
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from birdsed import audio_io, cli, evaluation, features, labelgrid, synth
from birdsed.audio_io import AudioClip
from birdsed.crnn import checkpoint, layers as L
from birdsed.crnn.train import evaluate_loss, load_recordings, make_windows, predict_recording, split_recordings
from birdsed.ingest import DEFAULT_SPECIES
from birdsed.synth import SynthesisConfig

from gradcheck import check_all_parameters, kink_margin, mini_problem, numeric_grad, rel_error
from test_eval import brute_counts, brute_metrics, random_instance
from test_features import naive_dft_power
from test_labelgrid import oracle_matrix, random_track
from test_synth import RATE, fixture_pool, non_overlapping_plan, within_one_ulp


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def read_csv(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text(encoding="utf-8"))))


def run_pipeline(cfg, out=None, steps=("ingest", "train", "predict", "eval")):
    base = ["--config", str(cfg)] + (["--out", str(out)] if out else [])
    for step in steps:
        assert cli.main(base + [step]) == 0, step


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """The full-size toy experiment: six call templates, ten 60 s pink-noise backgrounds."""
    root = tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    assert cli.main(["make-toy", str(root)]) == 0
    run_pipeline(root / "config.yaml")
    return root, time.perf_counter() - t0


@pytest.fixture(scope="module")
def small_toy(tmp_path_factory):
    """A few short backgrounds, for checks where only the pipeline shape matters."""
    root = tmp_path_factory.mktemp("small_toy")
    assert cli.main(["make-toy", str(root), "--backgrounds", "3", "--seconds", "8", "--snippets", "1",
                     "--max-epochs", "2"]) == 0
    return root


# ---------------------------------------------------------------------------

def test_criterion_1_grid_shape(small_toy, capsys):
    cfg = yaml.safe_load((small_toy / "config.yaml").read_text())
    # every preset keeps its name, mel count and window; only widths shrink so the grid runs quickly
    cfg["model"]["overrides"] = {
        "sed_crnn": {"conv_filters": [4, 4], "pool_factors": [5, 8], "gru_hidden": 8},
        "adapted_sed_crnn": {"conv_filters": [4, 4], "pool_factors": [4, 4], "gru_hidden": 8},
        "seldnet_sed": {"conv_filters": [4, 4], "pool_factors": [4, 4], "gru_hidden": 8},
    }
    cfg["train"]["max_epochs"] = 1
    cfg["output_root"] = "grid_runs"
    path = small_toy / "grid.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["--config", str(path), "ingest"]) == 0
    assert cli.main(["--config", str(path), "train", "--grid", "preset=sed_crnn,adapted_sed_crnn,seldnet_sed",
                     "fill_density=10,50,max"]) == 0
    rows = read_csv(small_toy / "grid_runs" / "models" / "grid_results.csv")
    cells = {(r["preset"], r["fill_density"]) for r in rows}
    expected = {(p, fd) for p in ("sed_crnn", "adapted_sed_crnn", "seldnet_sed") for fd in ("10", "50", "max")}
    ckpts = sorted((small_toy / "grid_runs" / "models").glob("*/model.ckpt"))
    ok = cells == expected and len(rows) == 9 and len(ckpts) == 9 and all(r["f1"] for r in rows)
    verdict(capsys, 1, ok, f"{len(rows)} grid rows, {len(ckpts)} checkpoints (3 presets x 3 fill densities)")


def test_criterion_2_dsp_oracle(capsys):
    t0 = time.perf_counter()
    cfg = features.FeatureConfig()
    window = features.hann(cfg.fft_size)
    frames = np.random.default_rng(2).uniform(-1, 1, (50, cfg.fft_size))
    worst = 0.0
    for f in frames:
        fast = features.stft_power(f, cfg)[0]
        ref = naive_dft_power(f * window)
        worst = max(worst, float(np.max(np.abs(fast - ref) / ref)))
    x = np.random.default_rng(3).normal(size=cfg.fft_size)
    P = features.stft_power(x, cfg)[0]
    energy = np.sum((x * window) ** 2)
    parseval = abs((P[0] + P[-1] + 2 * P[1:-1].sum()) / cfg.fft_size - energy) / energy
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and parseval < 1e-6 and elapsed < 10
    verdict(capsys, 2, ok, f"max rel power err {worst:.2e}, Parseval rel err {parseval:.2e}, {elapsed:.2f} s")


def test_criterion_3_gradient_check(capsys):
    t0 = time.perf_counter()
    params, x, y, mask = mini_problem()
    margin = kink_margin(params, x, mask)
    full = max(check_all_parameters(params, x, y, mask).values())

    rng = np.random.default_rng(3)
    layer_errs = {}

    def check(name, fwd, bwd, inputs):
        out, cache = fwd()
        G = rng.normal(size=out.shape)
        grads = bwd(G, cache)
        layer_errs[name] = max(rel_error(g, numeric_grad(lambda: float((fwd()[0] * G).sum()), a, 1e-3))
                               for a, g in zip(inputs, grads) if g is not None)

    xc, w, b = rng.normal(size=(2, 4, 6, 2)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    check("conv", lambda: L.conv_forward(xc, w, b), L.conv_backward, [xc, w, b])
    xb, sc, sh = rng.normal(size=(2, 5, 4, 3)), rng.normal(size=3), rng.normal(size=3)
    m = np.ones((2, 5), bool)
    m[1, 3:] = False
    check("batchnorm", lambda: L.bn_forward(xb, sc, sh, m), L.bn_backward, [xb, sc, sh])
    xp = rng.normal(size=(2, 3, 8, 2))
    check("pool", lambda: L.freq_pool_forward(xp, 2), lambda g, c: [L.freq_pool_backward(g, c)], [xp])
    xg = rng.normal(size=(2, 6, 3))
    mg = np.ones((2, 6), bool)
    mg[1, 4:] = False
    W, U, bx, bh = (rng.normal(size=s) * 0.5 for s in ((12, 3), (12, 4), 12, 12))
    for rev in (False, True):
        check("gru-reverse" if rev else "gru", lambda: L.gru_forward(xg, mg, W, U, bx, bh, reverse=rev),
              L.gru_backward, [xg, W, U, bx, bh])
    xd, wd, bd = rng.normal(size=(2, 4, 5)), rng.normal(size=(5, 2)), rng.normal(size=2)
    check("dense", lambda: L.dense_forward(xd, wd, bd), L.dense_backward, [xd, wd, bd])
    elapsed = time.perf_counter() - t0
    worst_layer = max(layer_errs.values())
    ok = margin > 5e-3 and full < 1e-3 and worst_layer < 1e-3 and elapsed < 60
    verdict(capsys, 3, ok, f"full model max rel err {full:.2e}, per-layer max {worst_layer:.2e} "
            f"({', '.join(layer_errs)}), {elapsed:.1f} s")


def test_criterion_4_synthesis_oracle(capsys):
    pool, clips = fixture_pool(seed=5)
    rng = np.random.default_rng(4)
    ulp_ok = labels_ok = True
    for _ in range(20):
        bg = AudioClip(rng.normal(0, 0.02, 8 * RATE).astype(np.float32), RATE)
        plan = non_overlapping_plan(pool, len(bg), rng)
        mix, track = synth.render_mixture(bg, plan, clips)
        for p, ev in zip(plan.placements, track.events):
            sl = slice(p.start_sample, p.start_sample + p.trimmed_len_samples)
            scaled = p.gain * clips[p.pool_index].samples.astype(np.float64)
            ulp_ok &= within_one_ulp(mix.samples[sl], bg.samples[sl], scaled)
            labels_ok &= ev == (p.species_id, sl.start / RATE, sl.stop / RATE)
    counts = sorted(synth.plan_embeddings(pool, 60 * RATE, SynthesisConfig(50, DEFAULT_SPECIES, 0), RATE)
                    .species_counts(6))
    max_plan = synth.plan_embeddings(pool, 5 * RATE, SynthesisConfig("max", DEFAULT_SPECIES, 0), RATE)
    once = sorted(p.pool_index for p in max_plan.placements) == list(range(len(pool.entries)))
    ok = ulp_ok and labels_ok and counts == [8, 8, 8, 8, 9, 9] and once
    verdict(capsys, 4, ok, f"1-ulp residual {ulp_ok}, labels exact {labels_ok}, density-50 counts {counts}, "
            f"MAX places all {len(pool.entries)} entries once {once}")


def test_criterion_5_label_grid_oracle(capsys):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        C = int(rng.integers(1, 7))
        track = random_track(rng, C)
        mismatches += not np.array_equal(labelgrid.to_segment_matrix(track, C), oracle_matrix(track, C))
    rounding = labelgrid.round_interval(1.3, 3.6) == (1, 4)
    m = labelgrid.to_segment_matrix(synth.LabelTrack([(0, 1.3, 3.6)], 5.0), 1)[:, 0]
    segments = set(np.flatnonzero(m).tolist()) == {1, 2, 3}
    rescue = labelgrid.round_interval(2.1, 2.3) == (2, 3)
    ok = mismatches == 0 and rounding and segments and rescue
    verdict(capsys, 5, ok, f"{mismatches}/1000 mismatches vs brute force; (1.3,3.6)->{{1,2,3}} {segments}; "
            f"midpoint rescue (2.1,2.3)->[2,3) {rescue}")


def test_criterion_6_metrics_oracle(capsys):
    exact = monotone = True
    for seed in range(50):
        probs, truth = random_instance(seed)
        curve = evaluation.sweep(probs, truth)
        for tau, m in curve.points:
            pooled = tuple(map(sum, zip(*brute_counts(probs >= tau, truth))))
            bp, br, bf, ba = brute_metrics(*pooled)
            c = evaluation.confusion(evaluation.binarize(probs, tau), truth).pooled
            exact &= (c.tp, c.fp, c.fn, c.tn) == pooled and (m.precision, m.recall, m.accuracy) == (bp, br, ba)
            exact &= (m.f1 is None) if bf is None else abs(m.f1 - bf) <= 1e-12
        recalls = [m.recall for _, m in curve.points]
        monotone &= all(b <= a for a, b in zip(recalls, recalls[1:]))
    f1 = evaluation.f1_from(0.67, 0.80)
    ok = exact and monotone and abs(f1 - 0.73) <= 0.005
    verdict(capsys, 6, ok, f"brute-force agreement {exact} on 50 random 50x6 instances x 101 thresholds; "
            f"recall monotone {monotone}; F1(0.67, 0.80) = {f1:.4f}")


def test_criterion_7_toy_experiment(toy, capsys):
    root, elapsed = toy
    pooled = read_csv(root / "runs" / "eval" / "metrics.csv")[-1]
    f1 = float(pooled["f1"])
    verdict(capsys, 7, f1 >= 0.90, f"held-out pooled F1 {f1:.3f} at threshold 0.5 "
            f"(P {float(pooled['precision']):.3f}, R {float(pooled['recall']):.3f}); pipeline {elapsed / 60:.1f} min")


def test_criterion_8_early_stopping(toy, capsys):
    root, _ = toy
    cfg = cli.ExperimentConfig.load(root / "config.yaml")
    model_dir = root / "runs" / "models" / "adapted_sed_crnn_fd50"
    history = read_csv(model_dir / "history.csv")
    params = checkpoint.load(model_dir / "model.ckpt")
    val = [float(h["val_loss"]) for h in history]
    best = params.best_epoch
    epochs_run = len(history) - 1

    # the saved weights really are the best epoch's: recompute their validation loss
    ds = synth.DatasetManifest.load(root / "runs" / "datasets" / "fd50" / "dataset_manifest.jsonl")
    recs = load_recordings(ds, params.feature_config)
    _, val_recs = split_recordings(recs, cfg.train.val_fraction, cfg.seed)
    windows = [w for r in val_recs for w in make_windows(r, params.stats, params.feature_config)]
    recomputed = evaluate_loss(params, windows, params.feature_config.fps)

    ok = (epochs_run < cfg.train.max_epochs and all(val[best] <= v for v in val[best + 1:])
          and epochs_run - best == cfg.train.patience and abs(recomputed - val[best]) <= 1e-6 * val[best])
    verdict(capsys, 8, ok, f"stopped after {epochs_run} of {cfg.train.max_epochs} epochs; best epoch {best} "
            f"val {val[best]:.5f} (recomputed {recomputed:.5f}) <= all later")


def test_criterion_9_determinism(small_toy, capsys):
    cfg = small_toy / "config.yaml"
    steps = ("ingest", "synth", "train", "predict", "eval")
    for out in ("det_a", "det_b"):
        run_pipeline(cfg, small_toy / out, steps)
    a, b = small_toy / "det_a", small_toy / "det_b"
    compared = (sorted((a / "datasets").rglob("*_labels.csv")) + sorted((a / "datasets").rglob("dataset_manifest.jsonl"))
                + sorted((a / "models").rglob("history.csv")) + [a / "eval" / "metrics.csv"])
    compared = [p.relative_to(a) for p in compared]
    differing = [str(p) for p in compared if (a / p).read_bytes() != (b / p).read_bytes()]
    ok = not differing and len(compared) >= 6
    verdict(capsys, 9, ok, f"{len(compared)} artifacts compared across two runs, {len(differing)} differ {differing}")


def test_criterion_10_checkpoint_round_trip(toy, tmp_path, capsys):
    root, _ = toy
    params = checkpoint.load(root / "runs" / "models" / "adapted_sed_crnn_fd50" / "model.ckpt")
    cfg = cli.ExperimentConfig.load(root / "config.yaml")
    clip = audio_io.read_wav(cfg.path(cfg.eval.audio[0]))
    before = predict_recording(params, clip)
    after = predict_recording(checkpoint.load(checkpoint.save(tmp_path / "again.ckpt", params)), clip)
    same_file = (tmp_path / "again.ckpt").read_bytes() == checkpoint.dumps(params)
    ok = before.tobytes() == after.tobytes() and same_file
    verdict(capsys, 10, ok, f"{before.shape} probability matrix bit-identical after save/load {ok}")
