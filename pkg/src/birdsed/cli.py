"""Command line front end.

Every command writes into a subdirectory of the output root and leaves a
``run.json`` there recording the command, the configuration digest, the seed,
the tool version and the SHA-256 of every input file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, audio_io, evaluation, features, ingest, labelgrid, plotting, synth, toy
from .config import EvalConfig, ExperimentConfig, ModelConfig, PoolsConfig
from .crnn import checkpoint
from .crnn.train import TrainConfig, feature_config_for, predict_recording, train
from .errors import BirdSedError, ConfigError, DataError, SpeciesListMismatch
from .report import PredictionTimeline, render_html

log = logging.getLogger("birdsed")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(out_dir, command, cfg: ExperimentConfig, inputs=(), extra=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "version": __version__,
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        **(extra or {}),
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _fd_name(fd) -> str:
    return f"fd{fd}"


def _parse_fd(text):
    text = str(text).strip().lower()
    if text == synth.MAX:
        return synth.MAX
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"fill density must be an integer or 'max', got {text!r}") from None


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} not found; {hint}")
    return path


def pools_dir(cfg) -> Path:
    return cfg.out / "pools"


def dataset_dir(cfg, fd) -> Path:
    return cfg.out / "datasets" / _fd_name(fd)


def model_dir(cfg, preset, fd) -> Path:
    return cfg.out / "models" / f"{preset}_{_fd_name(fd)}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: ExperimentConfig, args) -> int:
    out = pools_dir(cfg)
    labeled_root = cfg.path(cfg.pools.labeled)
    if args.download:
        arch = cfg.pools.archive
        queries = arch.queries or cfg.species.common_names
        descriptors = []
        for q in queries:
            descriptors += ingest.query_archive(q, arch.quality, base_url=arch.base_url, extra_params=arch.params)
        manifest = ingest.download_pool(descriptors, labeled_root, cfg.species, jobs=args.jobs)
        labeled_inputs = []
    else:
        manifest = ingest.build_pool_manifest(_require(labeled_root, "set pools.labeled"), cfg.species)
        labeled_inputs = [labeled_root / e.local_path for e in manifest.entries]
    bg_root = _require(cfg.path(cfg.pools.backgrounds), "set pools.backgrounds")
    backgrounds = ingest.build_pool_manifest(bg_root, cfg.species, ingest.BACKGROUNDS)
    manifest.save(out / "labeled.jsonl")
    backgrounds.save(out / "backgrounds.jsonl")
    counts = [len(v) for v in manifest.by_species()]
    write_run_record(out, "ingest", cfg, labeled_inputs + [bg_root / e.local_path for e in backgrounds.entries],
                     {"labeled_usable": len(manifest.usable()), "backgrounds": len(backgrounds.usable())})
    print(f"labeled pool: {len(manifest.usable())} usable snippets {counts}; "
          f"backgrounds: {len(backgrounds.usable())}")
    return 0


def _load_pools(cfg):
    d = pools_dir(cfg)
    hint = "run `birdsed ingest` first"
    pool = ingest.PoolManifest.load(_require(d / "labeled.jsonl", hint))
    bgs = ingest.PoolManifest.load(_require(d / "backgrounds.jsonl", hint))
    if pool.species != cfg.species:
        raise SpeciesListMismatch("labeled pool manifest was built for a different species list")
    return pool, bgs


def synthesize(cfg: ExperimentConfig, fd, jobs=1) -> synth.DatasetManifest:
    pool, bgs = _load_pools(cfg)
    out = dataset_dir(cfg, fd)
    scfg = cfg.synthesis_config(fd)
    ds = synth.synth_dataset(bgs, pool, scfg, out, cfg.path(cfg.pools.labeled), cfg.path(cfg.pools.backgrounds),
                             jobs=jobs, rate=cfg.features.sample_rate)
    ds.save()
    write_run_record(out, "synth", cfg, [pools_dir(cfg) / "labeled.jsonl", pools_dir(cfg) / "backgrounds.jsonl"],
                     {"fill_density": scfg.fill_density})
    return ds


def _fill_density(cfg, args):
    return _parse_fd(args.fill_density) if getattr(args, "fill_density", None) is not None \
        else cfg.synthesis_config().fill_density


def cmd_synth(cfg, args) -> int:
    fd = _fill_density(cfg, args)
    ds = synthesize(cfg, fd, args.jobs)
    n = sum(r.n_events for r in ds.records)
    print(f"{len(ds.records)} soundscapes, {n} embedded calls -> {dataset_dir(cfg, fd)}")
    return 0


def _load_dataset(cfg, fd, jobs=1, create=False):
    path = dataset_dir(cfg, fd) / "dataset_manifest.jsonl"
    if not path.exists() and create:
        log.info("no dataset at fill density %s yet; synthesizing", fd)
        return synthesize(cfg, fd, jobs)
    return synth.DatasetManifest.load(_require(path, "run `birdsed synth` first"))


def cmd_features(cfg, args) -> int:
    fd = _fill_density(cfg, args)
    ds = _load_dataset(cfg, fd)
    preset = cfg.model.architecture(args.preset)
    fcfg = feature_config_for(preset, cfg.features)
    out = cfg.out / "features" / _fd_name(fd) / f"mel{fcfg.n_mels}"
    out.mkdir(parents=True, exist_ok=True)
    inputs = []
    for rec in ds.records:
        wav = ds.audio_path(rec)
        inputs.append(wav)
        spec = features.featurize(audio_io.read_wav(wav, fcfg.sample_rate), fcfg)
        features.save_feature_cache(out / f"{Path(rec.audio).stem}.bsmf", spec)
    write_run_record(out, "features", cfg, inputs, {"feature_config": fcfg.__dict__})
    print(f"{len(ds.records)} feature matrices -> {out}")
    return 0


def _parse_grid(items):
    grid = {}
    for item in items or []:
        key, _, values = item.partition("=")
        key = key.strip().replace("-", "_")
        if key not in ("fill_density", "preset") or not values:
            raise ConfigError(f"--grid: expected fill_density=... or preset=..., got {item!r}")
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
    return grid


def _history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for h in history:
        w.writerow([h["epoch"], f"{h['train_loss']:.8f}", f"{h['val_loss']:.8f}"])
    return buf.getvalue()


def train_one(cfg: ExperimentConfig, preset_name: str, fd, jobs=1):
    ds = _load_dataset(cfg, fd, jobs, create=True)
    if ds.species != cfg.species:
        raise SpeciesListMismatch("dataset was synthesized for a different species list")
    preset = cfg.model.architecture(preset_name)
    out = model_dir(cfg, preset_name, fd)
    out.mkdir(parents=True, exist_ok=True)
    params, history = train(ds, preset, cfg.train_config(), cfg.features,
                            progress=lambda h: log.info("%s %s epoch %d: train %.4f val %.4f", preset_name,
                                                        _fd_name(fd), h["epoch"], h["train_loss"], h["val_loss"]))
    ckpt = checkpoint.save(out / "model.ckpt", params)
    (out / "history.csv").write_text(_history_csv(history), encoding="utf-8")
    plotting.history_figure(history, out / "history.png")
    write_run_record(out, "train", cfg, [ds.root / "dataset_manifest.jsonl"],
                     {"preset": preset.to_dict(), "fill_density": fd, "epochs_run": len(history) - 1,
                      "best_epoch": params.best_epoch, "history_digest": params.history_digest})
    return ckpt, params, history


def _eval_pairs(cfg):
    ev = cfg.eval
    if len(ev.audio) != len(ev.labels):
        raise ConfigError("eval.audio and eval.labels must have the same length")
    return [(cfg.path(a), cfg.path(b)) for a, b in zip(ev.audio, ev.labels)]


def _truth_for(cfg, label_path, n_seconds):
    track = synth.LabelTrack.from_csv(Path(label_path).read_text(encoding="utf-8"), cfg.species, float(n_seconds))
    return labelgrid.to_segment_matrix(track, len(cfg.species))


def cmd_train(cfg, args) -> int:
    grid = _parse_grid(args.grid)
    presets = grid.get("preset") or [args.preset or cfg.model.preset]
    fds = [_parse_fd(v) for v in grid.get("fill_density", [])] or [_fill_density(cfg, args)]
    pairs = _eval_pairs(cfg)
    rows, curves = [], {}
    for preset_name, fd in itertools.product(presets, fds):
        ckpt, params, history = train_one(cfg, preset_name, fd, args.jobs)
        row = {"preset": preset_name, "fill_density": fd, "epochs_run": len(history) - 1,
               "best_epoch": params.best_epoch, "best_val_loss": f"{history[params.best_epoch]['val_loss']:.6f}"}
        print(f"{preset_name} {_fd_name(fd)}: {row['epochs_run']} epochs, best epoch {params.best_epoch} -> {ckpt}")
        if pairs:
            probs = [predict_recording(params, audio_io.read_wav(a, params.feature_config.sample_rate))
                     for a, _ in pairs]
            P = np.concatenate(probs)
            Y = np.concatenate([_truth_for(cfg, lab, len(p)) for p, (_, lab) in zip(probs, pairs)])
            rep = evaluation.report_from_matrices(P, Y, cfg.eval.threshold, cfg.species.common_names)
            curve = evaluation.sweep(P, Y, cfg.eval.thresholds or evaluation.DEFAULT_THRESHOLDS)
            curves[f"{preset_name} {_fd_name(fd)}"] = curve
            best = curve.best()
            for k in ("precision", "recall", "f1", "accuracy"):
                row[k] = evaluation._fmt(getattr(rep.pooled, k))
            row["sweep_best_f1"] = evaluation._fmt(best[1].f1) if best else evaluation.UNDEFINED
            row["sweep_best_threshold"] = f"{best[0]:.2f}" if best else evaluation.UNDEFINED
            print(f"  pooled F1 {row['f1']} at threshold {cfg.eval.threshold:g}; "
                  f"best F1 {row['sweep_best_f1']} at threshold {row['sweep_best_threshold']}")
        rows.append(row)
    if len(rows) > 1 or pairs:
        out = cfg.out / "models"
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        (out / "grid_results.csv").write_text(buf.getvalue(), encoding="utf-8")
        if curves:
            plotting.sweep_figure(curves, out / "grid_sweep.png")
        write_run_record(out, "train-grid", cfg, [p for pair in pairs for p in pair],
                         {"presets": presets, "fill_densities": fds})
    return 0


def _load_checkpoint(cfg, args):
    if args.checkpoint:
        return checkpoint.load(_require(Path(args.checkpoint), "pass an existing --checkpoint")), Path(args.checkpoint)
    path = model_dir(cfg, cfg.model.preset, cfg.synthesis_config().fill_density) / "model.ckpt"
    return checkpoint.load(_require(path, "run `birdsed train` or pass --checkpoint")), path


def cmd_predict(cfg, args) -> int:
    params, ckpt_path = _load_checkpoint(cfg, args)
    if list(params.species) != cfg.species.common_names:
        raise SpeciesListMismatch("checkpoint species differ from the configured species list")
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    audio = [Path(a) for a in args.audio] or [a for a, _ in _eval_pairs(cfg)]
    if not audio:
        raise ConfigError("no audio given (pass paths or set eval.audio)")
    out = cfg.out / "predictions"
    for path in audio:
        clip = audio_io.read_wav(path, params.feature_config.sample_rate)
        tl = PredictionTimeline(path.stem, list(params.species), predict_recording(params, clip), threshold)
        tl.save(out / f"{path.stem}_timeline.csv")
        print(f"{path.name}: {len(tl)} s, {int(tl.flags.sum())} flagged species-seconds")
    write_run_record(out, "predict", cfg, [ckpt_path, *audio], {"threshold": threshold})
    return 0


def _gather(cfg, args, threshold=None):
    pred_paths = [Path(p) for p in args.predictions]
    label_paths = [Path(p) for p in args.labels] or [b for _, b in _eval_pairs(cfg)]
    if not pred_paths:
        pred_paths = [cfg.out / "predictions" / f"{a.stem}_timeline.csv" for a, _ in _eval_pairs(cfg)]
    if not pred_paths or len(pred_paths) != len(label_paths):
        raise ConfigError("need one label file per prediction file")
    P, Y = [], []
    for pp, lp in zip(pred_paths, label_paths):
        tl = PredictionTimeline.load(_require(pp, "run `birdsed predict` first"), threshold)
        if tl.species != cfg.species.common_names:
            raise SpeciesListMismatch(f"{pp}: species columns {tl.species} differ from the configuration")
        P.append(tl.probs)
        Y.append(_truth_for(cfg, _require(lp, "check the label path"), len(tl)))
    return np.concatenate(P), np.concatenate(Y), pred_paths + label_paths


def cmd_eval(cfg, args) -> int:
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    P, Y, inputs = _gather(cfg, args, threshold)
    rep = evaluation.report_from_matrices(P, Y, threshold, cfg.species.common_names)
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rep.to_csv(args.coerce_zero), encoding="utf-8")
    (out / "metrics.json").write_text(rep.to_json(args.coerce_zero) + "\n", encoding="utf-8")
    write_run_record(out, "eval", cfg, inputs, {"threshold": threshold})
    sys.stdout.write(rep.to_csv(args.coerce_zero))
    return 0


def cmd_sweep(cfg, args) -> int:
    P, Y, inputs = _gather(cfg, args)
    curve = evaluation.sweep(P, Y, cfg.eval.thresholds or evaluation.DEFAULT_THRESHOLDS)
    out = cfg.out / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(curve.to_csv(), encoding="utf-8")
    plotting.sweep_figure({"pooled": curve}, out / "sweep.png")
    write_run_record(out, "sweep", cfg, inputs)
    best = curve.best()
    if best is None:
        print("best F1 undefined (no positive cells at any threshold)")
    else:
        print(f"best F1 {best[1].f1:.2f} at threshold {best[0]:.2f}")
    return 0


def cmd_report(cfg, args) -> int:
    paths = [Path(p) for p in args.timelines] or sorted((cfg.out / "predictions").glob("*_timeline.csv"))
    if not paths:
        raise DataError("no timeline files (run `birdsed predict` first)")
    out = cfg.out / "report"
    out.mkdir(parents=True, exist_ok=True)
    timelines, images = [], {}
    for p in paths:
        tl = PredictionTimeline.load(_require(p, "check the timeline path"), args.threshold)
        timelines.append(tl)
        tl.save(out / f"{tl.recording_id}_timeline.csv")
        plotting.timeline_figure(tl, out / f"{tl.recording_id}_timeline.png")
        images[tl.recording_id] = f"{tl.recording_id}_timeline.png"
    (out / "index.html").write_text(render_html(timelines, images=images), encoding="utf-8")
    write_run_record(out, "report", cfg, paths)
    print(f"report for {len(timelines)} recording(s) -> {out / 'index.html'}")
    return 0


def cmd_make_toy(cfg, args) -> int:
    """Write a separable six-class toy corpus plus a ready-to-run config."""
    root = Path(args.directory)
    dirs = toy.make_toy_corpus(root, n_backgrounds=args.backgrounds, background_s=args.seconds,
                               snippets_per_species=args.snippets, seed=cfg.seed, n_heldout=args.heldout)
    species = toy.TOY_SPECIES
    pool = ingest.build_pool_manifest(dirs["pool"], species)
    held = ingest.build_pool_manifest(dirs["heldout"], species, ingest.BACKGROUNDS)
    test_cfg = synth.SynthesisConfig(50, species, seed=cfg.seed + 1000)
    test = synth.synth_dataset(held, pool, test_cfg, root / "test", dirs["pool"], dirs["heldout"])
    test.save()
    overrides = {"adapted_sed_crnn": {"conv_filters": [16, 16], "pool_factors": [4, 4], "gru_hidden": 32,
                                      "head": args.head}}
    toy_cfg = ExperimentConfig(
        species=species,
        pools=PoolsConfig(labeled="pool", backgrounds="backgrounds"),
        model=ModelConfig("adapted_sed_crnn", overrides),
        train=TrainConfig(batch_size=8, learning_rate=3e-3, patience=5, max_epochs=args.max_epochs),
        eval=EvalConfig(audio=[f"test/{r.audio}" for r in test.records],
                        labels=[f"test/{r.labels}" for r in test.records]),
        output_root="runs",
        seed=cfg.seed,
    )
    path = toy_cfg.save(root / "config.yaml")
    print(f"toy corpus and config -> {path}")
    print(f"next: birdsed --config {path} ingest, then train, predict, eval, sweep, report")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="birdsed", description="Train and evaluate bird-call detectors "
                                "on synthetic soundscapes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="experiment YAML file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output root")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for downloads and synthesis")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="build pool manifests (optionally downloading from the archive)")
    s.add_argument("--download", action="store_true", help="query the recordings archive first")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="render labeled soundscapes")
    s.add_argument("--fill-density", help="snippets per background, or 'max'")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="cache log-Mel features of a dataset")
    s.add_argument("--fill-density")
    s.add_argument("--preset")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train one model or a preset x fill-density grid")
    s.add_argument("--fill-density")
    s.add_argument("--preset")
    s.add_argument("--grid", nargs="+", metavar="KEY=V1,V2", help="e.g. fill_density=10,50,max preset=a,b")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write per-second prediction timelines")
    s.add_argument("audio", nargs="*")
    s.add_argument("--checkpoint")
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_predict)

    for name, func, helptext in (("eval", cmd_eval, "metrics at one threshold"),
                                 ("sweep", cmd_sweep, "metrics across thresholds")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--predictions", nargs="*", default=[])
        s.add_argument("--labels", nargs="*", default=[])
        if name == "eval":
            s.add_argument("--threshold", type=float)
            s.add_argument("--coerce-zero", action="store_true", help="print 0 instead of the undefined marker")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="static HTML and CSV export of timelines")
    s.add_argument("timelines", nargs="*")
    s.add_argument("--threshold", type=float, help="re-binarize at this threshold")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("make-toy", help="write a toy corpus and config for a quick end-to-end run")
    s.add_argument("directory")
    s.add_argument("--backgrounds", type=int, default=10)
    s.add_argument("--seconds", type=float, default=60.0)
    s.add_argument("--snippets", type=int, default=4)
    s.add_argument("--heldout", type=int, default=1)
    s.add_argument("--max-epochs", type=int, default=300)
    s.add_argument("--head", choices=("frame", "segment"), default="segment")
    s.set_defaults(func=cmd_make_toy)
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(base_dir=Path.cwd())
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be nonnegative")
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_root=str(Path(args.out).resolve()))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(cfg, args)
    except BirdSedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
