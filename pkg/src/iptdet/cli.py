"""Command-line entry points: prepare, train, evaluate, predict, report."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import audio, dataset as ds, metrics, postprocess, synth, trainer
from .config import ConfigError, RunConfig, load_config
from .encoder import STUB_N_TIME, make_backend


def _find_recordings(root: Path):
    """Pair audio files with same-stem annotation CSVs under a dataset root."""
    recs = []
    missing = []
    for wav in sorted(list(root.rglob("*.wav")) + list(root.rglob("*.flac"))):
        ann = wav.with_suffix(".csv")
        if ann.exists():
            recs.append((wav.stem, wav, ann))
        else:
            missing.append(str(ann))
    return recs, missing


def cmd_prepare(args) -> int:
    root = Path(args.root)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    class_map = ds.default_class_map(args.dataset)

    recs, missing = _find_recordings(root)
    if missing:
        print("missing annotation files:", file=sys.stderr)
        for m in missing:
            print(f"  {m}", file=sys.stderr)
        return 1
    if not recs:
        print(f"no recordings found under {root}", file=sys.stderr)
        return 1

    ann_dir = out / "annotations"
    ann_dir.mkdir(exist_ok=True)
    frame_counts = np.zeros(class_map.n_ipt, dtype=np.int64)
    total_frames = 0
    performers = {}
    for rec_id, _wav, ann in recs:
        events = ds.load_annotations(ann, args.dataset, class_map)
        ds.save_annotations(events, ann_dir / f"{rec_id}.csv", class_map)
        if events:
            n_frames = int(max(e.offset for e in events) * class_map.frame_rate) + 1
            grid = ds.rasterize(events, n_frames, class_map)
            frame_counts += grid.ipt.sum(axis=0)
            total_frames += n_frames
        if args.dataset == "cbf":
            # Performer id = filename prefix before the first underscore.
            performers[rec_id] = rec_id.split("_")[0]

    if args.dataset == "cbf":
        plan = ds.make_splits("cbf", args.seed, performers=performers)
    else:
        manifest = Path(args.manifest) if args.manifest else root / "splits.json"
        plan = ds.make_splits(args.dataset, args.seed, manifest_path=manifest)
    with open(out / "splits.json", "w", encoding="utf-8") as f:
        json.dump({"policy": plan.policy, "folds": plan.folds}, f, indent=2)

    stats = {
        "dataset": args.dataset,
        "n_recordings": len(recs),
        "total_frames": int(total_frames),
        "per_class_positive_frames": {
            name: int(n) for name, n in zip(class_map.ipt_names, frame_counts)
        },
    }
    with open(out / "stats.json", "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2)
    print(f"prepared {len(recs)} recordings -> {out}")
    return 0


def _load_prepared_samples(cfg: RunConfig, split: str):
    """Segment the recordings of one split into training windows."""
    class_map = ds.default_class_map(cfg.dataset_schema)
    root = Path(cfg.dataset_root)
    with open(root / "splits.json", encoding="utf-8") as f:
        plan = json.load(f)
    ids = plan["folds"][cfg.fold][split]
    samples = []
    for rec_id in ids:
        wav_path = next(
            p for ext in (".wav", ".flac")
            for p in [root / f"{rec_id}{ext}"] if p.exists()
        )
        wave = audio.load_audio(wav_path)
        events = ds.load_annotations(
            root / "annotations" / f"{rec_id}.csv", cfg.dataset_schema, class_map
        )
        samples.extend(ds.segment(wave, events, class_map, rec_id, STUB_N_TIME))
    return samples, class_map


def _build_dataset(cfg: RunConfig, split: str = "train"):
    if cfg.dataset_schema == "toy":
        samples, class_map = synth.make_toy_dataset(seed=cfg.seed)
        return samples, class_map
    return _load_prepared_samples(cfg, split)


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    backend = make_backend(cfg.encoder_backend, cfg.seed, cfg.checkpoint_dir)
    samples, class_map = _build_dataset(cfg, "train")
    ckpt = trainer.train(cfg.train, samples, class_map, backend, cfg.output_dir)
    print(f"best checkpoint: {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    backend = make_backend(cfg.encoder_backend, cfg.seed, cfg.checkpoint_dir)
    samples, class_map = _build_dataset(cfg, args.split)
    report = trainer.evaluate_checkpoint(
        args.checkpoint, samples, backend, cfg.decode, tolerance=args.tolerance
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "eval_report.json"
    report.save(report_path)
    print(json.dumps(report.to_dict(), indent=2))
    print(f"report written to {report_path}")
    return 0


def cmd_predict(args) -> int:
    model, class_map, meta = trainer.load_checkpoint(args.checkpoint)
    cfg = load_config(args.config, _overrides(args)) if args.config else RunConfig()
    backend = make_backend(cfg.encoder_backend, cfg.seed, cfg.checkpoint_dir)
    wave = audio.load_audio(args.audio)
    samples = ds.segment(wave, [], class_map, Path(args.audio).stem, STUB_N_TIME)
    posts = trainer.predict_posteriors(model, backend, samples)
    (p,) = posts.values()

    valid = p["mask"].astype(bool)
    y_ipt = p["y_ipt"] * valid[:, None]
    if meta["variant"] == "MERTech" and p["onset"] is not None:
        gate = postprocess.binarize_onsets(p["onset"], cfg.decode.onset_threshold)
    else:
        gate = np.ones(len(y_ipt), dtype=np.int8)
    events = postprocess.decode_events(
        y_ipt, gate, cfg.decode, class_map.frame_rate,
        y_pitch=p["y_pitch"] if class_map.has_pitch else None,
        pitch_offset=class_map.pitch_range[0],
    )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    ds.save_annotations(events, out / "events.csv", class_map)
    if args.dump_posteriors:
        np.savez(
            out / "posteriors.npz",
            y_ipt=p["y_ipt"],
            y_pitch=p["y_pitch"] if p["y_pitch"] is not None else np.zeros(0),
            onset=p["onset"] if p["onset"] is not None else np.zeros(0),
            mask=p["mask"],
        )
    print(f"{len(events)} events -> {out / 'events.csv'}")
    return 0


def cmd_report(args) -> int:
    reports = [metrics.EvalReport.load(p) for p in args.reports]
    class_sets = {tuple(r.per_class.keys()) for r in reports}
    if len(class_sets) > 1:
        print("error: reports carry inconsistent class maps", file=sys.stderr)
        return 1
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "comparison.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([
            "variant", "frame_micro_f1", "frame_macro_f1",
            "event_micro_f1", "event_macro_f1",
        ])
        for r in reports:
            w.writerow([
                r.extra.get("variant", "unknown"),
                repr(r.frame_micro_f1), repr(r.frame_macro_f1),
                repr(r.event_micro_f1), repr(r.event_macro_f1),
            ])
    metrics.per_class_histogram(reports[0], out / "per_class_f1.png")
    print(f"comparison table -> {table_path}")
    return 0


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "variant", "fold", "output"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iptdet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare", help="normalize a raw dataset and build splits")
    prep.add_argument("--dataset", required=True, choices=ds.KNOWN_SCHEMAS)
    prep.add_argument("--root", required=True)
    prep.add_argument("--output", required=True)
    prep.add_argument("--manifest", default=None, help="published split manifest JSON")
    prep.add_argument("--seed", type=int, default=0)
    prep.set_defaults(func=cmd_prepare)

    tr = sub.add_parser("train", help="run the finetuning loop")
    tr.add_argument("--config", required=True)
    tr.add_argument("--variant", default=None)
    tr.add_argument("--fold", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--output", default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--tolerance", type=float, default=metrics.DEFAULT_ONSET_TOLERANCE)
    ev.add_argument("--fold", type=int, default=None)
    ev.add_argument("--output", default=None)
    ev.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="decode events for one audio file")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--audio", required=True)
    pr.add_argument("--output", required=True)
    pr.add_argument("--config", default=None)
    pr.add_argument("--dump-posteriors", action="store_true")
    pr.set_defaults(func=cmd_predict)

    rp = sub.add_parser("report", help="comparison table + per-class histogram")
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--output", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, IOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
