"""Command-line entry point.

Subcommands: synth (generate a synthetic dataset), features (extract feature
tensors), train, infer, eval, bench-scan, count. Exit codes: 0 success,
1 usage or data error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensorio
from .autodiff import Tensor
from .config import ConfigError, load_config
from .features import FRAMES_PER_LABEL, extract_features, load_stereo_wav
from .labels import EventLabel, read_labels_csv, write_labels_csv
from .metrics import compute_metrics, write_report
from .model import SeldModel, count_params, decode_predictions, estimate_macs_parts, \
    load_checkpoint
from .ssm import ssm_scan
from .synth import SceneClip, SyntheticSceneConfig, list_dataset, synth_dataset, \
    write_dataset
from .training import NumericalError, build_items, split_items, train_loop

log = logging.getLogger("stereoseld")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage problems, not argparse's 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SyntheticSceneConfig(n_clips=args.clips, min_events=args.min_events,
                               max_events=args.max_events)
    scenes = synth_dataset(cfg, seed=args.seed)
    write_dataset(scenes, args.out)
    if args.clips == 0:
        log.warning("generated an empty dataset (--clips 0)")
    log.info("wrote %d clips to %s", len(scenes), args.out)
    return 0


def cmd_features(args) -> int:
    entries = list_dataset(args.inp)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config) if args.config else None
    stft_cfg = cfg.features.stft_config() if cfg else None
    fb = cfg.features.filterbank() if cfg else None
    ok = bad = 0
    for name, wav_path, _ in entries:
        try:
            clip = load_stereo_wav(wav_path)
            segments = extract_features(clip, stft_cfg, fb)
        except (ValueError, OSError) as exc:
            log.warning("skipping %s: %s", wav_path, exc)
            bad += 1
            continue
        for seg in segments:
            stem = f"{name}_seg{seg.index}"
            tensorio.save_tensor(out_dir / f"{stem}.ft", seg.data)
            (out_dir / f"{stem}.json").write_text(json.dumps(
                {"clip": name, "segment": seg.index, "valid_frames": seg.valid_frames}))
        ok += 1
    log.info("extracted features for %d clips (%d skipped)", ok, bad)
    if ok == 0 and bad > 0:
        log.error("all %d input files failed", bad)
        return 1
    return 0


def _load_scenes(data_dir, distance_unit: str) -> list[SceneClip]:
    scenes = []
    for name, wav_path, csv_path in list_dataset(data_dir):
        clip = load_stereo_wav(wav_path)
        labels = read_labels_csv(csv_path, distance_unit=distance_unit) \
            if Path(csv_path).is_file() else []
        scenes.append(SceneClip(name=name, clip=clip, labels=labels))
    return scenes


def cmd_train(args) -> int:
    cfg = load_config(args.config, overrides=args.set or [])
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.acs:
        cfg.train.acs = True
    scenes = _load_scenes(args.data, cfg.data.distance_unit)
    if not scenes:
        raise UsageError(f"no clips found under {args.data}")
    items = build_items(scenes, cfg.features.stft_config(), cfg.features.filterbank(),
                        tracks=cfg.model.tracks, classes=cfg.model.classes)
    train_items, val_items = split_items(items, cfg.train.val_split, cfg.train.seed)
    model = SeldModel(cfg.model, rng=np.random.default_rng(cfg.train.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log.info("training on %d segments (%d validation), %d parameters",
             len(train_items), len(val_items), model.num_params())
    result = train_loop(model, train_items, val_items, cfg.train,
                        ckpt_dir=out_dir, log_path=out_dir / "log.csv")
    log.info("best epoch %d with F20=%.3f; steps/epoch=%d",
             result.best_epoch, result.best_f20, result.steps_per_epoch)
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = list_dataset(args.inp)
    if not entries:
        raise UsageError(f"no clips found under {args.inp}")
    for name, wav_path, _ in entries:
        clip = load_stereo_wav(wav_path)
        segments = extract_features(clip)
        events: list[EventLabel] = []
        for seg in segments:
            out = model(Tensor(seg.data[None]))
            decoded = decode_predictions(out.data[0], act_threshold=args.threshold)
            frames = seg.data.shape[1] // FRAMES_PER_LABEL
            for ev in decoded:
                if ev.frame < seg.valid_label_frames:
                    events.append(EventLabel(
                        frame=ev.frame + seg.index * frames, class_id=ev.class_id,
                        source_id=ev.source_id, azimuth_deg=ev.azimuth_deg,
                        distance_m=ev.distance_m))
        write_labels_csv(out_dir / f"{name}.csv", events)
    log.info("wrote predictions for %d clips to %s", len(entries), out_dir)
    return 0


def _read_event_dir(path) -> dict[str, list[EventLabel]]:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"not a directory: {path}")
    return {p.stem: read_labels_csv(p) for p in sorted(path.glob("*.csv"))}


def cmd_eval(args) -> int:
    preds = _read_event_dir(args.pred)
    refs = _read_event_dir(args.ref)
    if set(preds) != set(refs):
        only_p = sorted(set(preds) - set(refs))
        only_r = sorted(set(refs) - set(preds))
        raise UsageError(f"clip sets differ; only in pred: {only_p}, "
                         f"only in ref: {only_r}")
    all_p, all_r = [], []
    for i, name in enumerate(sorted(refs)):
        offset = i * 1_000_000  # keep frames of different clips distinct
        for ev in preds[name]:
            all_p.append(EventLabel(ev.frame + offset, ev.class_id, ev.source_id,
                                    ev.azimuth_deg, ev.distance_m))
        for ev in refs[name]:
            all_r.append(EventLabel(ev.frame + offset, ev.class_id, ev.source_id,
                                    ev.azimuth_deg, ev.distance_m))
    report = compute_metrics(all_p, all_r)
    write_report(args.out, report)
    print(report.summary())
    return 0


def cmd_bench_scan(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",") if x]
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    if not lengths:
        raise UsageError("--lengths must name at least one length")
    rng = np.random.default_rng(args.seed)
    n = args.state
    rows = ["length,median_s,runs"]
    medians = {}
    for length in lengths:
        x = rng.standard_normal(length)
        a_bar = rng.uniform(0.1, 0.99, size=(length, n))
        b_bar = rng.standard_normal((length, n))
        c = rng.standard_normal((length, n))
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            ssm_scan(x, a_bar, b_bar, c, 0.5)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        medians[length] = med
        rows.append(f"{length},{med:.6f},{args.repeat}")
        print(f"length {length}: median {med * 1e3:.2f} ms over {args.repeat} runs")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(rows) + "\n")
    if len(lengths) >= 2:
        lo, hi = min(lengths), max(lengths)
        print(f"ratio time({hi})/time({lo}) = {medians[hi] / medians[lo]:.2f}")
    return 0


def cmd_count(args) -> int:
    cfg = load_config(args.config, overrides=args.set or [])
    params = count_params(cfg.model)
    macs = estimate_macs_parts(cfg.model, (7, 250, cfg.features.n_mels))
    print(f"params {params}")
    for key in ("encoder", "decoder", "heads", "total"):
        print(f"macs_{key} {macs[key]}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="stereoseld",
                     description="Stereo sound event localization and detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--min-events", type=int, default=1, dest="min_events")
    p.add_argument("--max-events", type=int, default=3, dest="max_events")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract feature tensors")
    p.add_argument("--in", required=True, dest="inp")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--acs", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True, dest="inp")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default="metrics_report.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-scan", help="time the scan kernel at several lengths")
    p.add_argument("--lengths", default="4096,8192")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("count", help="parameter and MAC accounting")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_count)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 1
    except (ConfigError, FileNotFoundError, tensorio.FormatError) as exc:
        log.error("%s", exc)
        return 1
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
