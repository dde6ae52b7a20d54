"""Command-line entry point: ``latentvad <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, RunManifest, build_config, require_data
from .data import (SyntheticSpec, Video, compute_background, generate_dataset, load_split, load_video,
                   preprocess, subtract_background, write_split)
from .data.io import iter_raw_frames
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger("latentvad")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", help="named preset (ucsd_ped1, ucsd_ped2, avenue, shanghaitech, moving_mnist)")
    p.add_argument("--seed", type=int, help="random seed (overrides config seeds)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset root containing <split>/<video_id>/ frames")
    p.add_argument("--metric", help="latent_mse | latent_cosine | pixel_prediction | pixel_reconstruction")
    p.add_argument("--window", type=int, help="sliding-window size for score normalisation")
    p.add_argument("--plots", action="store_true", help="also write PNG figures")
    p.add_argument("-v", "--verbose", action="store_true")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint file written by 'train'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentvad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints + loss log")
    _common(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("score", help="per-frame anomaly scores for every test video")
    _common(p, checkpoint=True)
    p.add_argument("--split", help="split to score (default: config test_split)")
    p.add_argument("--localize", action="store_true", help="also write high-error regions (uses the decoder)")
    p.add_argument("--quantile", type=float, default=0.99, help="per-frame error quantile used as threshold")
    p.add_argument("--min-area", type=int, default=25)

    p = sub.add_parser("eval", help="frame-level AUC of score CSVs against labels")
    _common(p)
    p.add_argument("--scores", nargs="+", required=True, help="score CSV(s); several files = several runs")
    p.add_argument("--labels", help="labels CSV (video_id,frame_index,label)")
    p.add_argument("--raw", action="store_true", help="use raw instead of normalised scores")

    p = sub.add_parser("sweep", help="AUC under brightness / rain / blur distortions")
    _common(p, checkpoint=True)

    p = sub.add_parser("lowfps", help="train and test on every d-th frame")
    _common(p)
    p.add_argument("--d", type=int, nargs="+", help="frame gaps to evaluate")

    p = sub.add_parser("bench", help="streaming throughput, cached vs naive re-encoding")
    _common(p, checkpoint=True)
    p.add_argument("--frames", type=int, default=200, help="frames to stream")
    p.add_argument("--warmup", type=int, default=20)

    p = sub.add_parser("synth", help="write a synthetic moving-objects dataset")
    _common(p)

    p = sub.add_parser("mnist-exp", help="train on normal moving digits, AUC per anomaly type")
    _common(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("stream", help="score frames online as they arrive")
    _common(p, checkpoint=True)
    p.add_argument("--input", required=True,
                   help="frame directory, video file, or '-' for raw RGB uint8 frames on stdin")
    p.add_argument("--frame-size", help="HxW of raw stdin frames, e.g. 240x360")
    return parser


def _config(args) -> RunConfig:
    over: Dict = {"preset": args.preset, "out": args.out, "data_root": args.data, "metric": args.metric}
    if args.seed is not None:
        over["seeds"] = [args.seed]
    if args.window is not None:
        over["normalization"] = args.window
        over["window"] = args.window
    cfg = build_config(file=args.config, overrides=over)
    if getattr(args, "epochs", None):
        sw = min(cfg.schedule.phase_switch_epoch, max(1, args.epochs // 2))
        cfg.schedule = replace(cfg.schedule, total_epochs=args.epochs, phase_switch_epoch=sw)
    return cfg


def _videos(cfg: RunConfig, split: str, size=None) -> List[Video]:
    size = tuple(size or cfg.model.input_size)
    if cfg.data_root is not None:
        name = cfg.train_split if split == "train" else cfg.test_split
        return load_split(cfg.data_root, name, size)
    spec = cfg.synthetic
    if split == "train":
        return generate_dataset(replace(spec, digit_split="train"), cfg.n_train, tag="train-")
    from .evaluation import default_anomaly_specs

    vids = generate_dataset(replace(spec, digit_split="test", seed=spec.seed + 1), cfg.n_test, tag="test-normal-")
    for i, (name, a) in enumerate(default_anomaly_specs(spec).items()):
        vids += generate_dataset(replace(a, seed=spec.seed + 100 + i), cfg.n_test, tag=f"test-{name}-")
    return vids


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    return out


def _write_rows(path: Path, rows: List[Dict], fields: Sequence[str]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def cmd_train(args) -> int:
    from .plots import plot_loss
    from .training import train

    cfg = _config(args)
    require_data(cfg, ("train",))
    out = _out_dir(cfg)
    man = RunManifest(cfg.hash(), "train")
    videos = _videos(cfg, "train")
    bg = compute_background(videos)
    sub = [subtract_background(v, bg) for v in videos]
    res = train(sub, cfg.model, cfg.schedule, batch_size=cfg.batch_size, seed=cfg.seed, out_dir=out,
                checkpoint_every=cfg.checkpoint_every, background=bg,
                max_steps_per_epoch=cfg.max_steps_per_epoch)
    man.checkpoints = {k: str(v) for k, v in res.checkpoints.items()}
    man.add(out / "loss.csv")
    man.add(out / "config.yaml")
    if args.plots:
        man.add(plot_loss(res.reports, out / "loss.png"))
    man.write(out)
    print(f"checkpoint {res.checkpoints['last']}")
    return EXIT_OK


def _load_for(cfg: RunConfig, args):
    model, bg, _ = load_checkpoint(args.checkpoint)
    explicit = args.config is not None or args.preset is not None
    if explicit and tuple(cfg.model.input_size) != tuple(model.cfg.input_size):
        raise ConfigError([f"model.input_size: config expects {tuple(cfg.model.input_size)} but checkpoint "
                           f"was trained on {tuple(model.cfg.input_size)}"])
    if bg is None:
        raise ConfigError([f"checkpoint {args.checkpoint}: no background model stored"])
    if bg.size != model.cfg.input_size:
        raise ConfigError([f"background size {bg.size} != model input size {model.cfg.input_size}"])
    cfg.model = model.cfg
    return model, bg


def cmd_score(args) -> int:
    from .plots import plot_regions, plot_scores
    from .scoring import localize_video, score_video, write_regions_csv, write_scores_csv

    cfg = _config(args)
    if args.split:
        cfg.test_split = args.split
    require_data(cfg, ("test",))
    model, bg = _load_for(cfg, args)
    out = _out_dir(cfg)
    man = RunManifest(cfg.hash(), "score", checkpoints={"model": str(args.checkpoint)})
    window = cfg.normalization if isinstance(cfg.normalization, int) else None
    videos = _videos(cfg, "test", model.cfg.input_size)
    series = []
    regions_path = out / "regions.csv"
    if args.localize and regions_path.exists():
        regions_path.unlink()
    for v in videos:
        sv = subtract_background(v, bg)
        s = score_video(model, sv, cfg.metric, window=window, normalize=cfg.normalization != "none")
        series.append(s)
        if args.plots and len(s):
            man.add(plot_scores(s, v.labels, out / "plots" / f"scores_{v.video_id}.png"))
        if args.localize:
            fr = localize_video(model, sv, quantile=args.quantile, min_area=args.min_area)
            write_regions_csv(regions_path, v.video_id, fr)
            if len(s):
                best = int(np.argmax(s.raw_scores))
                pos = int(s.positions[best])
                p = plot_regions(v.frames[pos], fr[best][1], out / "regions" / f"{v.video_id}_{fr[best][0]:06d}.png",
                                 title=f"{v.video_id} frame {fr[best][0]}")
                man.add(p)
    write_scores_csv(out / "scores.csv", series)
    man.add(out / "scores.csv")
    if args.localize:
        man.add(regions_path)
    man.write(out)
    print(f"scores {out / 'scores.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data.io import read_labels
    from .evaluation import LabeledScores, frame_auc, multi_run_auc
    from .scoring import read_scores_csv

    cfg = _config(args)
    if args.labels:
        label_path = Path(args.labels)
    elif cfg.data_root:
        label_path = Path(cfg.data_root) / cfg.test_split / "labels.csv"
    else:
        raise ConfigError(["labels: give --labels or --data with a labels.csv in the test split"])
    for p in [label_path, *map(Path, args.scores)]:
        if not p.exists():
            raise ConfigError([f"file not found: {p}"])
    labels = read_labels(label_path)
    aucs = []
    for path in args.scores:
        sc, lab = [], []
        for s in read_scores_csv(path):
            if s.video_id not in labels:
                raise ConfigError([f"labels: no labels for video {s.video_id!r}"])
            vl = labels[s.video_id]
            sc.append(s.raw_scores if args.raw else s.normalized_scores)
            lab.append(vl[np.minimum(s.frame_indices, len(vl) - 1)])
        aucs.append(frame_auc(LabeledScores(np.concatenate(sc), np.concatenate(lab))))
    res = multi_run_auc(aucs)
    if args.out:
        out = _out_dir(cfg)
        _write_rows(out / "eval.csv", [dict(scores=";".join(args.scores), metric=cfg.metric, auc=res.auc,
                                            ci95=res.ci95_halfwidth)], ["scores", "metric", "auc", "ci95"])
        man = RunManifest(cfg.hash(), "eval", outputs=[str(out / "eval.csv")])
        man.write(out)
    print(f"auc {res.auc:.6f} ci95 {res.ci95_halfwidth:.6f} runs {res.n_runs}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .evaluation import robustness_sweep
    from .plots import plot_sweep

    cfg = _config(args)
    require_data(cfg, ("test",))
    model, bg = _load_for(cfg, args)
    out = _out_dir(cfg)
    videos = _videos(cfg, "test", model.cfg.input_size)
    res = robustness_sweep(model, bg, videos, cfg.brightness, cfg.rain, cfg.sweep_metrics, cfg.blur,
                           seed=cfg.seed, normalization=cfg.normalization)
    rows = res.rows()
    man = RunManifest(cfg.hash(), "sweep", checkpoints={"model": str(args.checkpoint)})
    man.add(_write_rows(out / "sweep.csv", rows, ["brightness", "rain", "blur", "metric", "auc", "ci95"]))
    if args.plots:
        man.add(plot_sweep(rows, out / "sweep.png"))
    man.write(out)
    for r in rows:
        print(f"brightness={r['brightness']} rain={r['rain']} blur={r['blur']} {r['metric']} auc={r['auc']:.4f}")
    return EXIT_OK


def cmd_lowfps(args) -> int:
    from .evaluation import lowfps_experiment
    from .plots import plot_lowfps

    cfg = _config(args)
    if args.d:
        cfg.d_values = args.d
    require_data(cfg, ("train", "test"))
    out = _out_dir(cfg)
    train_v, test_v = _videos(cfg, "train"), _videos(cfg, "test")
    res = lowfps_experiment(train_v, test_v, cfg.d_values, cfg.model, cfg.schedule, cfg.sweep_metrics,
                            seeds=cfg.seeds, normalization=cfg.normalization, batch_size=cfg.batch_size,
                            max_steps_per_epoch=cfg.max_steps_per_epoch)
    rows = res.rows()
    man = RunManifest(cfg.hash(), "lowfps")
    man.add(_write_rows(out / "lowfps.csv", rows, ["d", "metric", "auc", "ci95"]))
    if args.plots:
        man.add(plot_lowfps(rows, out / "lowfps.png"))
    man.write(out)
    for r in rows:
        print(f"d={r['d']} {r['metric']} auc={r['auc']:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .streaming import benchmark

    cfg = _config(args)
    require_data(cfg, ("test",))
    model, bg = _load_for(cfg, args)
    out = _out_dir(cfg)
    videos = _videos(cfg, "test", model.cfg.input_size)
    frames = np.concatenate([subtract_background(v, bg).frames for v in videos])[:args.frames]
    metric = cfg.metric if cfg.metric.startswith("latent") else "latent_mse"
    rep = benchmark(model, frames, warmup_frames=args.warmup, metric=metric)
    text = "\n\n".join(r.as_text() for r in (rep["cached"], rep["naive"])) + f"\n\nspeedup: {rep['speedup']:.3f}\n"
    (out / "bench.txt").write_text(text)
    RunManifest(cfg.hash(), "bench", checkpoints={"model": str(args.checkpoint)},
                outputs=[str(out / "bench.txt")]).write(out)
    print(text, end="")
    return EXIT_OK


def dataset_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "config.yaml"):
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def cmd_synth(args) -> int:
    cfg = _config(args)
    if cfg.synthetic is None:
        cfg.synthetic = SyntheticSpec(canvas_size=cfg.model.input_size)
    cfg.data_root = None
    out = _out_dir(cfg)
    man = RunManifest(cfg.hash(), "synth")
    for split in ("train", "test"):
        for p in write_split(out, split, _videos(cfg, split)):
            if p.name == "labels.csv":
                man.add(p)
    man.extra["n_files"] = sum(1 for _ in out.rglob("*.png"))
    digest = dataset_hash(out)
    man.extra["dataset_sha256"] = digest
    man.write(out)
    print(f"dataset {out} sha256 {digest}")
    return EXIT_OK


def cmd_mnist_exp(args) -> int:
    from .evaluation import default_anomaly_specs, frame_grid, movingmnist_experiment
    from .plots import plot_frame_grid

    cfg = _config(args)
    if cfg.synthetic is None:
        cfg.synthetic = SyntheticSpec(canvas_size=cfg.model.input_size)
    out = _out_dir(cfg)
    metrics = list(dict.fromkeys([cfg.metric, *cfg.sweep_metrics]))
    res = movingmnist_experiment(cfg.synthetic, cfg.model, cfg.schedule, n_train=cfg.n_train,
                                 n_test_normal=cfg.n_test, n_test_anomalous=cfg.n_test, metrics=metrics,
                                 seeds=cfg.seeds, normalization=cfg.normalization, batch_size=cfg.batch_size,
                                 max_steps_per_epoch=cfg.max_steps_per_epoch)
    man = RunManifest(cfg.hash(), "mnist-exp")
    man.checkpoints["model"] = str(save_checkpoint(out / "model.pt", res.model, res.background))
    man.add(_write_rows(out / "mnist_auc.csv", res.rows(), ["axis", "metric", "auc", "ci95", "n_runs"]))
    if args.plots:
        grids, labels = [], []
        for name, vids in res.test_sets.items():
            for v in (vids[0], vids[-1]):
                if v.video_id in labels:
                    continue
                grids.append(frame_grid(res.model, v, res.background))
                labels.append(v.video_id)
        man.add(plot_frame_grid(grids, labels, out / "frame_grid.png"))
    man.write(out)
    for r in res.rows():
        print(f"{r['axis']} {r['metric']} auc={r['auc']:.4f}")
    return EXIT_OK


def _stdin_frames(size_text: str):
    try:
        h, w = (int(v) for v in size_text.lower().split("x"))
    except (AttributeError, ValueError):
        raise ConfigError([f"frame-size: expected HxW, got {size_text!r}"])
    n = h * w * 3
    buf = sys.stdin.buffer
    i = 0
    while True:
        chunk = buf.read(n)
        if len(chunk) < n:
            return
        yield i, np.frombuffer(chunk, dtype=np.uint8).reshape(h, w, 3)
        i += 1


def cmd_stream(args) -> int:
    from .streaming import StreamScorer

    cfg = _config(args)
    model, bg = _load_for(cfg, args)
    if args.input == "-":
        source = _stdin_frames(args.frame_size)
    else:
        if not Path(args.input).exists():
            raise ConfigError([f"input: {args.input} does not exist"])
        source = iter_raw_frames(Path(args.input))
    metric = cfg.metric if cfg.metric.startswith("latent") else "latent_cosine"
    scorer = StreamScorer(model, metric, window=cfg.window, background=bg)
    out = _out_dir(cfg) if args.out else None
    fh = open(out / "stream.csv", "w") if out else sys.stdout
    try:
        fh.write("frame_index,raw_score,normalized\n")
        for _, raw in source:
            r = scorer.push(raw, raw=True)
            if r is not None:
                fh.write(f"{r[0]},{r[1]!r},{r[2]!r}\n")
                fh.flush()
    except BrokenPipeError:
        # reader went away (e.g. piped into head); stop quietly
        sys.stdout = open(os.devnull, "w")
    finally:
        scorer.close()
        if out:
            fh.close()
    if out:
        man = RunManifest(cfg.hash(), "stream", checkpoints={"model": str(args.checkpoint)},
                          outputs=[str(out / "stream.csv")])
        man.write(out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "score": cmd_score, "eval": cmd_eval, "sweep": cmd_sweep, "lowfps": cmd_lowfps,
            "bench": cmd_bench, "synth": cmd_synth, "mnist-exp": cmd_mnist_exp, "stream": cmd_stream}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
