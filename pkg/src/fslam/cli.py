"""Command-line entry point: ``fslam <subcommand>``.

Subcommands follow the experiment stages: ``synth`` writes a synthetic
sequence, ``distort`` applies the exposure transform, ``train-vocab`` builds
a vocabulary, ``run-slam`` runs the pipeline and ``eval`` scores a
trajectory against ground truth.

Exit codes: 0 success, 1 runtime or input error, 2 invalid configuration,
3 tracking never initialized in any run.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .dataset_io import generate_synthetic, load_scene_config, render_frame, SyntheticScene
from .errors import ConfigError, CorpusTooSmall, FslamError
from .evaluation import (MetricReport, aggregate, ate_details, compute_rpe, default_lengths, evaluate,
                         format_report, write_plot, write_report)
from .features import N_BITS, Descriptors, FeatureFile, write_feature_file
from .imaging import GAMMA_GRID, GammaParam, distort_sequence, write_image
from .io_utils import atomic_write_text
from .pipeline import bootstrap_vocabulary, run_sequence
from .place_recognition import Vocabulary, train_vocabulary
from .trajectory import format_kitti, read_trajectory, write_trajectory

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NO_INIT = 3

log = logging.getLogger("fslam")


def _fail(code: int, msg: str) -> int:
    print(f"fslam: error: {msg}", file=sys.stderr)
    return code


# ----------------------------------------------------------------------------
# run-slam
# ----------------------------------------------------------------------------


def _detect_layout(path: Path) -> str:
    if (path / "mav0").is_dir() or (path / "cam0" / "data.csv").is_file():
        return "euroc"
    return "kitti"


def _run_config(args) -> RunConfig:
    base = load_run_config(args.config).to_dict() if args.config else {}
    if args.dataset is not None:
        if args.dataset == "synthetic":
            base["source"] = "synthetic"
        else:
            base["dataset"] = args.dataset
            base["source"] = args.source or _detect_layout(Path(args.dataset))
    elif args.source:
        base["source"] = args.source
    for key in ("sequence", "vocab", "gamma", "runs", "seed", "out", "max_frames"):
        v = getattr(args, key)
        if v is not None:
            base[key] = v
    if args.features is not None:
        base["features"] = args.features
        base["descriptors"] = "external"
    if args.no_loop_closing:
        base["loop_closing"] = False
    return RunConfig.from_dict(base).validate()


def _load_vocabulary(cfg: RunConfig, first_descriptors: Descriptors | None) -> Vocabulary | None:
    if cfg.vocab is None:
        return None
    try:
        vocab = Vocabulary.load(cfg.vocab)
    except (OSError, FslamError, ValueError) as exc:
        raise ConfigError(f"cannot load vocabulary {cfg.vocab}: {exc}") from None
    if first_descriptors is not None and (vocab.kind != first_descriptors.kind
                                          or vocab.length != first_descriptors.length):
        raise ConfigError(f"vocabulary is {vocab.kind}/{vocab.length} but descriptors are "
                          f"{first_descriptors.kind}/{first_descriptors.length}")
    return vocab


def cmd_run_slam(args) -> int:
    try:
        cfg = _run_config(args)
        source = cfg.open_source()
        features = cfg.feature_file()
        first = None
        if features is not None:
            first = features.read(features.frame_ids[0])[1] if features.frame_ids else None
        elif cfg.source == "synthetic" and not (cfg.render or cfg.gamma != 1.0):
            first = source.frame(0).descriptors
        elif cfg.vocab is not None:
            first = Descriptors.binary(np.zeros((0, N_BITS // 8), np.uint8), N_BITS)
        vocab = _load_vocabulary(cfg, first)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except FslamError as exc:
        return _fail(EXIT_ERROR, str(exc))

    out = Path(cfg.out)
    reports = []
    status_lines = []
    any_init = False
    for i in range(cfg.runs):
        seed = cfg.seed + i
        sys_cfg = cfg.system_config(seed)
        run_vocab = vocab
        if run_vocab is None and cfg.loop_closing:
            run_vocab = bootstrap_vocabulary(source, sys_cfg, features)
        try:
            res = run_sequence(source, sys_cfg, run_vocab, features, cfg.max_frames)
        except FslamError as exc:
            return _fail(EXIT_ERROR, f"run {i}: {exc}")
        run_dir = out / f"run_{i}"
        write_trajectory(res.trajectory, run_dir / "trajectory.txt", "tum")
        write_trajectory(res.keyframes, run_dir / "keyframes.txt", "tum")
        any_init |= res.initialized
        line = (f"run_{i}: seed={seed} initialized={res.initialized} tracked={len(res.trajectory)}/{res.n_frames} "
                f"keyframes={len(res.keyframes)} loops={res.loops} lost={len(res.lost_frames)}")
        gt = source.ground_truth
        if gt is not None and len(res.trajectory) >= 3:
            try:
                lengths = cfg.rpe_lengths or default_lengths(gt)
                rep = evaluate(res.trajectory, gt, monocular=True, lengths=lengths, config=source.name)
                write_report(rep, run_dir / "report.txt")
                write_plot(res.trajectory, gt, run_dir / "trajectory.svg",
                           ate_details(res.trajectory, gt).alignment)
                reports.append(rep)
                line += f" ate={rep.ate_rmse:.6g} coverage={rep.coverage:.4f}"
            except FslamError as exc:
                line += f" eval-failed=({exc})"
        status_lines.append(line)
        print(line)
    summary = "\n".join(status_lines) + "\n"
    if reports:
        summary += "\n" + format_report(aggregate(reports))
    atomic_write_text(out / "summary.txt", summary)
    if not any_init:
        return _fail(EXIT_NO_INIT, "tracking never initialized")
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        times = None
        if args.times:
            times = np.loadtxt(args.times, ndmin=1, dtype=float)
        est = read_trajectory(args.estimate)
        ref = read_trajectory(args.reference, times)
        monocular = not args.rigid
        ate = ate_details(est, ref, monocular, args.max_dt)
        lengths = args.lengths or default_lengths(ref)
        try:
            rpe = compute_rpe(est, ref, lengths, args.max_dt, ate.alignment.scale)
        except FslamError as exc:
            print(f"fslam: warning: RPE unavailable: {exc}", file=sys.stderr)
            rpe = (None, None)
        rep = MetricReport(ate.rmse, rpe[0], rpe[1], len(ate.i_ref) / len(ref))
    except FslamError as exc:
        return _fail(EXIT_ERROR, str(exc))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_ERROR, f"cannot read trajectory: {exc}")
    text = format_report(rep)
    print(text, end="")
    if args.out:
        atomic_write_text(args.out, text)
    if args.plot:
        write_plot(est, ref, args.plot, ate.alignment)
    return EXIT_OK


# ----------------------------------------------------------------------------
# distort
# ----------------------------------------------------------------------------


def cmd_distort(args) -> int:
    gammas = args.gamma or list(GAMMA_GRID)
    try:
        for g in gammas:
            GammaParam(g)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        for g in gammas:
            dst = Path(args.output) if len(gammas) == 1 else Path(args.output) / f"gamma_{g:g}"
            n = distort_sequence(args.input, dst, g, args.workers)
            print(f"gamma {g:g}: {n} images -> {dst}")
    except FslamError as exc:
        return _fail(EXIT_ERROR, str(exc))
    return EXIT_OK


# ----------------------------------------------------------------------------
# train-vocab
# ----------------------------------------------------------------------------


def _read_corpus(path: Path):
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.dtype == np.uint8:
            return Descriptors.binary(arr)
        return Descriptors.real(arr)
    ff = FeatureFile(path)
    return [ff.read(fid)[1] for fid in ff.frame_ids]


def cmd_train_vocab(args) -> int:
    if args.k < 2 or args.L < 1:
        return _fail(EXIT_CONFIG, "need k >= 2 and L >= 1")
    try:
        corpus = _read_corpus(Path(args.corpus))
    except (OSError, FslamError, ValueError) as exc:
        return _fail(EXIT_ERROR, f"cannot read corpus {args.corpus}: {exc}")
    try:
        vocab = train_vocabulary(corpus, args.k, args.L, args.seed)
    except CorpusTooSmall as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except FslamError as exc:
        return _fail(EXIT_ERROR, str(exc))
    vocab.save(args.out)
    n_words = int(np.sum(vocab.is_leaf))
    print(f"vocabulary: k={args.k} L={args.L} words={n_words} -> {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        scene = load_scene_config(args.config) if args.config else SyntheticScene()
    except (ConfigError, OSError, ValueError, TypeError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    src = generate_synthetic(scene, args.seed)
    out = Path(args.out)
    img_dir = out / "image_0"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_ERROR, f"cannot create {img_dir}: {exc}")
    frames = {}
    for i in range(len(src)):
        d = src.frame(i)
        frames[i] = (d.keypoints, d.descriptors)
        write_image(img_dir / f"{i:06d}.png", render_frame(src.world, i))
    K = scene.intrinsics
    atomic_write_text(out / "calib.txt", f"P0: {K.fx:.12g} 0 {K.cx:.12g} 0 0 {K.fy:.12g} {K.cy:.12g} 0 0 0 1 0\n")
    atomic_write_text(out / "times.txt", "".join(f"{t:.9f}\n" for t in src.timestamps))
    atomic_write_text(out / "poses.txt", format_kitti(src.ground_truth))
    write_trajectory(src.ground_truth, out / "groundtruth_tum.txt", "tum")
    write_feature_file(out / "features.fslf", frames, version=2)
    print(f"synthetic {scene.path}: {len(src)} frames -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fslam", description="Monocular feature-based SLAM and evaluation harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run-slam", help="run the SLAM pipeline")
    r.add_argument("--config", help="YAML run configuration")
    r.add_argument("--dataset", help="dataset root directory, or 'synthetic'")
    r.add_argument("--source", choices=["kitti", "euroc", "synthetic", "feature-file"])
    r.add_argument("--sequence")
    r.add_argument("--features", help="FSLF file with external features")
    r.add_argument("--vocab", help="FSLV vocabulary file")
    r.add_argument("--gamma", type=float)
    r.add_argument("--runs", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--max-frames", dest="max_frames", type=int)
    r.add_argument("--no-loop-closing", action="store_true")
    r.set_defaults(func=cmd_run_slam)

    e = sub.add_parser("eval", help="score a trajectory against ground truth")
    e.add_argument("estimate")
    e.add_argument("reference")
    e.add_argument("--times", help="timestamps for a KITTI-format reference (one per line)")
    e.add_argument("--rigid", action="store_true", help="SE(3) alignment instead of Sim(3)")
    e.add_argument("--lengths", type=float, nargs="+", help="RPE path lengths")
    e.add_argument("--max-dt", dest="max_dt", type=float, default=0.01)
    e.add_argument("--out", help="report file")
    e.add_argument("--plot", help="SVG top-down plot file")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("distort", help="gamma-transform an image directory")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--gamma", type=float, action="append",
                   help="repeatable; default is the full grid, one subdirectory per value")
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_distort)

    t = sub.add_parser("train-vocab", help="train a vocabulary tree")
    t.add_argument("corpus", help="FSLF feature file (one document per frame) or .npy descriptor matrix")
    t.add_argument("--k", type=int, default=10)
    t.add_argument("--L", type=int, default=6)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_vocab)

    s = sub.add_parser("synth", help="write a synthetic sequence in KITTI layout plus an FSLF feature file")
    s.add_argument("--config", help="YAML scene description")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
