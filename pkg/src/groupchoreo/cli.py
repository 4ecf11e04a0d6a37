"""Command-line entry point.

Every command works inside one output directory (``--out``)::

    gen-data          out/train/*, out/test/*  (wav, mfea, gmot, traj per sequence)
    extract-features  <wav>... -> out/<stem>.mfea
    train-dbn         out/train -> out/dbn.ckpt, out/dbn_curve.tsv
    train-tcdiff      out/train -> out/tcdiff.ckpt, out/tcdiff_curve.tsv
    sample            out/test + checkpoints -> out/samples/*.gmot, *.traj
    evaluate          out/samples vs out/test -> out/metrics.txt, out/metrics.json
    gradcheck         -> out/gradcheck.txt

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import audio, dbn, fileio, metrics
from . import diffusion as df
from . import motion as mc
from .config import RunConfig, load_config
from .errors import FormatError
from .gradchecks import run_gradchecks
from .nnkit import NonFiniteError
from .synthetic import formation_positions, make_dataset

log = logging.getLogger("groupchoreo")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class NumericalFailure(RuntimeError):
    pass


def _stems(directory: Path, suffix: str) -> list[str]:
    stems = sorted(p.stem for p in directory.glob(f"*{suffix}"))
    if not stems:
        raise FileNotFoundError(f"no *{suffix} files in {directory}")
    return stems


def _load_pairs(directory: Path, kind: str):
    """Stacked music features with trajectories (kind='traj') or motion (kind='gmot')."""
    stems = _stems(directory, f".{kind}")
    music, target, fps = [], [], None
    for s in stems:
        feats = fileio.load_features(directory / f"{s}.mfea")
        if kind == "traj":
            obj = fileio.load_trajectory(directory / f"{s}.traj")
            target.append(obj.positions)
        else:
            obj = fileio.load_motion(directory / f"{s}.gmot")
            target.append(obj.data)
        if len(feats) != target[-1].shape[1]:
            raise ValueError(f"{s}: {len(feats)} feature frames vs {target[-1].shape[1]} motion frames")
        music.append(feats.frames)
        fps = obj.fps
    shapes = {t.shape for t in target}
    if len(shapes) != 1:
        raise ValueError(f"sequences in {directory} differ in shape: {sorted(shapes)}")
    return stems, np.stack(music), np.stack(target), fps


def _write_curve(path: Path, curve: list[dict]) -> None:
    keys = ["epoch"] + [k for k in curve[0] if k != "epoch"]
    lines = ["\t".join(keys)] + ["\t".join(f"{row[k]:.10g}" for k in keys) for row in curve]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    ds = make_dataset(cfg.n_train + cfg.n_test, cfg.synthetic_spec(), seed=cfg.seed, keep_samples=True)
    for split, idx in (("train", range(cfg.n_train)), ("test", range(cfg.n_train, len(ds)))):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for k, i in enumerate(idx):
            s = ds.samples[i]
            stem = d / f"seq_{k:04d}"
            audio.write_wav_file(stem.with_suffix(".wav"), s.clip)
            fileio.save_features(stem.with_suffix(".mfea"), s.music)
            fileio.save_motion(stem.with_suffix(".gmot"), s.motion)
            fileio.save_trajectory(stem.with_suffix(".traj"), s.trajectory)
    print(f"wrote {cfg.n_train} train and {cfg.n_test} test sequences to {out}")


def cmd_extract_features(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.inputs:
        raise ValueError("extract-features needs at least one WAV file")
    for path in map(Path, args.inputs):
        feats = audio.extract_features(audio.read_wav_file(path), cfg.fps)
        fileio.save_features(out / f"{path.stem}.mfea", feats)
        print(f"{path} -> {out / (path.stem + '.mfea')} ({len(feats)} frames, {int(feats.beats.sum())} beats)")


def cmd_train_dbn(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    _, music, traj, _ = _load_pairs(Path(args.data or out / "train"), "traj")
    cfg = _fit_length(cfg, music.shape[1])
    model = dbn.DbnModel(cfg.dbn_config(), seed=cfg.seed)
    result = dbn.train_dbn(model, music, traj, cfg.dbn_weights(), cfg.dbn_optim(), seed=cfg.seed)
    fileio.save_model(out / "dbn.ckpt", model)
    _write_curve(out / "dbn_curve.tsv", result.curve)
    first, last = result.curve[0]["total"], result.curve[-1]["total"]
    print(f"dbn: loss {first:.6f} -> {last:.6f} over {len(result.curve)} epochs")


def cmd_train_tcdiff(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    _, music, motion, fps = _load_pairs(Path(args.data or out / "train"), "gmot")
    cfg = _fit_length(cfg, music.shape[1])
    tc = cfg.tcdiff_config()
    tc.dancers = motion.shape[1]
    model = df.TcdiffModel(tc, seed=cfg.seed)
    schedule = df.make_schedule(cfg.schedule, cfg.T)
    result = df.train_tcdiff(
        model, music, motion, schedule, cfg.tcdiff_weights(), cfg.tcdiff_optim(), seed=cfg.seed, fps=fps
    )
    fileio.save_model(out / "tcdiff.ckpt", model)
    _write_curve(out / "tcdiff_curve.tsv", result.curve)
    first, last = result.curve[0]["simple"], result.curve[-1]["simple"]
    print(f"tcdiff: L_simple {first:.6f} -> {last:.6f} over {len(result.curve)} epochs")


def cmd_sample(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    data = Path(args.data or out / "test")
    stems = _stems(data, ".mfea")
    music = np.stack([fileio.load_features(data / f"{s}.mfea").frames for s in stems])
    tc_model = fileio.load_model(args.tcdiff or out / "tcdiff.ckpt")
    if not isinstance(tc_model, df.TcdiffModel):
        raise ValueError("--tcdiff checkpoint is not a TCDiff model")
    C = tc_model.config.dancers
    if args.trajectories == "data":
        traj = np.stack([fileio.load_trajectory(data / f"{s}.traj").positions for s in stems])
    else:
        nav = fileio.load_model(args.dbn or out / "dbn.ckpt")
        if not isinstance(nav, dbn.DbnModel):
            raise ValueError("--dbn checkpoint is not a DBN model")
        seeds = []
        for s in stems:
            p = data / f"{s}.traj"
            if p.exists():
                seeds.append(fileio.load_trajectory(p).positions[:, 0])
            else:
                xz = formation_positions(cfg.formation, C, 1.5)
                seeds.append(np.column_stack([xz[:, 0], np.full(C, 0.86), xz[:, 1]]))
        traj = dbn.rollout_batch(nav, music, np.stack(seeds), smooth=cfg.smooth)
    if traj.shape[1] != C:
        raise ValueError(f"trajectories have {traj.shape[1]} dancers, TCDiff model expects {C}")
    schedule = df.make_schedule(cfg.schedule, cfg.T)
    motion = df.sample_batch(tc_model, schedule, music, traj, seed=cfg.seed)
    if not np.isfinite(motion).all():
        raise NumericalFailure("sampler produced non-finite values")
    dest = out / "samples"
    dest.mkdir(parents=True, exist_ok=True)
    for s, m, t in zip(stems, motion, traj):
        fileio.save_motion(dest / f"{s}.gmot", mc.GroupMotionSequence(m, cfg.fps))
        fileio.save_trajectory(dest / f"{s}.traj", dbn.TrajectorySequence(t, cfg.fps))
    print(f"sampled {len(stems)} sequences into {dest}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    gen_dir = Path(args.generated or out / "samples")
    ref_dir = Path(args.reference or out / "test")
    stems = _stems(gen_dir, ".gmot")
    gen = [fileio.load_motion(gen_dir / f"{s}.gmot") for s in stems]
    music = [fileio.load_features(ref_dir / f"{s}.mfea") for s in stems]
    ref = [fileio.load_motion(ref_dir / f"{s}.gmot") for s in _stems(ref_dir, ".gmot")]
    report = metrics.evaluate(
        [g.data for g in gen], [r.data for r in ref], music, mc.load_skeleton(), gen[0].fps,
        tif_radius=cfg.tif_radius, sigma=cfg.mmc_sigma,
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report.to_text())
    (out / "metrics.json").write_text(report.to_json())
    sys.stdout.write(report.to_text())


def cmd_gradcheck(cfg: RunConfig, args) -> None:
    reports = run_gradchecks(seed=cfg.seed)
    lines = [f"{name}\tmax_rel_error={r.max_rel_error:.3e}\t{'PASS' if r.passed else 'FAIL'}" for name, r in reports.items()]
    text = "\n".join(lines) + "\n"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    failed = [n for n, r in reports.items() if not r.passed]
    if failed:
        raise NumericalFailure(f"gradient check failed for {', '.join(failed)}")


def _fit_length(cfg: RunConfig, frames: int) -> RunConfig:
    if frames != cfg.frames:
        log.info("data has %d frames; overriding frames=%d", frames, cfg.frames)
        cfg.frames = frames
    return cfg


COMMANDS = {
    "gen-data": cmd_gen_data,
    "extract-features": cmd_extract_features,
    "train-dbn": cmd_train_dbn,
    "train-tcdiff": cmd_train_tcdiff,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="run", help="output directory (default: run)")
    common.add_argument("--preset", choices=("desk", "full"), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="groupchoreo", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic train/test corpus")
    p = sub.add_parser("extract-features", parents=[common], help="WAV -> MFEA feature files")
    p.add_argument("inputs", nargs="*")
    for name in ("train-dbn", "train-tcdiff"):
        p = sub.add_parser(name, parents=[common], help=f"train the {name[6:].upper()} stage")
        p.add_argument("--data", help="training directory (default: OUT/train)")
    p = sub.add_parser("sample", parents=[common], help="trajectories, then motion, for each test sequence")
    p.add_argument("--data", help="directory of .mfea (and optional .traj seeds); default OUT/test")
    p.add_argument("--dbn", help="DBN checkpoint (default OUT/dbn.ckpt)")
    p.add_argument("--tcdiff", help="TCDiff checkpoint (default OUT/tcdiff.ckpt)")
    p.add_argument("--trajectories", choices=("dbn", "data"), default="dbn",
                   help="roll out the DBN, or condition on the .traj files in --data")
    p = sub.add_parser("evaluate", parents=[common], help="metrics report for sampled motion")
    p.add_argument("--generated", help="default OUT/samples")
    p.add_argument("--reference", help="default OUT/test")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer and loss")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        COMMANDS[args.command](cfg, args)
    except (NonFiniteError, NumericalFailure, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FormatError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
