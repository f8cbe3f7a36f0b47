"""Command-line entry point: dataset generation, training, evaluation, and
rollout rendering.

Every subcommand is deterministic given its full flag set (including
--seed), echoes its effective configuration into the output directory, and
writes files to temporary names before atomically renaming them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import env as E
from . import metrics as M
from .baselines import (
    BOConfig,
    SAConfig,
    bo_assemble,
    greedy_oracle_assemble,
    random_assemble,
    sa_assemble,
)
from .fan import FANConfig, fan_policy, load_model
from .fragmenter import (
    Dataset,
    DatasetError,
    GeneratorConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .train import TrainConfig, train_loop

METHODS = ("fan", "sa", "bo", "oracle", "random")


class CliError(Exception):
    pass


def _write_atomic(path: str, data):
    tmp = path + f".tmp{os.getpid()}"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _echo_config(out_dir: str, name: str, payload: dict):
    os.makedirs(out_dir, exist_ok=True)
    _write_atomic(os.path.join(out_dir, name), json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ generate

def cmd_generate(args) -> int:
    cfg = GeneratorConfig(
        shape=args.shape,
        n_samples=args.n,
        k=args.k,
        num_bins=args.bins,
        mode=args.mode,
        scenario=args.scenario,
        resolution=args.resolution,
        seed=args.seed,
    )
    dataset = generate_dataset(cfg)
    parent = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".gen-", dir=parent)
    try:
        save_dataset(dataset, tmp)
        if os.path.isdir(args.out):
            raise CliError(f"output directory already exists: {args.out}")
        os.rename(tmp, args.out)
    finally:
        if os.path.isdir(tmp):
            import shutil

            shutil.rmtree(tmp)
    counts = {s: len(dataset.split_ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(dataset.episodes)} episodes to {args.out} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


# --------------------------------------------------------------------- train

def cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    fan_cfg = FANConfig(resolution=dataset.config.resolution, num_bins=dataset.config.num_bins)
    train_cfg = TrainConfig(
        batch_size=args.batch,
        lr=args.lr,
        epochs=args.epochs,
        pool_levels=args.levels,
        seed=args.seed,
    )
    _echo_config(args.out, "run_config.json", {
        "command": "train",
        "dataset": args.dataset,
        "fan": dataclasses.asdict(fan_cfg),
        "train": dataclasses.asdict(train_cfg),
    })
    result = train_loop(dataset, fan_cfg, train_cfg, out_dir=args.out)
    print(f"checkpoint: {result.checkpoint_path}.ckpt ({len(result.history)} epochs)")
    return 0


# ---------------------------------------------------------------------- eval

def _eval_episode(payload):
    episode, method, seed, stride, checkpoint = payload
    start = time.perf_counter()
    if method == "fan":
        params = load_model(checkpoint)
        rollout = E.rollout(episode, fan_policy(params))
        elapsed = time.perf_counter() - start
    elif method == "sa":
        res = sa_assemble(episode, SAConfig(seed=seed))
        rollout, elapsed = res.rollout, res.wall_time_sec
    elif method == "bo":
        res = bo_assemble(episode, BOConfig(seed=seed))
        rollout, elapsed = res.rollout, res.wall_time_sec
    elif method == "oracle":
        res = greedy_oracle_assemble(episode, stride=stride)
        rollout, elapsed = res.rollout, res.wall_time_sec
    elif method == "random":
        res = random_assemble(episode, seed=seed)
        rollout, elapsed = res.rollout, res.wall_time_sec
    else:
        raise CliError(f"unknown method {method!r}")
    record = M.EvalRecord(episode.episode_id, rollout.cov, rollout.iou, elapsed)
    return record, rollout.log


def cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    episodes = dataset.by_split(args.split) if args.split != "all" else dataset.episodes
    if not episodes:
        raise CliError(f"dataset has no {args.split!r} episodes")
    if args.method == "fan":
        if not args.checkpoint:
            raise CliError("--checkpoint is required for method=fan")
        params = load_model(args.checkpoint)  # fail fast on config mismatch
        if params.config.resolution != dataset.config.resolution:
            raise CliError(
                f"checkpoint resolution {params.config.resolution} != dataset "
                f"{dataset.config.resolution}"
            )
        if params.config.num_bins != dataset.config.num_bins:
            raise CliError(
                f"checkpoint bins {params.config.num_bins} != dataset {dataset.config.num_bins}"
            )
    _echo_config(args.out, "run_config.json", {
        "command": "eval",
        "dataset": args.dataset,
        "method": args.method,
        "split": args.split,
        "seed": args.seed,
        "stride": args.stride,
        "checkpoint": args.checkpoint,
        "workers": args.workers,
        "sa": dataclasses.asdict(SAConfig()),
        "bo": dataclasses.asdict(BOConfig()),
    })

    payloads = [
        (ep, args.method, int(np.random.SeedSequence([args.seed, ep.episode_id]).generate_state(1)[0]),
         args.stride, args.checkpoint)
        for ep in episodes
    ]
    if args.workers > 1:
        import multiprocessing as mp

        with mp.Pool(args.workers) as pool:
            results = pool.map(_eval_episode, payloads)
    else:
        results = [_eval_episode(p) for p in payloads]
    order = np.argsort([r.episode_id for r, _ in results])
    results = [results[i] for i in order]

    records = [r for r, _ in results]
    per_episode = "episode_id,cov,iou,time_sec\n" + "".join(
        f"{r.episode_id},{r.cov:.6f},{r.iou:.6f},{r.wall_time_sec:.4f}\n" for r in records
    )
    _write_atomic(os.path.join(args.out, "episodes.csv"), per_episode)
    report = M.report_csv([
        {"method": args.method, "shape": dataset.config.shape, "records": records}
    ])
    _write_atomic(os.path.join(args.out, "report.csv"), report)
    if args.save_logs:
        logdir = os.path.join(args.out, "rollouts")
        os.makedirs(logdir, exist_ok=True)
        for record, log in results:
            _write_atomic(os.path.join(logdir, f"ep_{record.episode_id:05d}.csv"),
                          E.rollout_log_csv(log))
    agg = M.aggregate(records)
    print(f"{args.method} on {len(records)} episodes: "
          f"Cov@0.95={agg['Cov@0.95']:.3f} Cov@0.90={agg['Cov@0.90']:.3f} "
          f"Cov={agg['Cov']:.3f} IoU={agg['IoU']:.3f} time={agg['time_sec']:.1f}s")
    return 0


# -------------------------------------------------------------------- render

def _pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes()


def _frame(current: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Current mask in white over the target outline in gray (row 0 at top)."""
    t = target.astype(bool)
    interior = t.copy()
    for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
        interior &= np.roll(t, shift, axis=axis)
    outline = t & ~interior
    img = np.zeros(current.shape, dtype=np.uint8)
    img[outline] = 128
    img[current.astype(bool)] = 255
    return img[::-1]  # canvas row 0 is the bottom; images go top-down


def cmd_render(args) -> int:
    dataset = load_dataset(args.dataset)
    matches = [ep for ep in dataset.episodes if ep.episode_id == args.episode]
    if not matches:
        raise CliError(f"episode {args.episode} not in dataset")
    episode = matches[0]
    if not os.path.exists(args.log):
        raise CliError(f"rollout log not found: {args.log}")
    with open(args.log) as fh:
        lines = fh.read().strip().split("\n")
    if lines[0] != "step,fragment_index,row,col,bin,cov_after,iou_after":
        raise CliError("unrecognized rollout log header")
    os.makedirs(args.out, exist_ok=True)
    state = E.reset(episode)
    frames = [_frame(state.current, state.target)]
    for line in lines[1:]:
        _, frag, row, col, rbin, _, _ = line.split(",")
        state = E.step(state, E.Action(int(frag), float(row), float(col), int(rbin)))
        frames.append(_frame(state.current, state.target))
    for i, frame in enumerate(frames):
        _write_atomic(os.path.join(args.out, f"step_{i:03d}.pgm"), _pgm_bytes(frame))
        if args.png:
            try:
                from PIL import Image
            except ImportError as e:
                raise CliError("--png needs Pillow installed") from e
            Image.fromarray(frame).save(os.path.join(args.out, f"step_{i:03d}.png"))
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fragbench",
                                description="shape-fragmentation assembly workbench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a fragmentation dataset")
    g.add_argument("--shape", default="square",
                   choices=("square", "mondrian-square", "pentagon", "hexagon"))
    g.add_argument("--k", type=int, default=3, help="partition depth; 2^k fragments")
    g.add_argument("--bins", type=int, default=1, help="rotation bins")
    g.add_argument("--n", type=int, default=100, help="episode count")
    g.add_argument("--mode", default=None, choices=(None, "random", "axis-aligned"))
    g.add_argument("--scenario", default="normal",
                   choices=("normal", "missing", "eroded", "distorted"))
    g.add_argument("--resolution", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train the assembly network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--levels", type=int, default=2, help="pooling levels in the placement loss")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a method on a dataset split")
    e.add_argument("--dataset", required=True)
    e.add_argument("--method", required=True, choices=METHODS)
    e.add_argument("--checkpoint", default=None, help="model prefix for method=fan")
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    e.add_argument("--stride", type=int, default=1, help="oracle grid stride")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--save-logs", action="store_true", help="write per-episode rollout CSVs")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render", help="render a rollout log to PGM frames")
    r.add_argument("--dataset", required=True)
    r.add_argument("--episode", type=int, required=True)
    r.add_argument("--log", required=True, help="rollout CSV from eval --save-logs")
    r.add_argument("--png", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, DatasetError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
