"""Losses, Adam, and the teacher-forced training loop.

Each episode with N fragments expands into N step samples. Sample k's
current mask is the union of the first k ground-truth placements; the
presented fragment order is shuffled per sample (seeded) so that argmax
tie-breaking can never masquerade as selection accuracy.

The total objective is

    L_select + lambda_pos * (multi-scale placement term) + lambda_rot * (rotation term)

where the placement term compares max-pooled one-hot targets against
renormalized average-pooled probability maps at pool sizes 0, 2, 4, ...
(level l pools with size 2l; size 0 is the identity).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import env as E
from . import ndnum as nd
from .fan import (
    FANConfig,
    ModelParams,
    PoseSample,
    SelectSample,
    fragment_input_mask,
    init_params,
    pose_outputs_batch,
    rotation_input_masks,
    save_model,
    select_scores_batch,
)
from .fragmenter import Dataset, Episode
from .ndnum import Tensor, backward

__all__ = [
    "TrainConfig",
    "AdamState",
    "loss_select",
    "loss_pose",
    "adam_step",
    "StepSample",
    "expand_episode",
    "Trainer",
    "TrainResult",
    "train_loop",
]


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    pool_levels: int = 2            # L; levels use pool sizes 0, 2, ..., 2L
    lambda_pos: float = 1000.0
    lambda_rot: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.pool_levels < 0:
            raise ValueError("invalid training hyperparameters")


# -------------------------------------------------------------------- losses

def loss_select(scores: Tensor, true_index: int) -> Tensor:
    """Cross entropy of a softmax over the remaining set against the true
    next fragment."""
    n = scores.shape[0]
    if not 0 <= true_index < n:
        raise ValueError(f"label {true_index} out of range for {n} fragments")
    onehot = np.zeros((1, n))
    onehot[0, true_index] = 1.0
    logp = nd.log(nd.softmax(nd.reshape(scores, (1, n)), axis=1))
    return nd.neg(nd.tsum(nd.mul(nd.constant(onehot), logp)))


def loss_pose(m_map: Tensor, tau: np.ndarray, r: Tensor, rho: int, levels: int,
              lambda_pos: float = 1.0, lambda_rot: float = 1.0) -> Tensor:
    """Multi-scale placement cross entropy plus rotation cross entropy.

    ``tau`` is a one-hot (h, w) array; level l compares max-pooled tau with
    the average-pooled map renormalized to sum 1 (average pooling deflates
    mass by the pool area, renormalizing keeps each level a distribution).
    """
    h, w = m_map.shape
    if tau.shape != (h, w):
        raise ValueError(f"target shape {tau.shape} does not match map {m_map.shape}")
    if abs(float(tau.sum()) - 1.0) > 1e-9:
        raise ValueError("tau must be one-hot")
    m4 = nd.reshape(m_map, (1, 1, h, w))
    tau4 = nd.constant(tau.reshape(1, 1, h, w))
    place = None
    for level in range(levels + 1):
        size = 2 * level
        if size:
            if h % size or w % size:
                raise ValueError(f"pool size {size} does not divide map dims {(h, w)}")
            ml = nd.avgpool2d(m4, size)
            ml = nd.div(ml, nd.tsum(ml))
            tl = nd.maxpool2d(tau4, size)
        else:
            ml, tl = m4, tau4
        term = nd.neg(nd.tsum(nd.mul(tl, nd.log(ml))))
        place = term if place is None else nd.add(place, term)
    b = r.shape[0]
    rho_onehot = np.zeros((1, b))
    rho_onehot[0, rho] = 1.0
    logr = nd.log(nd.softmax(nd.reshape(r, (1, b)), axis=1))
    rot = nd.neg(nd.tsum(nd.mul(nd.constant(rho_onehot), logr)))
    return nd.add(nd.scale(place, lambda_pos), nd.scale(rot, lambda_rot))


# ---------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """Standard bias-corrected Adam update, in place on the parameter data."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise nd.NumericFaultError(f"non-finite gradient for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        mhat = state.m[name] / (1 - cfg.beta1**t)
        vhat = state.v[name] / (1 - cfg.beta2**t)
        p.data -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


# ----------------------------------------------------------- teacher forcing

@dataclass
class StepSample:
    episode_id: int
    select: SelectSample
    true_index: int          # position of the gt fragment in the presented order
    pose: PoseSample
    tau: np.ndarray          # one-hot (h, w) placement target
    rho: int                 # rotation bin target


def _gt_pixel(center, res) -> tuple[int, int]:
    col = min(res - 1, max(0, int(center[0] * res)))
    row = min(res - 1, max(0, int(center[1] * res)))
    return row, col


def expand_episode(episode: Episode, order_rng) -> list[StepSample]:
    """One sample per assembly step, with the ground-truth prefix placed."""
    res = episode.resolution
    n = len(episode.fragments)
    renders = [fragment_input_mask(f.polygon, res) for f in episode.fragments]
    # the bin-0 rotation render equals the plain fragment render; reusing the
    # array lets batched forwards deduplicate the encoder row
    rotations = [
        [renders[i]] + rotation_input_masks(f.polygon, episode.num_bins, res)[1:]
        for i, f in enumerate(episode.fragments)
    ]
    samples = []
    state = E.reset(episode)
    for k in range(n):
        remaining = state.remaining_shape().astype(np.float64)
        present = list(range(k, n))
        order_rng.shuffle(present)
        masks = [renders[i] for i in present]
        true_pos = present.index(k)
        tau = np.zeros((res, res))
        row, col = _gt_pixel(episode.fragments[k].gt_center, res)
        tau[row, col] = 1.0
        samples.append(
            StepSample(
                episode_id=episode.episode_id,
                select=SelectSample(masks, remaining),
                true_index=true_pos,
                pose=PoseSample(
                    selected_mask=renders[k],
                    other_masks=[renders[i] for i in present if i != k],
                    rotation_masks=rotations[k],
                    remaining_mask=remaining,
                ),
                tau=tau,
                rho=episode.fragments[k].gt_bin,
            )
        )
        state = E.step(state, E.gt_action(episode, k))
    return samples


def expand_episodes(episodes: list[Episode], seed: int) -> list[StepSample]:
    samples = []
    for ep in episodes:
        rng = np.random.default_rng([seed, ep.episode_id, 0x5eed])
        samples.extend(expand_episode(ep, rng))
    return samples


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    params: ModelParams          # best-validation parameters
    history: list                # per-epoch dict rows
    checkpoint_path: str | None = None


class Trainer:
    """Step-driven optimizer around the batched forwards; `train_loop` is
    the epoch-oriented wrapper."""

    def __init__(self, train_episodes, val_episodes, fan_cfg: FANConfig, cfg: TrainConfig):
        if not train_episodes:
            raise ValueError("no training episodes")
        self.cfg = cfg
        self.fan_cfg = fan_cfg
        self.params = init_params(fan_cfg, cfg.seed)
        self.samples = expand_episodes(train_episodes, cfg.seed)
        self.val_samples = expand_episodes(val_episodes, cfg.seed) if val_episodes else []
        self._shuffle_rng = np.random.default_rng([cfg.seed, 0xba7c4])
        self._queue: list[int] = []
        self.steps_done = 0

    def _next_batch(self) -> list[StepSample]:
        batch = []
        while len(batch) < self.cfg.batch_size:
            if not self._queue:
                order = np.arange(len(self.samples))
                self._shuffle_rng.shuffle(order)
                self._queue = [int(i) for i in order]
            batch.append(self.samples[self._queue.pop()])
        return batch

    def run_steps(self, n_steps: int, adam: AdamState | None = None) -> dict:
        """Run ``n_steps`` batch updates; returns mean per-sample losses."""
        adam = adam if adam is not None else self._adam()
        sel_total = pose_total = 0.0
        count = 0
        for _ in range(n_steps):
            batch = self._next_batch()
            scores = select_scores_batch(self.params, [s.select for s in batch])
            maps, rots = pose_outputs_batch(self.params, [s.pose for s in batch])
            total = None
            for s, y, m, r in zip(batch, scores, maps, rots):
                ls = loss_select(y, s.true_index)
                lp = loss_pose(m, s.tau, r, s.rho, self.cfg.pool_levels,
                               lambda_pos=self.cfg.lambda_pos, lambda_rot=self.cfg.lambda_rot)
                sel_total += float(ls.data)
                pose_total += float(lp.data)
                term = nd.add(ls, lp)
                total = term if total is None else nd.add(total, term)
            count += len(batch)
            self.params.zero_grad()
            backward(total)
            grads = {k: t.grad for k, t in self.params.tensors.items() if t.grad is not None}
            adam_step(self.params.tensors, grads, adam, self.cfg)
            self.steps_done += 1
        return {"loss_select": sel_total / count, "loss_pose": pose_total / count}

    def _adam(self) -> AdamState:
        if not hasattr(self, "_adam_state"):
            self._adam_state = AdamState()
        return self._adam_state

    def evaluate(self, samples: list[StepSample] | None = None) -> dict:
        """Eval-mode losses plus selection accuracy and center error."""
        samples = self.val_samples if samples is None else samples
        if not samples:
            return {}
        res = self.fan_cfg.resolution
        sel_loss = pose_loss = 0.0
        correct = 0
        center_err = []
        with nd.no_grad():
            for start in range(0, len(samples), self.cfg.batch_size):
                chunk = samples[start : start + self.cfg.batch_size]
                scores = select_scores_batch(self.params, [s.select for s in chunk])
                maps, rots = pose_outputs_batch(self.params, [s.pose for s in chunk])
                for s, y, m, r in zip(chunk, scores, maps, rots):
                    sel_loss += float(loss_select(y, s.true_index).data)
                    pose_loss += float(loss_pose(m, s.tau, r, s.rho, self.cfg.pool_levels,
                                                 lambda_pos=self.cfg.lambda_pos,
                                                 lambda_rot=self.cfg.lambda_rot).data)
                    if int(np.argmax(y.data)) == s.true_index:
                        correct += 1
                    pr, pc = divmod(int(np.argmax(m.data)), res)
                    tr, tc = divmod(int(np.argmax(s.tau)), res)
                    center_err.append(math.hypot(pr - tr, pc - tc))
        n = len(samples)
        return {
            "loss_select": sel_loss / n,
            "loss_pose": pose_loss / n,
            "select_acc": correct / n,
            "median_center_err": float(np.median(center_err)),
        }


def train_loop(dataset: Dataset, fan_cfg: FANConfig, cfg: TrainConfig,
               out_dir: str | None = None) -> TrainResult:
    """Epoch-driven training over the dataset's train split with best-val
    checkpointing and a CSV log."""
    train_eps = dataset.by_split("train")
    val_eps = dataset.by_split("val")
    trainer = Trainer(train_eps, val_eps, fan_cfg, cfg)
    steps_per_epoch = max(1, math.ceil(len(trainer.samples) / cfg.batch_size))
    history = []
    best = (float("inf"), trainer.params.copy())
    for epoch in range(cfg.epochs):
        stats = trainer.run_steps(steps_per_epoch)
        val = trainer.evaluate()
        row = {
            "epoch": epoch,
            "train_loss_select": stats["loss_select"],
            "train_loss_pose": stats["loss_pose"],
            "val_loss_select": val.get("loss_select", float("nan")),
            "val_loss_pose": val.get("loss_pose", float("nan")),
            "val_select_acc": val.get("select_acc", float("nan")),
        }
        history.append(row)
        score = val.get("loss_select", stats["loss_select"]) + val.get(
            "loss_pose", stats["loss_pose"]
        )
        if score < best[0]:
            best = (score, trainer.params.copy())
    best_params = best[1] if cfg.epochs > 0 else trainer.params.copy()

    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "model")
        save_model(ckpt_path, best_params)
        with open(os.path.join(out_dir, "training_log.csv"), "w") as fh:
            cols = ["epoch", "train_loss_select", "train_loss_pose",
                    "val_loss_select", "val_loss_pose", "val_select_acc"]
            fh.write(",".join(cols) + "\n")
            for row in history:
                fh.write(",".join(
                    str(row["epoch"]) if c == "epoch" else f"{row[c]:.6f}" for c in cols
                ) + "\n")
    return TrainResult(params=best_params, history=history, checkpoint_path=ckpt_path)
