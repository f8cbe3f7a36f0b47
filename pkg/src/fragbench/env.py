"""Sequential assembly environment: hold the target raster, the current
union of placements, and the remaining fragment set; apply place actions.

The evaluation target is the union of the provided fragments rendered at
their ground-truth poses. For normal episodes this coincides with the
rasterized target polygon; for degraded episodes it excludes the
degradation from the target, so metrics never punish an agent for area it
was never given.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .fragmenter import Episode
from .geometry import rasterize, transform
from .metrics import coverage, iou

__all__ = [
    "Action",
    "AssemblyState",
    "InvalidActionError",
    "RolloutError",
    "RolloutResult",
    "reset",
    "step",
    "rollout",
    "gt_action",
    "gt_policy",
    "random_policy",
    "center_policy",
    "rollout_log_csv",
]


class InvalidActionError(Exception):
    pass


class RolloutError(Exception):
    def __init__(self, step_index: int, message: str):
        super().__init__(f"rollout aborted at step {step_index}: {message}")
        self.step_index = step_index


@dataclass(frozen=True)
class Action:
    """Place one remaining fragment.

    ``row``/``col`` are pixel coordinates; integer values address pixel
    centers, fractional values are legal (ground-truth replay uses them to
    hit exact sub-pixel poses).
    """

    fragment_index: int
    row: float
    col: float
    bin: int = 0


@dataclass(frozen=True)
class LogStep:
    step: int
    fragment_index: int
    row: float
    col: float
    bin: int
    cov_after: float
    iou_after: float


@dataclass
class AssemblyState:
    episode: Episode
    target: np.ndarray                 # (h, w) uint8
    current: np.ndarray                # (h, w) uint8
    consumed: np.ndarray               # (n,) bool
    action_log: list = field(default_factory=list)

    @property
    def step_count(self) -> int:
        return len(self.action_log)

    def remaining_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.consumed) if not c]

    def remaining_shape(self) -> np.ndarray:
        """Per-pixel max(target - current, 0)."""
        return (self.target & ~self.current.astype(bool)).astype(np.uint8)

    def done(self) -> bool:
        return bool(self.consumed.all())


def placed_mask(episode: Episode, fragment_index: int, row: float, col: float, bin: int) -> np.ndarray:
    """Raster of one fragment with its centroid at pixel coords (row, col)."""
    res = episode.resolution
    if not 0 <= bin < episode.num_bins:
        raise InvalidActionError(f"bin {bin} out of range for {episode.num_bins} bins")
    center = ((col + 0.5) / res, (row + 0.5) / res)
    poly = transform(episode.fragments[fragment_index].polygon, bin, episode.num_bins, center)
    return rasterize(poly, res, res)


def reset(episode: Episode) -> AssemblyState:
    res = episode.resolution
    target = np.zeros((res, res), dtype=np.uint8)
    for i in range(len(episode.fragments)):
        target |= rasterize(episode.placed_polygon(i), res, res)
    return AssemblyState(
        episode=episode,
        target=target,
        current=np.zeros((res, res), dtype=np.uint8),
        consumed=np.zeros(len(episode.fragments), dtype=bool),
    )


def step(state: AssemblyState, action: Action) -> AssemblyState:
    """Apply one placement; returns a new state, the input is unchanged."""
    n = len(state.episode.fragments)
    i = action.fragment_index
    if not 0 <= i < n:
        raise InvalidActionError(f"fragment index {i} out of range (n={n})")
    if state.consumed[i]:
        raise InvalidActionError(f"fragment {i} already consumed")
    mask = placed_mask(state.episode, i, action.row, action.col, action.bin)
    current = state.current | mask
    consumed = state.consumed.copy()
    consumed[i] = True
    entry = LogStep(
        step=state.step_count,
        fragment_index=i,
        row=float(action.row),
        col=float(action.col),
        bin=int(action.bin),
        cov_after=coverage(current, state.target),
        iou_after=iou(current, state.target),
    )
    return AssemblyState(
        episode=state.episode,
        target=state.target,
        current=current,
        consumed=consumed,
        action_log=state.action_log + [entry],
    )


@dataclass
class RolloutResult:
    final_state: AssemblyState
    cov: float
    iou: float
    log: list


def rollout(episode: Episode, policy) -> RolloutResult:
    """Run ``policy`` until every fragment is consumed."""
    state = reset(episode)
    while not state.done():
        k = state.step_count
        try:
            action = policy(state)
            state = step(state, action)
        except InvalidActionError as e:
            raise RolloutError(k, str(e)) from e
    return RolloutResult(
        final_state=state,
        cov=coverage(state.current, state.target),
        iou=iou(state.current, state.target),
        log=state.action_log,
    )


def gt_action(episode: Episode, fragment_index: int) -> Action:
    """The exact ground-truth placement for one fragment."""
    f = episode.fragments[fragment_index]
    res = episode.resolution
    return Action(
        fragment_index=fragment_index,
        row=f.gt_center[1] * res - 0.5,
        col=f.gt_center[0] * res - 0.5,
        bin=f.gt_bin,
    )


def gt_policy(episode: Episode):
    """Replay fragments in ground-truth assembly order at exact poses."""

    def policy(state: AssemblyState) -> Action:
        return gt_action(episode, state.step_count)

    return policy


def random_policy(rng):
    """Uniform fragment, uniform pixel center, uniform bin."""

    def policy(state: AssemblyState) -> Action:
        remaining = state.remaining_indices()
        i = remaining[int(rng.integers(len(remaining)))]
        res = state.episode.resolution
        return Action(
            fragment_index=i,
            row=int(rng.integers(res)),
            col=int(rng.integers(res)),
            bin=int(rng.integers(state.episode.num_bins)),
        )

    return policy


def center_policy(state: AssemblyState) -> Action:
    """Place everything at the canvas center (a deliberately bad baseline)."""
    res = state.episode.resolution
    return Action(state.remaining_indices()[0], (res - 1) / 2, (res - 1) / 2, 0)


def rollout_log_csv(log: list) -> str:
    buf = io.StringIO()
    buf.write("step,fragment_index,row,col,bin,cov_after,iou_after\n")
    for e in log:
        buf.write(
            f"{e.step},{e.fragment_index},{e.row:.9g},{e.col:.9g},{e.bin},"
            f"{e.cov_after:.6f},{e.iou_after:.6f}\n"
        )
    return buf.getvalue()
