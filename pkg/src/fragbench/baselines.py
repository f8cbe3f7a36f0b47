"""Non-learned competitors: simulated annealing, GP-driven Bayesian
optimization, and an exhaustive greedy oracle. All of them optimize
whole-assembly IoU and are scored through the same environment and metrics
as the learned policy.

The greedy oracle carries an exact-cover fast path: when an episode's
fragments are all axis-aligned rectangles (two or more of them), a
bottom-left anchor packing search reconstructs a perfect tiling in
continuous coordinates. A per-step grid argmax provably cannot do this (no
gt-blind tie-break can distinguish the many equal-IoU first placements, and
pixel-snapped poses cannot reproduce a fragment's exact target raster in
general), so the packing pre-pass is what makes the oracle an actual
reconstruction reference on Mondrian data; everything else uses the grid
search.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import env as E
from .fragmenter import Episode
from .geometry import Polygon, rasterize_box, transform

__all__ = [
    "SAConfig",
    "BOConfig",
    "BaselineResult",
    "sa_assemble",
    "bo_assemble",
    "greedy_oracle_assemble",
    "random_assemble",
    "gp_posterior",
    "expected_improvement",
    "PlacementEvaluator",
]


@dataclass
class SAConfig:
    iters_per_fragment: int = 200
    t0: float = 0.2                 # initial temperature
    alpha: float = 0.97             # geometric cooling
    sigma: float | None = None      # position proposal std in pixels; default res/8
    sigma_halflife: int = 50        # halve sigma every this many iters
    bin_flip_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.t0 < 0 or not 0 < self.alpha < 1:
            raise ValueError("need t0 >= 0 and 0 < alpha < 1")


@dataclass
class BOConfig:
    evals_per_fragment_per_bin: int = 15
    init_points: int = 5
    length_scale: float = 0.2       # canvas units
    signal_var: float = 1.0
    noise: float = 1e-6
    candidates: int = 512           # EI argmax sample pool per iteration
    seed: int = 0

    def __post_init__(self):
        if self.evals_per_fragment_per_bin < self.init_points:
            raise ValueError("evals must cover the initial design")


@dataclass
class BaselineResult:
    rollout: E.RolloutResult
    wall_time_sec: float
    diagnostics: dict


# ----------------------------------------------------------- fast evaluation

class PlacementEvaluator:
    """Tentative-placement IoU against a fixed target with the current mask.

    Integer-pixel placements use a pre-rasterized triple-size canvas: moving
    a fragment by whole pixels shifts its raster exactly, so every candidate
    mask is a window of one big raster.
    """

    def __init__(self, episode: Episode, state: E.AssemblyState):
        self.episode = episode
        self.res = episode.resolution
        self.target = state.target.astype(bool)
        self.t_count = int(self.target.sum())
        self._big = {}
        self.set_current(state.current)

    def set_current(self, current: np.ndarray):
        self.current = current.astype(bool)
        self.c_count = int(self.current.sum())
        self.ct_count = int((self.current & self.target).sum())

    def _big_mask(self, frag_index: int, rotation_bin: int) -> np.ndarray:
        key = (frag_index, rotation_bin)
        if key not in self._big:
            res = self.res
            poly = self.episode.fragments[frag_index].polygon
            # centroid on the pixel-center that maps window (r, c) exactly
            cx = (res + res // 2 + 0.5) / res - 1.0
            cy = cx
            placed = transform(poly, rotation_bin, self.episode.num_bins, (cx + 1.0, cy + 1.0))
            self._big[key] = rasterize_box(placed, 3 * res, 3 * res, (0.0, 0.0, 3.0, 3.0)).astype(bool)
        return self._big[key]

    def window(self, frag_index: int, rotation_bin: int, row: int, col: int) -> np.ndarray:
        """Mask of the fragment placed with its centroid at pixel (row, col)."""
        res = self.res
        big = self._big_mask(frag_index, rotation_bin)
        r0 = res + res // 2 - row
        c0 = res + res // 2 - col
        return big[r0 : r0 + res, c0 : c0 + res]

    def iou_after(self, mask: np.ndarray) -> float:
        m = mask if mask.dtype == np.bool_ else mask.astype(bool)
        m_count = int(m.sum())
        mc = int((m & self.current).sum())
        mt = int((m & self.target).sum())
        mct = int((m & self.current & self.target).sum())
        inter = self.ct_count + mt - mct
        union = self.c_count + m_count - mc + self.t_count - inter
        return inter / union if union else 0.0

    def iou_after_grid(self, frag_index: int, rotation_bin: int, stride: int = 1):
        """IoU of every pixel-center placement on the stride grid, vectorized.

        Returns (ious, rows, cols) where ious has shape (len(rows), len(cols)).
        """
        res = self.res
        big = self._big_mask(frag_index, rotation_bin).astype(np.float64)
        rows = np.arange(0, res, stride)
        cols = np.arange(0, res, stride)
        # window start offsets run opposite to the placement position
        view = np.lib.stride_tricks.sliding_window_view(big, (res, res))
        r_idx = res + res // 2 - rows
        c_idx = res + res // 2 - cols
        wins = view[np.ix_(r_idx, c_idx)]  # (R, C, res, res)
        cur = self.current.astype(np.float64)
        tar = self.target.astype(np.float64)
        ct = (self.current & self.target).astype(np.float64)
        m_count = np.tensordot(wins, np.ones_like(cur), axes=2)
        mc = np.tensordot(wins, cur, axes=2)
        mt = np.tensordot(wins, tar, axes=2)
        mct = np.tensordot(wins, ct, axes=2)
        inter = self.ct_count + mt - mct
        union = self.c_count + m_count - mc + self.t_count - inter
        with np.errstate(invalid="ignore"):
            ious = np.where(union > 0, inter / union, 0.0)
        return ious, rows, cols

    def continuous_mask(self, frag_index: int, rotation_bin: int, row: float, col: float) -> np.ndarray:
        """Direct rasterization for sub-pixel placements (same path as env.step)."""
        return E.placed_mask(self.episode, frag_index, row, col, rotation_bin)


# -------------------------------------------------------- simulated annealing

def sa_assemble(episode: Episode, config: SAConfig) -> BaselineResult:
    """Per fragment (random order): anneal over continuous center and
    rotation bin maximizing whole-assembly IoU, then commit the best pose."""
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    res = episode.resolution
    n = len(episode.fragments)
    order = [int(i) for i in rng.permutation(n)]
    state = E.reset(episode)
    sigma0 = config.sigma if config.sigma is not None else res / 8.0
    best_curves = []

    for frag in order:
        ev = PlacementEvaluator(episode, state)
        row = float(rng.uniform(0, res - 1))
        col = float(rng.uniform(0, res - 1))
        rbin = int(rng.integers(episode.num_bins))
        val = ev.iou_after(ev.continuous_mask(frag, rbin, row, col))
        best = (val, row, col, rbin)
        curve = [val]
        temp = config.t0
        for it in range(config.iters_per_fragment):
            sigma = sigma0 / (2 ** (it // config.sigma_halflife))
            prow = float(np.clip(row + rng.normal(0.0, sigma), 0, res - 1))
            pcol = float(np.clip(col + rng.normal(0.0, sigma), 0, res - 1))
            pbin = rbin
            if episode.num_bins > 1 and rng.random() < config.bin_flip_prob:
                pbin = int(rng.integers(episode.num_bins))
            pval = ev.iou_after(ev.continuous_mask(frag, pbin, prow, pcol))
            accept = pval >= val
            if not accept and temp > 0.0:
                accept = rng.random() < math.exp((pval - val) / temp)
            if accept:
                row, col, rbin, val = prow, pcol, pbin, pval
            if val > best[0]:
                best = (val, row, col, rbin)
            curve.append(best[0])
            temp *= config.alpha
        best_curves.append(curve)
        state = E.step(state, E.Action(frag, best[1], best[2], best[3]))

    rollout = E.RolloutResult(
        final_state=state,
        cov=state.action_log[-1].cov_after,
        iou=state.action_log[-1].iou_after,
        log=state.action_log,
    )
    return BaselineResult(
        rollout=rollout,
        wall_time_sec=time.perf_counter() - start,
        diagnostics={"order": order, "best_curves": best_curves},
    )


# ------------------------------------------------- Gaussian-process machinery

def _se_kernel(a: np.ndarray, b: np.ndarray, length_scale: float, signal_var: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return signal_var * np.exp(-0.5 * d2 / length_scale**2)


def gp_posterior(x_obs: np.ndarray, y_obs: np.ndarray, x_query: np.ndarray,
                 length_scale: float = 0.2, signal_var: float = 1.0,
                 noise: float = 1e-6, prior_mean: float = 0.0):
    """Standard GP regression posterior (mean, variance) at the query points.

    Cholesky jitter escalates from 1e-9; a persistent failure raises.
    """
    x_obs = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    x_query = np.atleast_2d(np.asarray(x_query, dtype=np.float64))
    y = np.asarray(y_obs, dtype=np.float64) - prior_mean
    if x_obs.shape[0] < 1:
        raise ValueError("need at least one observation")
    k_oo = _se_kernel(x_obs, x_obs, length_scale, signal_var)
    k_oq = _se_kernel(x_obs, x_query, length_scale, signal_var)
    n = x_obs.shape[0]
    jitter = 1e-9
    chol = None
    for _ in range(8):
        try:
            chol = np.linalg.cholesky(k_oo + (noise + jitter) * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
    if chol is None:
        raise np.linalg.LinAlgError("GP covariance stayed non-positive-definite under jitter")
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
    mean = prior_mean + k_oq.T @ alpha
    v = np.linalg.solve(chol, k_oq)
    var = np.maximum(signal_var - (v * v).sum(axis=0), 0.0)
    return mean, var


_erf = np.vectorize(math.erf, otypes=[np.float64])


def _norm_cdf(z):
    return 0.5 * (1.0 + _erf(z / math.sqrt(2.0)))


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def expected_improvement(mean: np.ndarray, var: np.ndarray, best: float) -> np.ndarray:
    """EI for maximization; zero wherever the posterior is degenerate."""
    std = np.sqrt(var)
    ei = np.zeros_like(mean)
    ok = std > 1e-12
    z = (mean[ok] - best) / std[ok]
    ei[ok] = (mean[ok] - best) * _norm_cdf(z) + std[ok] * _norm_pdf(z)
    return np.maximum(ei, 0.0)


def bo_assemble(episode: Episode, config: BOConfig) -> BaselineResult:
    """Per fragment (random order), per rotation bin: expected-improvement
    search over the continuous center, snapped to pixels for evaluation;
    the best (bin, center) across bins is committed."""
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    res = episode.resolution
    n = len(episode.fragments)
    order = [int(i) for i in rng.permutation(n)]
    state = E.reset(episode)
    history = []

    def snap(pt):
        col = min(res - 1, max(0, int(pt[0] * res)))
        row = min(res - 1, max(0, int(pt[1] * res)))
        return row, col

    for frag in order:
        ev = PlacementEvaluator(episode, state)
        best_overall = None
        for rbin in range(episode.num_bins):
            xs, ys = [], []
            for _ in range(config.init_points):
                pt = rng.uniform(0.0, 1.0, 2)
                row, col = snap(pt)
                val = ev.iou_after(ev.window(frag, rbin, row, col))
                xs.append(((col + 0.5) / res, (row + 0.5) / res))
                ys.append(val)
            for _ in range(config.evals_per_fragment_per_bin - config.init_points):
                half = config.candidates // 2
                incumbent = np.asarray(xs[int(np.argmax(ys))])
                cand = np.concatenate([
                    rng.uniform(0.0, 1.0, (half, 2)),
                    np.clip(incumbent + rng.normal(0.0, 0.08, (config.candidates - half, 2)), 0.0, 1.0),
                ])
                # standardized observations keep EI's explore/exploit balance
                # independent of the objective's scale
                y_arr = np.array(ys)
                mu, sd = float(y_arr.mean()), float(y_arr.std())
                sd = sd if sd > 1e-9 else 1.0
                mean, var = gp_posterior(
                    np.array(xs), (y_arr - mu) / sd, cand,
                    length_scale=config.length_scale, signal_var=config.signal_var,
                    noise=config.noise, prior_mean=0.0,
                )
                ei = expected_improvement(mean, var, float((y_arr.max() - mu) / sd))
                pt = cand[int(np.argmax(ei))]
                row, col = snap(pt)
                val = ev.iou_after(ev.window(frag, rbin, row, col))
                xs.append(((col + 0.5) / res, (row + 0.5) / res))
                ys.append(val)
            k = int(np.argmax(ys))
            row, col = snap((xs[k][0], xs[k][1]))
            if best_overall is None or ys[k] > best_overall[0]:
                best_overall = (ys[k], row, col, rbin)
        history.append(best_overall[0])
        state = E.step(state, E.Action(frag, float(best_overall[1]), float(best_overall[2]), best_overall[3]))

    rollout = E.RolloutResult(
        final_state=state,
        cov=state.action_log[-1].cov_after,
        iou=state.action_log[-1].iou_after,
        log=state.action_log,
    )
    return BaselineResult(
        rollout=rollout,
        wall_time_sec=time.perf_counter() - start,
        diagnostics={"order": order, "per_fragment_best": history},
    )


# ----------------------------------------------------------------- greedy oracle

def greedy_oracle_assemble(episode: Episode, stride: int = 1) -> BaselineResult:
    """Deterministic reconstruction reference.

    All-rectangle episodes (>= 2 fragments) go through the exact packer;
    otherwise each step exhaustively scans (remaining fragment, bin, grid
    center at the given stride) and commits the best IoU, ties resolved in
    scan order.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    start = time.perf_counter()
    state = E.reset(episode)
    packed = _pack_rectangles(episode) if len(episode.fragments) >= 2 else None
    used_packer = packed is not None
    if used_packer:
        for action in packed:
            state = E.step(state, action)
    else:
        while not state.done():
            ev = PlacementEvaluator(episode, state)
            best = None
            for frag in state.remaining_indices():
                for rbin in range(episode.num_bins):
                    ious, rows, cols = ev.iou_after_grid(frag, rbin, stride)
                    flat = int(np.argmax(ious))
                    ri, ci = divmod(flat, ious.shape[1])
                    cand = (float(ious[ri, ci]), frag, rbin, int(rows[ri]), int(cols[ci]))
                    if best is None or cand[0] > best[0]:
                        best = cand
            state = E.step(state, E.Action(best[1], float(best[3]), float(best[4]), best[2]))

    rollout = E.RolloutResult(
        final_state=state,
        cov=state.action_log[-1].cov_after,
        iou=state.action_log[-1].iou_after,
        log=state.action_log,
    )
    return BaselineResult(
        rollout=rollout,
        wall_time_sec=time.perf_counter() - start,
        diagnostics={"exact_packing": used_packer},
    )


def random_assemble(episode: Episode, seed: int = 0) -> BaselineResult:
    start = time.perf_counter()
    rollout = E.rollout(episode, E.random_policy(np.random.default_rng(seed)))
    return BaselineResult(rollout=rollout, wall_time_sec=time.perf_counter() - start,
                          diagnostics={})


# ------------------------------------------------------------ exact packing

_TOL = 1e-9


def _axis_rect_dims(poly: Polygon, num_bins: int):
    """(bin -> (w, h)) for bins whose rotation keeps the rectangle
    axis-aligned; None if the polygon is not an axis-aligned rectangle."""
    v = poly.vertices
    if len(v) != 4:
        return None
    for i in range(4):
        d = v[(i + 1) % 4] - v[i]
        if min(abs(d[0]), abs(d[1])) > _TOL:
            return None
    w = float(v[:, 0].max() - v[:, 0].min())
    h = float(v[:, 1].max() - v[:, 1].min())
    dims = {}
    for k in range(num_bins):
        q, rem = divmod(4 * k, num_bins)
        if rem == 0:
            dims[k] = (w, h) if q % 2 == 0 else (h, w)
    return dims


def _pack_rectangles(episode: Episode, node_budget: int = 200_000):
    """Bottom-left anchor packing of rectangle fragments into the target
    rectangle; returns exact sub-pixel actions, or None if the episode is
    not an all-rectangle instance or no perfect tiling exists."""
    target = episode.target_polygon()
    tdims = _axis_rect_dims(target, 1)
    if tdims is None:
        return None
    frag_dims = []
    for f in episode.fragments:
        dims = _axis_rect_dims(f.polygon, episode.num_bins)
        if dims is None or not dims:
            return None
        frag_dims.append(dims)
    tv = target.vertices
    tx0, ty0 = float(tv[:, 0].min()), float(tv[:, 1].min())
    tx1, ty1 = float(tv[:, 0].max()), float(tv[:, 1].max())
    total = sum(w * h for dims in frag_dims for w, h in [next(iter(dims.values()))])
    if abs(total - (tx1 - tx0) * (ty1 - ty0)) > 1e-6:
        return None

    placements = []
    placed_boxes = []
    used = [False] * len(frag_dims)
    budget = [node_budget]

    def anchor():
        xs = sorted({tx0} | {b[2] for b in placed_boxes})
        ys = sorted({ty0} | {b[3] for b in placed_boxes})
        best = None
        for y in ys:
            if y >= ty1 - _TOL:
                continue
            for x in xs:
                if x >= tx1 - _TOL:
                    continue
                covered = any(
                    b[0] - _TOL <= x < b[2] - _TOL and b[1] - _TOL <= y < b[3] - _TOL
                    for b in placed_boxes
                )
                if not covered and (best is None or (y, x) < best):
                    best = (y, x)
        return best

    def fits(x, y, w, h):
        if x + w > tx1 + _TOL or y + h > ty1 + _TOL:
            return False
        for b in placed_boxes:
            if x < b[2] - _TOL and b[0] < x + w - _TOL and y < b[3] - _TOL and b[1] < y + h - _TOL:
                return False
        return True

    def search():
        budget[0] -= 1
        if budget[0] <= 0:
            return False
        if all(used):
            return True
        a = anchor()
        if a is None:
            return False
        ay, ax = a
        for i in range(len(frag_dims)):
            if used[i]:
                continue
            for rbin, (w, h) in frag_dims[i].items():
                if not fits(ax, ay, w, h):
                    continue
                used[i] = True
                placed_boxes.append((ax, ay, ax + w, ay + h))
                placements.append((i, rbin, ax + w / 2.0, ay + h / 2.0))
                if search():
                    return True
                used[i] = False
                placed_boxes.pop()
                placements.pop()
        return False

    if not search():
        return None
    res = episode.resolution
    return [
        E.Action(i, cy * res - 0.5, cx * res - 0.5, rbin)
        for i, rbin, cx, cy in placements
    ]
