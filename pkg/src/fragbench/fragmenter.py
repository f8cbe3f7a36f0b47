"""Shape fragmentation: recursive binary splitting of a target shape into
2^K fragments, bottom-left-to-top-right ordering, rotation scrambling,
optional degradation, and dataset serialization.

An episode stores each fragment in *canonical pose*: re-centered at the
origin with a random rotation applied. The ground-truth labels are the bin
that undoes the rotation and the original centroid, so

    transform(canonical, gt_bin, num_bins, gt_center)

reproduces the fragment's original region.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import (
    GeometryError,
    Polygon,
    polygon_area,
    polygon_centroid,
    poly_from_text,
    poly_to_text,
    rotate_points,
    sample_cut,
    split_polygon,
)

FORMAT_VERSION = 1

SHAPES = ("square", "mondrian-square", "pentagon", "hexagon")
SCENARIOS = ("normal", "missing", "eroded", "distorted")
SPLITS = ("train", "val", "test")

# erosion shrink factor range: area ratio (1-f)^2 lands in [0.7225, 0.9409]
_ERODE_LO, _ERODE_HI = 0.03, 0.15
_DISTORT_JITTER = 0.025
_N_DEGRADED = 4


class DatasetError(Exception):
    """Episode generation or (de)serialization failure."""


def target_polygon(shape: str) -> Polygon:
    """Catalog of target shapes on the unit canvas.

    square / mondrian-square: the canvas with a 5% margin;
    pentagon / hexagon: regular polygons, circumradius 0.45, centered.
    """
    if shape in ("square", "mondrian-square"):
        m = 0.05
        return Polygon(np.array([[m, m], [1 - m, m], [1 - m, 1 - m], [m, 1 - m]]))
    if shape in ("pentagon", "hexagon"):
        n = 5 if shape == "pentagon" else 6
        ang = math.pi / 2 + 2 * math.pi * np.arange(n) / n
        pts = 0.5 + 0.45 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return Polygon(pts)
    raise DatasetError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def default_cut_mode(shape: str) -> str:
    return "axis-aligned" if shape == "mondrian-square" else "random"


def fragment_shape(target: Polygon, k: int, mode: str, rng) -> list[Polygon]:
    """Recursive binary partition of ``target`` into exactly 2^k fragments."""
    if k < 0:
        raise ValueError("k must be >= 0")
    frags = [target]
    for _ in range(k):
        nxt = []
        for f in frags:
            cut = sample_cut(f, mode=mode, rng=rng)
            a, b = split_polygon(f, cut)
            nxt.extend((a, b))
        frags = nxt
    return frags


def order_fragments(fragments: list[Polygon]) -> list[int]:
    """Permutation sorting fragments by centroid, bottom-to-top then
    left-to-right; ties keep the original order."""
    if not fragments:
        raise ValueError("empty fragment list")
    cents = np.array([polygon_centroid(f) for f in fragments])
    order = np.lexsort((np.arange(len(fragments)), cents[:, 0], cents[:, 1]))
    return [int(i) for i in order]


def scramble(fragments: list[Polygon], num_bins: int, rng):
    """Re-center each fragment at the origin and apply a random rotation bin.

    Returns (canonical polygons, gt_centers, gt_bins) where gt_bin is the
    modular inverse of the applied rotation.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    canonicals, centers, bins = [], [], []
    for f in fragments:
        r = int(rng.integers(num_bins))
        c = polygon_centroid(f)
        canonicals.append(Polygon(rotate_points(f.vertices - c, r, num_bins)))
        centers.append((float(c[0]), float(c[1])))
        bins.append((num_bins - r) % num_bins)
    return canonicals, centers, bins


@dataclass(frozen=True)
class FragmentRecord:
    polygon: Polygon          # canonical pose: centroid at origin, scrambled rotation
    gt_center: tuple          # original centroid on the canvas
    gt_bin: int               # rotation bin that restores the original orientation


@dataclass
class Episode:
    episode_id: int
    shape: str
    resolution: int
    k: int
    num_bins: int
    scenario: str
    split: str
    seed: int
    fragments: list[FragmentRecord]

    def placed_polygon(self, i: int) -> Polygon:
        """Fragment i back at its ground-truth pose."""
        from .geometry import transform

        f = self.fragments[i]
        return transform(f.polygon, f.gt_bin, self.num_bins, f.gt_center)

    def target_polygon(self) -> Polygon:
        return target_polygon(self.shape)


def degrade(episode: Episode, scenario: str, rng) -> Episode:
    """Return a degraded copy of an 8-fragment episode.

    missing: drop one fragment; eroded: shrink 4 fragments toward their
    centroids; distorted: jitter the vertices of 4 fragments (re-centering
    the canonical polygon and moving gt_center by the rotated centroid
    shift, so the pose round trip still holds).
    """
    if scenario not in ("missing", "eroded", "distorted"):
        raise DatasetError(f"degrade scenario must be abnormal, got {scenario!r}")
    if len(episode.fragments) != 8:
        raise DatasetError("degradation is defined for 8-fragment episodes")
    frags = list(episode.fragments)
    if scenario == "missing":
        victim = int(rng.integers(len(frags)))
        frags = [f for i, f in enumerate(frags) if i != victim]
    elif scenario == "eroded":
        for _ in range(100):
            victims = rng.choice(len(frags), size=_N_DEGRADED, replace=False)
            new = list(frags)
            ok = True
            for i in victims:
                f = new[i]
                shrink = 1.0 - float(rng.uniform(_ERODE_LO, _ERODE_HI))
                poly = Polygon(f.polygon.vertices * shrink)
                if polygon_area(poly) < 0.1 * polygon_area(f.polygon):
                    ok = False
                    break
                new[i] = FragmentRecord(poly, f.gt_center, f.gt_bin)
            if ok:
                frags = new
                break
        else:
            raise DatasetError("erosion kept collapsing fragments below 10% area")
    else:  # distorted
        victims = rng.choice(len(frags), size=_N_DEGRADED, replace=False)
        for i in victims:
            f = frags[i]
            for _ in range(100):
                jitter = rng.uniform(-_DISTORT_JITTER, _DISTORT_JITTER, size=f.polygon.vertices.shape)
                try:
                    moved = f.polygon.vertices + jitter
                    shift = polygon_centroid(Polygon(moved))
                    poly = Polygon(moved - shift)
                except GeometryError:
                    continue
                rot_shift = rotate_points(shift[None, :], f.gt_bin, episode.num_bins)[0]
                center = (f.gt_center[0] + float(rot_shift[0]), f.gt_center[1] + float(rot_shift[1]))
                frags[i] = FragmentRecord(poly, center, f.gt_bin)
                break
            else:
                raise DatasetError("distortion kept producing self-intersecting fragments")
    return Episode(
        episode_id=episode.episode_id,
        shape=episode.shape,
        resolution=episode.resolution,
        k=episode.k,
        num_bins=episode.num_bins,
        scenario=scenario,
        split=episode.split,
        seed=episode.seed,
        fragments=frags,
    )


@dataclass
class GeneratorConfig:
    shape: str = "square"
    n_samples: int = 100
    k: int = 3
    num_bins: int = 1
    mode: str | None = None      # defaults to the shape's natural cut mode
    scenario: str = "normal"
    resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DatasetError(f"unknown shape {self.shape!r}")
        if self.scenario not in SCENARIOS:
            raise DatasetError(f"unknown scenario {self.scenario!r}")
        if self.mode is None:
            self.mode = default_cut_mode(self.shape)
        if self.mode not in ("random", "axis-aligned"):
            raise DatasetError(f"unknown cut mode {self.mode!r}")
        if self.scenario != "normal" and self.k != 3:
            raise DatasetError("abnormal scenarios require k=3 (8 fragments)")


@dataclass
class Dataset:
    config: GeneratorConfig
    episodes: list[Episode] = field(default_factory=list)

    def split_ids(self, split: str) -> list[int]:
        return [e.episode_id for e in self.episodes if e.split == split]

    def by_split(self, split: str) -> list[Episode]:
        return [e for e in self.episodes if e.split == split]


def split_for_index(i: int) -> str:
    """Deterministic 64/16/20 split on a 25-episode cycle.

    Stable under appending episodes: an episode's split depends only on its
    own index.
    """
    r = i % 25
    if r < 16:
        return "train"
    if r < 20:
        return "val"
    return "test"


def derive_episode_seed(master_seed: int, index: int) -> int:
    """Counter-derived per-episode seed (order- and worker-independent)."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def generate_episode(config: GeneratorConfig, index: int) -> Episode:
    seed = derive_episode_seed(config.seed, index)
    rng = np.random.default_rng(seed)
    target = target_polygon(config.shape)
    try:
        frags = fragment_shape(target, config.k, config.mode, rng)
    except GeometryError as e:
        raise DatasetError(f"episode {index}: fragmentation failed: {e}") from e
    order = order_fragments(frags)
    canonicals, centers, bins = scramble([frags[i] for i in order], config.num_bins, rng)
    episode = Episode(
        episode_id=index,
        shape=config.shape,
        resolution=config.resolution,
        k=config.k,
        num_bins=config.num_bins,
        scenario="normal",
        split=split_for_index(index),
        seed=seed,
        fragments=[
            FragmentRecord(p, c, b) for p, c, b in zip(canonicals, centers, bins)
        ],
    )
    if config.scenario != "normal":
        episode = degrade(episode, config.scenario, rng)
    return episode


def generate_dataset(config: GeneratorConfig) -> Dataset:
    """Generate ``n_samples`` independently seeded episodes."""
    episodes = [generate_episode(config, i) for i in range(config.n_samples)]
    return Dataset(config=config, episodes=episodes)


# ---------------------------------------------------------------------------
# serialization: manifest.json + one line-oriented text file per episode
# ---------------------------------------------------------------------------

def episode_to_text(e: Episode) -> str:
    lines = [
        f"fragbench-episode {FORMAT_VERSION}",
        f"id {e.episode_id}",
        f"shape {e.shape}",
        f"resolution {e.resolution}",
        f"k {e.k}",
        f"bins {e.num_bins}",
        f"scenario {e.scenario}",
        f"split {e.split}",
        f"seed {e.seed}",
        f"fragments {len(e.fragments)}",
    ]
    for i, f in enumerate(e.fragments):
        lines.append(f"fragment {i}")
        lines.append(f"polygon {poly_to_text(f.polygon)}")
        lines.append(f"center {f.gt_center[0]:.9g},{f.gt_center[1]:.9g}")
        lines.append(f"bin {f.gt_bin}")
    return "\n".join(lines) + "\n"


def episode_from_text(text: str) -> Episode:
    lines = [ln for ln in text.splitlines() if ln.strip()]

    def take(key, i):
        k, _, val = lines[i].partition(" ")
        if k != key:
            raise DatasetError(f"expected {key!r} on line {i + 1}, got {lines[i]!r}")
        return val

    version = int(take("fragbench-episode", 0))
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported episode format version {version}")
    eid = int(take("id", 1))
    shape = take("shape", 2)
    resolution = int(take("resolution", 3))
    k = int(take("k", 4))
    bins = int(take("bins", 5))
    scenario = take("scenario", 6)
    split = take("split", 7)
    seed = int(take("seed", 8))
    n = int(take("fragments", 9))
    frags = []
    pos = 10
    for j in range(n):
        if take("fragment", pos) != str(j):
            raise DatasetError(f"fragment records out of order at line {pos + 1}")
        poly = poly_from_text(take("polygon", pos + 1))
        cx, _, cy = take("center", pos + 2).partition(",")
        gt_bin = int(take("bin", pos + 3))
        frags.append(FragmentRecord(poly, (float(cx), float(cy)), gt_bin))
        pos += 4
    return Episode(eid, shape, resolution, k, bins, scenario, split, seed, frags)


def _episode_filename(eid: int) -> str:
    return f"ep_{eid:05d}.txt"


def save_dataset(dataset: Dataset, path: str):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(dataset.config),
        "episodes": [_episode_filename(e.episode_id) for e in dataset.episodes],
        "splits": {s: dataset.split_ids(s) for s in SPLITS},
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for e in dataset.episodes:
        with open(os.path.join(path, _episode_filename(e.episode_id)), "w") as fh:
            fh.write(episode_to_text(e))


def load_dataset(path: str) -> Dataset:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no manifest.json under {path!r}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {manifest.get('format_version')}")
    config = GeneratorConfig(**manifest["config"])
    episodes = []
    for name in manifest["episodes"]:
        with open(os.path.join(path, name)) as fh:
            episodes.append(episode_from_text(fh.read()))
    return Dataset(config=config, episodes=episodes)
