"""Fragment assembly network.

Two branches over raster-mask inputs:

* the selection branch scores every remaining fragment (which piece next);
* the pose branch emits a spatial probability map over pixels plus logits
  over rotation bins for a chosen fragment (where, and at which angle).

Shared structure: a per-branch CNN turns each (h, w) mask into an
embedding; the remaining-shape embedding is concatenated onto every
fragment embedding and mixed by a shared MLP; stacked residual multi-head
self-attention captures fragment-fragment relations; an all-ones query
aggregates the set into one order-invariant vector. Rotation renders go
through a second attention module and are scored one bin at a time, so the
parameter count depends on neither the fragment count nor the bin count.

All set operations are permutation-equivariant: reordering the fragment
list reorders scores (and pose outputs) identically and leaves the
aggregate vector unchanged.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from . import ndnum as nd
from .ndnum import Tensor
from .env import Action, AssemblyState
from .geometry import Polygon, rasterize, transform

__all__ = [
    "FANConfig",
    "ModelParams",
    "init_params",
    "scaled_dot_product",
    "multi_head",
    "fram",
    "fan_select",
    "fan_pose",
    "act",
    "fragment_input_mask",
    "rotation_input_masks",
    "SelectSample",
    "PoseSample",
    "select_scores_batch",
    "pose_outputs_batch",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class FANConfig:
    resolution: int = 32
    embed_dim: int = 64          # d
    heads: int = 4
    head_dim: int = 0            # d1 = d2; 0 means embed_dim // heads
    fram_stacks: int = 2
    num_bins: int = 1
    enc_channels: tuple = (8, 16)
    bottleneck_channels: int = 16
    dropout: float = 0.0
    batchnorm: bool = False
    input_channels: int = 1      # hook for RGB masks

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.head_dim == 0:
            object.__setattr__(self, "head_dim", self.embed_dim // self.heads)
        down = 2 ** len(self.enc_channels)
        if self.resolution % down:
            raise ValueError(f"resolution {self.resolution} not divisible by {down}")
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")

    @property
    def bottleneck_hw(self) -> int:
        return self.resolution // (2 ** len(self.enc_channels))

    @classmethod
    def full_scale(cls, num_bins: int = 1) -> "FANConfig":
        """128x128 configuration with the wide encoder and 8 heads."""
        return cls(
            resolution=128,
            embed_dim=256,
            heads=8,
            enc_channels=(16, 32, 64),
            bottleneck_channels=32,
            num_bins=num_bins,
            dropout=0.1,
        )


def _param_specs(cfg: FANConfig):
    """Ordered (name, shape, fan_in) list; order fixes the init draw order."""
    d, dh, h = cfg.embed_dim, cfg.head_dim, cfg.heads
    specs = []

    def cnn(prefix):
        cin = cfg.input_channels
        for i, ch in enumerate(cfg.enc_channels):
            specs.append((f"{prefix}.stage{i}.conv1.w", (ch, cin, 3, 3), cin * 9))
            specs.append((f"{prefix}.stage{i}.conv1.b", (ch,), None))
            specs.append((f"{prefix}.stage{i}.conv2.w", (ch, ch, 3, 3), ch * 9))
            specs.append((f"{prefix}.stage{i}.conv2.b", (ch,), None))
            cin = ch
        flat = cfg.enc_channels[-1] * cfg.bottleneck_hw**2
        specs.append((f"{prefix}.fc.w", (flat, d), flat))
        specs.append((f"{prefix}.fc.b", (d,), None))

    def mh(prefix):
        # per-head projections stored stacked: column block i is head i's
        # (d, dh) projection
        specs.append((f"{prefix}.wq", (d, h * dh), d))
        specs.append((f"{prefix}.wk", (d, h * dh), d))
        specs.append((f"{prefix}.wv", (d, h * dh), d))
        specs.append((f"{prefix}.wo", (h * dh, d), h * dh))

    def fram_block(prefix):
        for s in range(cfg.fram_stacks):
            mh(f"{prefix}.enc{s}")
        mh(f"{prefix}.dec")

    cnn("select.cnn")
    cnn("pose.cnn")
    specs.append(("mlp.l1.w", (2 * d, d), 2 * d))
    specs.append(("mlp.l1.b", (d,), None))
    specs.append(("mlp.l2.w", (d, d), d))
    specs.append(("mlp.l2.b", (d,), None))
    fram_block("fram")
    fram_block("rotfram")
    specs.append(("select.head.l1.w", (2 * d, d), 2 * d))
    specs.append(("select.head.l1.b", (d,), None))
    specs.append(("select.head.l2.w", (d, 1), d))
    specs.append(("select.head.l2.b", (1,), None))

    specs.append(("pose.fuse.w", (4 * d, d), 4 * d))
    specs.append(("pose.fuse.b", (d,), None))
    cb, bhw = cfg.bottleneck_channels, cfg.bottleneck_hw
    specs.append(("pose.dec.fc.w", (d, cb * bhw * bhw), d))
    specs.append(("pose.dec.fc.b", (cb * bhw * bhw,), None))
    cin = cb
    for i, ch in enumerate(reversed(cfg.enc_channels)):
        # the skip map at the matching resolution has exactly ch channels
        specs.append((f"pose.dec.up{i}.w", (cin, ch, 2, 2), cin))
        specs.append((f"pose.dec.up{i}.b", (ch,), None))
        specs.append((f"pose.dec.conv{i}.w", (ch, 2 * ch, 3, 3), 2 * ch * 9))
        specs.append((f"pose.dec.conv{i}.b", (ch,), None))
        cin = ch
    specs.append(("pose.dec.out.w", (1, cin, 1, 1), cin))
    specs.append(("pose.dec.out.b", (1,), None))

    specs.append(("pose.rot.l1.w", (3 * d, d), 3 * d))
    specs.append(("pose.rot.l1.b", (d,), None))
    specs.append(("pose.rot.l2.w", (d, 1), d))
    specs.append(("pose.rot.l2.b", (1,), None))

    if cfg.batchnorm:
        # affine parameters for the shared MLP layers (running stats live
        # in ModelParams.bn_stats)
        specs.append(("mlp.l1.bn.gamma", (d,), "one"))
        specs.append(("mlp.l1.bn.beta", (d,), None))
        specs.append(("mlp.l2.bn.gamma", (d,), "one"))
        specs.append(("mlp.l2.bn.beta", (d,), None))
    return specs


@dataclass
class ModelParams:
    config: FANConfig
    tensors: dict
    bn_stats: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        fresh = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()}
        stats = {k: v.copy() for k, v in self.bn_stats.items()}
        return ModelParams(self.config, fresh, stats)


def init_params(cfg: FANConfig, seed: int = 0) -> ModelParams:
    """Seeded uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in _param_specs(cfg):
        if fan_in is None:
            data = np.zeros(shape)
        elif fan_in == "one":
            data = np.ones(shape)
        else:
            a = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-a, a, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    bn_stats = {}
    if cfg.batchnorm:
        for layer in ("mlp.l1", "mlp.l2"):
            bn_stats[f"{layer}.bn.mean"] = np.zeros(cfg.embed_dim)
            bn_stats[f"{layer}.bn.var"] = np.ones(cfg.embed_dim)
    return ModelParams(cfg, tensors, bn_stats)


# ------------------------------------------------------------- set attention

def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d1)) V; rows of the attention matrix sum to 1."""
    d1 = q.shape[1]
    att = nd.softmax(nd.scale(nd.matmul(q, nd.transpose(k)), 1.0 / math.sqrt(d1)), axis=1)
    return nd.matmul(att, v)


def multi_head(params: ModelParams, prefix: str, x: Tensor, y: Tensor) -> Tensor:
    """Concatenated per-head attention projected back to the embed dim.

    All heads run in one batched matmul; equivalent to looping
    scaled_dot_product over per-head weight slices.
    """
    cfg = params.config
    h, dh = cfg.heads, cfg.head_dim
    n1, n2 = x.shape[0], y.shape[0]
    q = nd.permute(nd.reshape(nd.matmul(x, params[f"{prefix}.wq"]), (n1, h, dh)), (1, 0, 2))
    k = nd.permute(nd.reshape(nd.matmul(y, params[f"{prefix}.wk"]), (n2, h, dh)), (1, 2, 0))
    v = nd.permute(nd.reshape(nd.matmul(y, params[f"{prefix}.wv"]), (n2, h, dh)), (1, 0, 2))
    att = nd.softmax(nd.scale(nd.bmm(q, k), 1.0 / math.sqrt(dh)), axis=2)
    heads = nd.reshape(nd.permute(nd.bmm(att, v), (1, 0, 2)), (n1, h * dh))
    return nd.matmul(heads, params[f"{prefix}.wo"])


def fram(params: ModelParams, x: Tensor, prefix: str = "fram"):
    """Stacked residual self-attention plus the ones-query aggregator.

    Returns (H, h_agg): H is (n, d) and permutation-equivariant, h_agg is
    (1, d) and permutation-invariant.
    """
    h_cur = x
    for s in range(params.config.fram_stacks):
        h_cur = nd.add(multi_head(params, f"{prefix}.enc{s}", h_cur, h_cur), h_cur)
    ones_q = nd.ones((1, params.config.embed_dim))
    h_agg = multi_head(params, f"{prefix}.dec", ones_q, h_cur)
    return h_cur, h_agg


# ------------------------------------------------------------------ encoders

def _encode(params: ModelParams, prefix: str, x: np.ndarray, want_skips: bool = False,
            train: bool = False, rng=None):
    """CNN over a (B, C, h, w) mask stack -> ((B, d) embeddings, skip maps)."""
    cfg = params.config
    t = x if isinstance(x, Tensor) else nd.constant(x)
    skips = []
    use_dropout = train and cfg.dropout > 0.0
    for i in range(len(cfg.enc_channels)):
        t = nd.relu(nd.conv2d(t, params[f"{prefix}.stage{i}.conv1.w"],
                              params[f"{prefix}.stage{i}.conv1.b"], padding=1))
        if use_dropout:
            t = nd.dropout(t, cfg.dropout, train=True, rng=rng)
        t = nd.relu(nd.conv2d(t, params[f"{prefix}.stage{i}.conv2.w"],
                              params[f"{prefix}.stage{i}.conv2.b"], padding=1))
        if want_skips:
            skips.append(t)
        t = nd.maxpool2d(t, 2)
    emb = nd.relu(nd.linear(nd.flatten(t), params[f"{prefix}.fc.w"], params[f"{prefix}.fc.b"]))
    return emb, skips


def _shared_mlp(params: ModelParams, z: Tensor, train: bool = False) -> Tensor:
    cfg = params.config
    t = nd.linear(z, params["mlp.l1.w"], params["mlp.l1.b"])
    if cfg.batchnorm:
        t = nd.batchnorm(t, params["mlp.l1.bn.gamma"], params["mlp.l1.bn.beta"],
                         params.bn_stats["mlp.l1.bn.mean"], params.bn_stats["mlp.l1.bn.var"],
                         train=train)
    t = nd.relu(t)
    t = nd.linear(t, params["mlp.l2.w"], params["mlp.l2.b"])
    if cfg.batchnorm:
        t = nd.batchnorm(t, params["mlp.l2.bn.gamma"], params["mlp.l2.bn.beta"],
                         params.bn_stats["mlp.l2.bn.mean"], params.bn_stats["mlp.l2.bn.var"],
                         train=train)
    return nd.relu(t)


def _rows(x: Tensor, start: int, count: int) -> Tensor:
    return nd.slice_rows(x, start, start + count)


class _RowPool:
    """Deduplicates encoder input rows by array identity.

    Fragment renders are cached per episode and reused across teacher-forced
    steps, so a batch encodes each distinct mask once.
    """

    def __init__(self):
        self._index = {}
        self.arrays = []

    def add(self, arr: np.ndarray) -> int:
        key = id(arr)
        got = self._index.get(key)
        if got is None:
            got = len(self.arrays)
            self._index[key] = got
            self.arrays.append(arr)
        return got

    def stack(self) -> np.ndarray:
        return np.stack(self.arrays)[:, None, :, :].astype(np.float64)


def _repeat_row(x: Tensor, n: int) -> Tensor:
    """Tile a (1, d) tensor to (n, d) differentiably."""
    return nd.matmul(nd.ones((n, 1)), x)


# ---------------------------------------------------------- selection branch

@dataclass
class SelectSample:
    fragment_masks: list            # n arrays (h, w) float
    remaining_mask: np.ndarray      # (h, w) float


def select_scores_batch(params: ModelParams, samples: list, train: bool = False, rng=None):
    """Score every fragment of every sample; one CNN pass over the distinct
    masks of the batch, then per-sample attention. Returns (n_i,) tensors."""
    pool = _RowPool()
    rows = [
        ([pool.add(m) for m in s.fragment_masks], pool.add(s.remaining_mask))
        for s in samples
    ]
    emb, _ = _encode(params, "select.cnn", pool.stack(), train=train, rng=rng)
    out = []
    for s, (frag_idx, rem_idx) in zip(samples, rows):
        n = len(frag_idx)
        frag_e = nd.gather_rows(emb, frag_idx)
        ctx = nd.gather_rows(emb, [rem_idx])
        z = _shared_mlp(params, nd.concat([frag_e, _repeat_row(ctx, n)], axis=1), train=train)
        h_set, h_agg = fram(params, z)
        feats = nd.concat([h_set, _repeat_row(h_agg, n)], axis=1)
        hid = nd.relu(nd.linear(feats, params["select.head.l1.w"], params["select.head.l1.b"]))
        y = nd.linear(hid, params["select.head.l2.w"], params["select.head.l2.b"])
        out.append(nd.reshape(y, (n,)))
    return out


def fan_select(remaining_mask: np.ndarray, fragment_masks: list, params: ModelParams) -> Tensor:
    """Selection scores, length n, conditioned on the remaining shape and
    the other candidates."""
    _check_resolution(params.config, fragment_masks + [remaining_mask])
    return select_scores_batch(params, [SelectSample(fragment_masks, remaining_mask)])[0]


# --------------------------------------------------------------- pose branch

@dataclass
class PoseSample:
    selected_mask: np.ndarray
    other_masks: list
    rotation_masks: list            # one render per bin
    remaining_mask: np.ndarray


def pose_outputs_batch(params: ModelParams, samples: list, train: bool = False, rng=None):
    """Probability maps and rotation logits for a batch of pose queries.

    The decoder runs batched over samples with skip connections taken from
    the remaining-shape encoder pass. Returns (list of (h, w) map tensors,
    list of (b,) logit tensors).
    """
    cfg = params.config
    res = cfg.resolution
    b = cfg.num_bins
    n_batch = len(samples)
    pool = _RowPool()
    for s in samples:
        # remaining masks first: their skip-map rows stay a contiguous
        # [0, n_batch) block for the decoder
        pool.add(s.remaining_mask)
    rows = []
    for s in samples:
        if len(s.rotation_masks) != b:
            raise ValueError(f"expected {b} rotation renders, got {len(s.rotation_masks)}")
        rows.append((
            [pool.add(s.selected_mask)] + [pool.add(m) for m in s.other_masks],
            [pool.add(m) for m in s.rotation_masks],
        ))
    emb, skips_all = _encode(params, "pose.cnn", pool.stack(), want_skips=True, train=train, rng=rng)
    skips = [_rows(sk, 0, n_batch) for sk in skips_all]

    fuses, rot_logits = [], []
    for bi, s in enumerate(samples):
        frag_idx, rot_idx = rows[bi]
        n = len(frag_idx)
        g_p = _rows(emb, bi, 1)
        frag_e = nd.gather_rows(emb, frag_idx)
        rot_e = nd.gather_rows(emb, rot_idx)

        z = _shared_mlp(params, nd.concat([frag_e, _repeat_row(g_p, n)], axis=1), train=train)
        h_set, h_agg = fram(params, z)
        h_sel = _rows(h_set, 0, 1)

        z_rot = _shared_mlp(params, nd.concat([rot_e, _repeat_row(g_p, b)], axis=1), train=train)
        h_rot_set, h_rot = fram(params, z_rot, prefix="rotfram")

        fuse = nd.relu(nd.linear(nd.concat([g_p, h_sel, h_agg, h_rot], axis=1),
                                 params["pose.fuse.w"], params["pose.fuse.b"]))
        fuses.append(fuse)

        rot_feats = nd.concat(
            [h_rot_set, _repeat_row(h_rot, b), _repeat_row(fuse, b)], axis=1)
        rh = nd.relu(nd.linear(rot_feats, params["pose.rot.l1.w"], params["pose.rot.l1.b"]))
        rot_logits.append(nd.reshape(
            nd.linear(rh, params["pose.rot.l2.w"], params["pose.rot.l2.b"]), (b,)))

    fuse_all = nd.concat(fuses, axis=0)  # (B, d)
    logits = _decode_maps(params, fuse_all, skips)  # (B, 1, res, res)
    n_batch = len(samples)
    flat = nd.reshape(logits, (n_batch, res * res))
    maps = []
    for bi in range(n_batch):
        row = _rows(flat, bi, 1)
        m = nd.softmax(row, axis=1)
        maps.append(nd.reshape(m, (res, res)))
    return maps, rot_logits


def _decode_maps(params: ModelParams, fuse: Tensor, skips: list) -> Tensor:
    cfg = params.config
    cb, bhw = cfg.bottleneck_channels, cfg.bottleneck_hw
    t = nd.relu(nd.linear(fuse, params["pose.dec.fc.w"], params["pose.dec.fc.b"]))
    t = nd.reshape(t, (fuse.shape[0], cb, bhw, bhw))
    for i in range(len(cfg.enc_channels)):
        t = nd.conv_transpose2d(t, params[f"pose.dec.up{i}.w"], params[f"pose.dec.up{i}.b"], stride=2)
        skip = skips[len(skips) - 1 - i]
        t = nd.concat([t, skip], axis=1)
        t = nd.relu(nd.conv2d(t, params[f"pose.dec.conv{i}.w"], params[f"pose.dec.conv{i}.b"], padding=1))
    return nd.conv2d(t, params["pose.dec.out.w"], params["pose.dec.out.b"])


def fan_pose(selected_mask, remaining_mask, other_masks, rotation_masks, params: ModelParams):
    """Placement probability map (sums to 1) and rotation logits for one
    selected fragment."""
    _check_resolution(params.config, [selected_mask, remaining_mask] + list(other_masks))
    maps, rots = pose_outputs_batch(
        params,
        [PoseSample(selected_mask, list(other_masks), list(rotation_masks), remaining_mask)],
    )
    return maps[0], rots[0]


def _check_resolution(cfg: FANConfig, masks):
    for m in masks:
        if m.shape != (cfg.resolution, cfg.resolution):
            raise ValueError(
                f"mask shape {m.shape} does not match configured resolution {cfg.resolution}"
            )


# ------------------------------------------------------------------- acting

def fragment_input_mask(polygon: Polygon, resolution: int) -> np.ndarray:
    """Pose-unknown render: the canonical fragment centered on its own canvas."""
    return rasterize(transform(polygon, 0, 1, (0.5, 0.5)), resolution, resolution).astype(np.float64)


def rotation_input_masks(polygon: Polygon, num_bins: int, resolution: int) -> list:
    """Renders of the fragment at every rotation bin (canvas-centered)."""
    return [
        rasterize(transform(polygon, k, num_bins, (0.5, 0.5)), resolution, resolution).astype(np.float64)
        for k in range(num_bins)
    ]


def act(state: AssemblyState, params: ModelParams) -> Action:
    """Greedy decision rule: argmax selection score, then argmax map pixel
    and rotation bin for that fragment; all ties break to the lowest index."""
    cfg = params.config
    episode = state.episode
    if episode.resolution != cfg.resolution or episode.num_bins != cfg.num_bins:
        raise ValueError(
            f"model (res={cfg.resolution}, bins={cfg.num_bins}) does not match "
            f"episode (res={episode.resolution}, bins={episode.num_bins})"
        )
    remaining = state.remaining_indices()
    if not remaining:
        raise ValueError("no fragments left to place")
    rem_mask = state.remaining_shape().astype(np.float64)
    masks = [fragment_input_mask(episode.fragments[i].polygon, cfg.resolution) for i in remaining]
    with nd.no_grad():
        scores = fan_select(rem_mask, masks, params)
        pick = int(np.argmax(scores.data))
        chosen = remaining[pick]
        others = [m for j, m in enumerate(masks) if j != pick]
        rots = rotation_input_masks(episode.fragments[chosen].polygon, cfg.num_bins, cfg.resolution)
        m, r = fan_pose(masks[pick], rem_mask, others, rots, params)
    flat_idx = int(np.argmax(m.data))
    row, col = divmod(flat_idx, cfg.resolution)
    return Action(fragment_index=chosen, row=float(row), col=float(col), bin=int(np.argmax(r.data)))


def fan_policy(params: ModelParams):
    def policy(state: AssemblyState) -> Action:
        return act(state, params)

    return policy


# -------------------------------------------------------------- persistence

def save_model(prefix: str, params: ModelParams):
    """Write ``<prefix>.ckpt`` (tensor blob) and ``<prefix>.json`` (config)."""
    blob = dict(params.named_arrays())
    for k, v in params.bn_stats.items():
        blob[f"stats.{k}"] = v
    nd.save_checkpoint(prefix + ".ckpt", blob)
    cfg = asdict(params.config)
    cfg["enc_channels"] = list(cfg["enc_channels"])
    with open(prefix + ".json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(prefix: str) -> ModelParams:
    with open(prefix + ".json") as fh:
        raw = json.load(fh)
    raw["enc_channels"] = tuple(raw["enc_channels"])
    cfg = FANConfig(**raw)
    blob = nd.load_checkpoint(prefix + ".ckpt")
    tensors, stats = {}, {}
    for k, v in blob.items():
        if k.startswith("stats."):
            stats[k[len("stats."):]] = v
        else:
            tensors[k] = Tensor(v, requires_grad=True, name=k)
    expected = {name: shape for name, shape, _ in _param_specs(cfg)}
    if set(tensors) != set(expected):
        missing = set(expected).symmetric_difference(tensors)
        raise ValueError(f"checkpoint does not match config; mismatched tensors: {sorted(missing)[:5]}")
    for name, shape in expected.items():
        if tensors[name].data.shape != tuple(shape):
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {tensors[name].data.shape}, "
                f"config expects {tuple(shape)}"
            )
    return ModelParams(cfg, tensors, stats)
