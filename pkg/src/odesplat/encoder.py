"""Initial latent state: hash-grid local features and an attention-pooled global feature."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Graph, Var
from .nn import MLP, TransformerBlock

PRIMES = (1, 2654435761, 805459861)
REGROUP_INTERVAL = 500
REGROUP_EVENTS = frozenset({"densify", "clone", "split", "prune", "delete"})


@dataclass
class HashGridConfig:
    levels: int = 16
    n_min: int = 16
    n_max: int = 512
    table_size: int = 2**19
    feat_dim: int = 2
    primes: tuple[int, ...] = PRIMES
    init_range: float = 1e-4

    def __post_init__(self):
        if self.table_size > 2**19:
            raise ContractError("hash table size is capped at 2**19 entries")
        if self.levels < 2:
            raise ContractError("need at least two resolution levels")
        if not self.n_max > self.n_min >= 1:
            raise ContractError("need n_max > n_min >= 1")

    @property
    def out_dim(self) -> int:
        return self.levels * self.feat_dim


def resolution_levels(cfg: HashGridConfig) -> list[int]:
    """Geometric progression of grid resolutions from ``n_min`` to ``n_max``."""
    if cfg.levels < 2:
        raise ContractError("need at least two resolution levels")
    if not cfg.n_max > cfg.n_min >= 1:
        raise ContractError("need n_max > n_min >= 1")
    b = np.exp((np.log(cfg.n_max) - np.log(cfg.n_min)) / (cfg.levels - 1))
    # the tiny slack keeps exact powers (e.g. 16 * 32 = 512) from flooring down
    return [int(np.floor(cfg.n_min * b**i * (1.0 + 1e-12))) for i in range(cfg.levels)]


def hash_index(coords, cfg: HashGridConfig) -> np.ndarray:
    """XOR of coordinate-times-prime products, modulo the table size (uint64 wraparound)."""
    g = np.asarray(coords).astype(np.uint64)
    primes = np.asarray(cfg.primes, dtype=np.uint64)
    d = g.shape[-1]
    h = g[..., 0] * primes[0]
    for i in range(1, d):
        h = h ^ (g[..., i] * primes[i])
    return (h % np.uint64(cfg.table_size)).astype(np.int64)


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def encode_local(pos: Var, table: Var, cfg: HashGridConfig) -> Var:
    """Trilinear hash-grid features for (N, 3) positions already scaled into [0, 1]^3.

    ``table`` has shape (levels, table_size, feat_dim); output is (N, levels * feat_dim).
    Out-of-range positions are clamped onto the unit cube.
    """
    res = resolution_levels(cfg)
    n_lv, m, f = cfg.levels, cfg.table_size, cfg.feat_dim
    graph = ad._graph_of(pos, table)
    pos = ad.clamp(graph.lift(pos), 0.0, 1.0)

    def fwd(x, tab):
        n = x.shape[0]
        out = np.zeros((n, n_lv, f))
        cache = []
        for lv, r in enumerate(res):
            s = x * r
            i0 = np.floor(s).astype(np.int64)
            fr = s - i0
            idx = hash_index(i0[:, None, :] + _CORNERS[None], cfg) + lv * m  # (n, 8)
            wc = np.where(_CORNERS[None], fr[:, None, :], 1.0 - fr[:, None, :])  # (n, 8, 3)
            w = wc.prod(axis=2)
            feats = tab.reshape(-1, f)[idx]  # (n, 8, f)
            out[:, lv] = (w[..., None] * feats).sum(axis=1)
            cache.append((idx, wc, w, feats))
        return out.reshape(n, n_lv * f), cache

    def vjp(gr, out, cache, x, tab):
        n = x.shape[0]
        gr = gr.reshape(n, n_lv, f)
        gtab = np.zeros((n_lv * m, f))
        gx = np.zeros_like(x)
        for lv, (idx, wc, w, feats) in enumerate(cache):
            g_l = gr[:, lv]  # (n, f)
            np.add.at(gtab, idx.reshape(-1), (w[..., None] * g_l[:, None, :]).reshape(-1, f))
            dfe = (feats * g_l[:, None, :]).sum(axis=2)  # (n, 8)
            sign = np.where(_CORNERS[None], 1.0, -1.0)  # d w_c / d fr_a factor sign
            for a in range(3):
                others = np.prod(np.delete(wc, a, axis=2), axis=2)
                gx[:, a] += (dfe * sign[..., a] * others).sum(axis=1) * res[lv]
        return gx, gtab.reshape(tab.shape)

    return graph.apply("hashgrid", fwd, vjp, [pos, table], saves=True)


def init_hash_table(cfg: HashGridConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-cfg.init_range, cfg.init_range, size=(cfg.levels, cfg.table_size, cfg.feat_dim))


@dataclass
class SceneBox:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_points(cls, points, margin: float = 0.05) -> "SceneBox":
        points = np.asarray(points, dtype=float)
        lo, hi = points.min(axis=0), points.max(axis=0)
        ext = np.maximum(hi - lo, 1e-6)
        return cls(lo - margin * ext, hi + margin * ext)

    def normalize(self, mu):
        return (mu - self.lo) / (self.hi - self.lo)


# ----------------------------------------------------------------------------
# grouping


def fps(points, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if k > n:
        raise ContractError(f"cannot pick {k} centers from {n} points")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    dist = np.sum((points - points[seed_index]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def canonical_seed(points) -> int:
    """Index of the lexicographically smallest point (x, then y, then z)."""
    points = np.asarray(points, dtype=float)
    return int(np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[0])


def knn_group(points, centers, k_neighbors: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` nearest points to each center and their center-relative coordinates."""
    points = np.asarray(points, dtype=float)
    centers = np.asarray(centers, dtype=float)
    if k_neighbors > len(points):
        raise ContractError("k_neighbors exceeds the number of points")
    d2 = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k_neighbors]
    return idx, points[idx] - centers[:, None, :]


@dataclass
class Grouping:
    centers: np.ndarray
    groups: np.ndarray

    @classmethod
    def build(cls, points, n_centers: int, k_neighbors: int) -> "Grouping":
        n = len(points)
        c = fps(points, min(n_centers, n), canonical_seed(points))
        g, _ = knn_group(points, np.asarray(points)[c], min(k_neighbors, n))
        return cls(c, g)


def regroup_schedule(event: str, iteration: int | None = None, interval: int = REGROUP_INTERVAL) -> bool:
    """Whether FPS/KNN groupings should be recomputed for this trainer event."""
    if event in REGROUP_EVENTS:
        return True
    if event == "iteration":
        return iteration is not None and iteration % interval == 0
    raise ContractError(f"unknown trainer event {event!r}")


# ----------------------------------------------------------------------------
# global encoder


@dataclass
class GlobalEncoderConfig:
    n_centers: int = 64
    k_neighbors: int = 16
    group_feat_dim: int = 64
    point_hidden: int = 32
    attn_layers: int = 4
    attn_heads: int = 4
    global_dim: int = 256


class GlobalEncoder:
    """Mini-PointNet per group, self-attention across group tokens, max pooling."""

    def __init__(self, cfg: GlobalEncoderConfig | None = None):
        self.cfg = cfg = cfg or GlobalEncoderConfig()
        d = cfg.group_feat_dim
        self.point_net = MLP("enc.pointnet", 3, cfg.point_hidden, d, depth=1)
        self.token_proj = MLP("enc.token", d + 3, d, d, depth=0)
        self.blocks = [TransformerBlock(f"enc.attn{i}", d, cfg.attn_heads) for i in range(cfg.attn_layers)]
        self.head = MLP("enc.head", d, d, cfg.global_dim, depth=0)

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        p = {}
        for part in [self.point_net, self.token_proj, *self.blocks, self.head]:
            p.update(part.init(rng))
        return p

    def __call__(self, p: dict[str, Var], centers: Var, rel: Var) -> Var:
        """``centers`` (C, 3) and center-relative group coordinates ``rel`` (C, k, 3) -> (G,)."""
        if centers.shape[0] == 0:
            raise ContractError("global encoding needs at least one group")
        feats = self.point_net(p, rel)  # (C, k, d)
        tokens = feats.max(axis=1)  # (C, d)
        x = self.token_proj(p, ad.concat([tokens, centers], axis=1))
        for blk in self.blocks:
            x = blk(p, x)
        return self.head(p, x.max(axis=0, keepdims=True)).reshape(self.cfg.global_dim)


@dataclass
class LatentState:
    """Shared global feature ``g_t`` and per-particle local rows ``l``."""

    global_feature: np.ndarray
    local: np.ndarray

    def __post_init__(self):
        self.global_feature = np.asarray(self.global_feature, dtype=float)
        self.local = np.asarray(self.local, dtype=float)


@dataclass
class EncoderConfig:
    hash_grid: HashGridConfig = field(default_factory=HashGridConfig)
    global_encoder: GlobalEncoderConfig = field(default_factory=GlobalEncoderConfig)


class LatentEncoder:
    """Produces ``z0 = (g0, l)`` from particle centers."""

    def __init__(self, cfg: EncoderConfig | None = None):
        self.cfg = cfg or EncoderConfig()
        self.global_encoder = GlobalEncoder(self.cfg.global_encoder)

    @property
    def local_dim(self) -> int:
        return self.cfg.hash_grid.out_dim

    @property
    def global_dim(self) -> int:
        return self.cfg.global_encoder.global_dim

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        p = {"enc.hash": init_hash_table(self.cfg.hash_grid, rng)}
        p.update(self.global_encoder.init(rng))
        return p

    def grouping(self, points) -> Grouping:
        ge = self.cfg.global_encoder
        return Grouping.build(points, ge.n_centers, ge.k_neighbors)

    def local_features(self, p: dict[str, Var], mu: Var, box: SceneBox) -> Var:
        pos = (mu - box.lo) * (1.0 / (box.hi - box.lo))
        return encode_local(pos, p["enc.hash"], self.cfg.hash_grid)

    def global_feature(self, p: dict[str, Var], mu: Var, grouping: Grouping) -> Var:
        centers = ad.take(mu, grouping.centers)
        members = ad.take(mu, grouping.groups)  # (C, k, 3)
        rel = members - centers.reshape(centers.shape[0], 1, 3)
        return self.global_encoder(p, centers, rel)

    def __call__(self, p: dict[str, Var], mu: Var, box: SceneBox, grouping: Grouping) -> tuple[Var, Var]:
        return self.global_feature(p, mu, grouping), self.local_features(p, mu, box)

    def encode(self, params: dict[str, np.ndarray], mu: np.ndarray, box: SceneBox, grouping: Grouping | None = None) -> LatentState:
        g = Graph()
        pv = {k: g.constant(v) for k, v in params.items() if k.startswith("enc.")}
        grouping = grouping or self.grouping(mu)
        g0, l = self(pv, g.constant(mu), box, grouping)
        return LatentState(g0.value, l.value)
