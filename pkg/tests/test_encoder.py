import subprocess
import sys

import numpy as np
import pytest

from odesplat.autodiff import ContractError, Graph, check_gradient
from odesplat.encoder import (
    GlobalEncoder,
    GlobalEncoderConfig,
    HashGridConfig,
    LatentEncoder,
    EncoderConfig,
    SceneBox,
    encode_local,
    fps,
    hash_index,
    knn_group,
    regroup_schedule,
    resolution_levels,
)
from odesplat.nn import bind
from oracles import fps_oracle, knn_oracle

SMALL = HashGridConfig(levels=3, n_min=2, n_max=8, table_size=2**10, feat_dim=2)


def test_resolution_two_levels():
    assert resolution_levels(HashGridConfig(levels=2, n_min=16, n_max=512)) == [16, 512]


def test_resolution_sixteen_levels():
    res = resolution_levels(HashGridConfig(levels=16, n_min=16, n_max=512))
    assert res[1] == 20 and res[0] == 16 and res[-1] == 512


def test_degenerate_grid_rejected():
    with pytest.raises(ContractError):
        HashGridConfig(levels=4, n_min=16, n_max=16)
    with pytest.raises(ContractError):
        HashGridConfig(table_size=2**20)


def test_hash_examples():
    cfg = HashGridConfig()
    m = cfg.table_size
    assert hash_index([0, 0, 0], cfg) == 0
    assert hash_index([1, 0, 0], cfg) == 1 % m
    assert hash_index([1, 1, 0], cfg) == 2654435760 % m


def test_hash_range(rng):
    coords = rng.integers(0, 2**20, size=(1000, 3))
    h = hash_index(coords, SMALL)
    assert h.min() >= 0 and h.max() < SMALL.table_size


def test_hash_deterministic_across_processes():
    code = "from odesplat.encoder import hash_index, HashGridConfig; import numpy as np; print(hash_index(np.arange(300).reshape(100,3)*7919, HashGridConfig()).tolist())"
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0]) > 100


def _encode(pos, table, cfg=SMALL):
    g = Graph()
    return encode_local(g.constant(np.atleast_2d(pos)), g.constant(table), cfg).value[0]


def test_vertex_exactness(rng):
    table = rng.normal(size=(SMALL.levels, SMALL.table_size, SMALL.feat_dim))
    res = resolution_levels(SMALL)
    pos = np.array([0.5, 0.0, 0.5])  # a vertex of every level (2, 4, 8)
    out = _encode(pos, table).reshape(SMALL.levels, SMALL.feat_dim)
    for lv, r in enumerate(res):
        np.testing.assert_allclose(out[lv], table[lv, hash_index(np.round(pos * r).astype(int), SMALL)], atol=1e-15)


def test_zero_table_gives_zero(rng):
    table = np.zeros((SMALL.levels, SMALL.table_size, SMALL.feat_dim))
    np.testing.assert_array_equal(_encode(rng.uniform(size=3), table), 0.0)


def test_cell_center_is_corner_mean(rng):
    table = rng.normal(size=(SMALL.levels, SMALL.table_size, SMALL.feat_dim))
    r = resolution_levels(SMALL)[0]  # 2 -> cell [0, 0.5)^3, center 0.25
    out = _encode(np.full(3, 0.25), table)[: SMALL.feat_dim]
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    expected = table[0, hash_index(corners, SMALL)].mean(axis=0)
    assert r == 2
    np.testing.assert_allclose(out, expected, atol=1e-14)


def test_encode_local_gradients(rng):
    table = rng.normal(size=(SMALL.levels, SMALL.table_size, SMALL.feat_dim))
    pos = rng.uniform(0.05, 0.95, size=(4, 3))
    w = rng.normal(size=(4, SMALL.out_dim))
    assert check_gradient(lambda x: (encode_local(x, x.graph.constant(table), SMALL) * w).sum(), pos) <= 1e-4
    assert check_gradient(lambda t: (encode_local(t.graph.constant(pos), t, SMALL) * w).sum(), table, coords=range(0, table.size, 97)) <= 1e-4


def test_scene_box_margin():
    box = SceneBox.from_points(np.array([[0.0, 0, 0], [1, 2, 4]]))
    np.testing.assert_allclose(box.lo, [-0.05, -0.1, -0.2])
    np.testing.assert_allclose(box.hi, [1.05, 2.1, 4.2])


def test_fps_examples():
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert sorted(fps(line, 2, 0).tolist()) == [0, 3]
    assert fps(line, 1, 2).tolist() == [2]
    square = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
    assert fps(square, 2, 0).tolist() == [0, 3]
    with pytest.raises(ContractError):
        fps(line, 5)


def test_fps_and_knn_match_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(2, 65))
        pts = rng.normal(size=(n, 3))
        k = int(rng.integers(1, n + 1))
        seed = int(rng.integers(n))
        assert fps(pts, k, seed).tolist() == fps_oracle(pts, k, seed)
        centers = pts[fps(pts, min(k, 8), seed)]
        kn = int(rng.integers(1, n + 1))
        idx, rel = knn_group(pts, centers, kn)
        for c, row in zip(centers, idx):
            assert row.tolist() == knn_oracle(pts, c, kn)
        np.testing.assert_allclose(rel, pts[idx] - centers[:, None])


def test_knn_k1_is_self(rng):
    pts = rng.normal(size=(10, 3))
    idx, _ = knn_group(pts, pts[[2, 7]], 1)
    assert idx[:, 0].tolist() == [2, 7]


def test_knn_two_clusters_stay_apart(rng):
    a = rng.normal(size=(10, 3)) * 0.1
    b = rng.normal(size=(10, 3)) * 0.1 + 50
    pts = np.concatenate([a, b])
    idx, _ = knn_group(pts, pts[[0, 15]], 10)
    assert set(idx[0]) <= set(range(10)) and set(idx[1]) <= set(range(10, 20))


def test_regroup_schedule():
    assert regroup_schedule("iteration", 500)
    assert not regroup_schedule("iteration", 501)
    assert regroup_schedule("clone", 123)
    with pytest.raises(ContractError):
        regroup_schedule("bogus")


CFG = GlobalEncoderConfig(n_centers=8, k_neighbors=4, group_feat_dim=8, point_hidden=8, attn_layers=2, global_dim=6)


def _global(enc, params, centers, rel):
    g = Graph()
    p = bind(g, params)
    return enc(p, g.constant(centers), g.constant(rel)).value


def test_global_permutation_invariance(rng):
    enc = GlobalEncoder(CFG)
    params = enc.init(rng)
    centers = rng.normal(size=(5, 3))
    rel = rng.normal(size=(5, 4, 3))
    base = _global(enc, params, centers, rel)
    within = rel[:, rng.permutation(4)]
    np.testing.assert_allclose(_global(enc, params, centers, within), base, atol=1e-12)
    perm = rng.permutation(5)
    np.testing.assert_allclose(_global(enc, params, centers[perm], rel[perm]), base, atol=1e-12)


def test_global_zero_nets_single_point(rng):
    enc = GlobalEncoder(CFG)
    params = {k: np.zeros_like(v) for k, v in enc.init(rng).items()}
    out1 = _global(enc, params, np.zeros((1, 3)), np.zeros((1, 1, 3)))
    out2 = _global(enc, params, np.zeros((1, 3)), np.zeros((1, 1, 3)))
    np.testing.assert_array_equal(out1, out2)
    np.testing.assert_array_equal(out1, np.zeros(CFG.global_dim))


def test_g0_invariant_to_particle_order(rng):
    ecfg = EncoderConfig(SMALL, GlobalEncoderConfig(n_centers=6, k_neighbors=4, group_feat_dim=8, point_hidden=8, attn_layers=4, global_dim=8))
    enc = LatentEncoder(ecfg)
    params = enc.init(rng)
    mu = rng.normal(size=(32, 3))
    box = SceneBox.from_points(mu)
    a = enc.encode(params, mu, box)
    perm = rng.permutation(32)
    b = enc.encode(params, mu[perm], box)
    np.testing.assert_allclose(b.global_feature, a.global_feature, atol=1e-12)
    np.testing.assert_allclose(b.local, a.local[perm], atol=1e-15)
