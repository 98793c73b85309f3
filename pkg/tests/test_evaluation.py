import json
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from geosim.errors import DimensionError, NumericError, ProtocolError
from geosim.evaluation import (EmbeddingSet, ProtocolSpec, average_precision, binned_delta_map, cmc_map,
                               distance_matrix, evaluate_embeddings, write_report)
from geosim.geometry import GeometryBins
from oracles import ranking_oracle


def meta(ids, cams=None, views=None, cells=None, d=3, feats=None):
    n = len(ids)
    cams = cams if cams is not None else [0] * n
    views = views if views is not None else ["A"] * n
    cells = cells if cells is not None else [(0, 0)] * n
    bins = [GeometryBins(c, a, g) for c, (a, g) in zip(cams, cells)]
    feats = feats if feats is not None else torch.ones(n, d, dtype=torch.float64)
    return EmbeddingSet(feats, list(ids), list(cams), list(views), bins)


# -- distances -------------------------------------------------------------

def test_distance_examples():
    a = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    d = distance_matrix(a, a)
    assert d[0, 0].item() == pytest.approx(0.0, abs=1e-15)
    assert d[0, 1].item() == pytest.approx(1.0, abs=1e-15)


def test_distance_matches_scalar_loop():
    rng = random.Random(0)
    q = [[rng.gauss(0, 1) for _ in range(5)] for _ in range(4)]
    g = [[rng.gauss(0, 1) for _ in range(5)] for _ in range(6)]
    d = distance_matrix(torch.tensor(q), torch.tensor(g))
    for i, a in enumerate(q):
        for j, b in enumerate(g):
            dot = sum(x * y for x, y in zip(a, b))
            na = sum(x * x for x in a) ** 0.5
            nb = sum(x * x for x in b) ** 0.5
            assert d[i, j].item() == pytest.approx(1 - dot / (na * nb), abs=1e-12)


def test_distance_errors():
    with pytest.raises(NumericError, match="row 1"):
        distance_matrix(torch.tensor([[1.0, 0.0], [0.0, 0.0]]), torch.ones(2, 2))
    with pytest.raises(DimensionError):
        distance_matrix(torch.ones(2, 3), torch.ones(2, 2))


# -- average precision and CMC ------------------------------------------------

def test_ap_hand_case():
    # relevance [wrong, right, right] -> (1/2 + 2/3) / 2
    assert average_precision(np.array([0, 1, 1])) == pytest.approx(7 / 12, abs=1e-15)
    q = meta([1], cams=[9])
    g = meta([2, 1, 1], cams=[0, 1, 2])
    dist = np.array([[0.1, 0.2, 0.3]])
    rep = cmc_map(dist, q, g)
    assert rep.map == pytest.approx(7 / 12, abs=1e-15)
    assert rep.cmc == {1: 0.0, 5: 1.0, 10: 1.0}


def test_single_correct_nearest():
    q = meta([5], cams=[9])
    g = meta([5, 6], cams=[0, 1])
    assert cmc_map(np.array([[0.0, 1.0]]), q, g).rank1 == 1.0


def test_junk_rule_drops_same_camera_positive():
    q = meta([1], cams=[0])
    g = meta([1, 2, 1], cams=[0, 1, 1])
    dist = np.array([[0.0, 0.1, 0.2]])
    rep = cmc_map(dist, q, g)
    assert rep.map == pytest.approx(0.5)
    rep = cmc_map(dist, q, g, ProtocolSpec(exclude_same_camera=False))
    assert rep.map == pytest.approx((1 + 2 / 3) / 2)


def test_queries_without_positive_are_skipped():
    q = meta([1, 7], cams=[9, 9])
    g = meta([1, 2], cams=[0, 1])
    rep = cmc_map(np.array([[0.0, 1.0], [0.5, 0.5]]), q, g)
    assert rep.n_queries == 1 and rep.n_skipped == 1
    with pytest.raises(ProtocolError):
        cmc_map(np.array([[0.5, 0.5]]), meta([7], cams=[9]), g)


def test_empty_gallery_after_filtering():
    with pytest.raises(ProtocolError):
        cmc_map(np.zeros((1, 1)), meta([1], cams=[0]), meta([1], cams=[0]))


def test_ties_broken_by_gallery_index():
    q = meta([1], cams=[9])
    g = meta([2, 1], cams=[0, 1])
    assert cmc_map(np.array([[0.3, 0.3]]), q, g).rank1 == 0.0
    g = meta([1, 2], cams=[0, 1])
    assert cmc_map(np.array([[0.3, 0.3]]), q, g).rank1 == 1.0


@pytest.mark.parametrize("seed", range(200))
def test_matches_bruteforceranking_oracle(seed):
    rng = random.Random(seed)
    n_q, n_g = rng.randint(1, 20), rng.randint(2, 50)
    n_ids = rng.randint(1, 8)
    q_ids = [rng.randrange(n_ids) for _ in range(n_q)]
    g_ids = [rng.randrange(n_ids) for _ in range(n_g)]
    q_ids[0] = g_ids[0]
    q_cams = [rng.randrange(3) for _ in range(n_q)]
    g_cams = [rng.randrange(3) for _ in range(n_g)]
    q_cams[0] = (g_cams[0] + 1) % 3
    # coarse values produce ties
    dist = [[rng.choice([0.0, 0.25, 0.5, 0.75, rng.random()]) for _ in range(n_g)] for _ in range(n_q)]
    exclude = seed % 2 == 0
    proto = ProtocolSpec(exclude_same_camera=exclude, rank_depths=(1, 5, 10))
    rep = cmc_map(np.array(dist), meta(q_ids, q_cams), meta(g_ids, g_cams), proto)
    cmc, m, n = ranking_oracle(dist, q_ids, q_cams, g_ids, g_cams, (1, 5, 10), exclude)
    assert rep.n_queries == n
    assert rep.cmc == cmc
    # the oracle is exact rational arithmetic; only float rounding may differ
    assert rep.map == pytest.approx(m, rel=4e-16, abs=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_cmc_monotone_and_complete(seed):
    rng = np.random.default_rng(seed)
    n_g = int(rng.integers(2, 30))
    g_ids = rng.integers(0, 4, n_g).tolist()
    q_ids = [g_ids[0], g_ids[-1]]
    depths = tuple(range(1, n_g + 1))
    rep = cmc_map(rng.random((2, n_g)), meta(q_ids, [9, 9]), meta(g_ids, list(range(n_g))),
                  ProtocolSpec(rank_depths=depths))
    vals = [rep.cmc[k] for k in depths]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0
    assert all(0.0 <= v <= 1.0 for v in vals) and 0.0 <= rep.map <= 1.0


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        cmc_map(np.zeros((2, 2)), meta([1]), meta([1, 2]))


# -- per-bin breakdown --------------------------------------------------------

def test_binned_examples():
    per, counts, delta, low = binned_delta_map([0.3, 0.7], [(1, 1), (1, 1)], 0.5)
    assert delta == {(1, 1): 0.0}
    per, counts, delta, low = binned_delta_map([1.0, 0.0], [(0, 0), (2, 1)], 0.5, min_count=1)
    assert delta == {(0, 0): 0.5, (2, 1): -0.5}
    assert low == []
    _, _, _, low = binned_delta_map([1.0, 0.0], [(0, 0), (2, 1)], 0.5, min_count=2)
    assert low == [(0, 0), (2, 1)]


@pytest.mark.parametrize("seed", range(10))
def test_per_bin_matches_subsetranking_oracle(seed):
    rng = random.Random(seed)
    n_q, n_g = 30, 20
    g_ids = [i % 6 for i in range(n_g)]
    q_ids = [rng.randrange(6) for _ in range(n_q)]
    cells = [(rng.randrange(3), rng.randrange(3)) for _ in range(n_q)]
    dist = [[rng.random() for _ in range(n_g)] for _ in range(n_q)]
    q = meta(q_ids, [9] * n_q, cells=cells)
    g = meta(g_ids, list(range(n_g)))
    rep = cmc_map(np.array(dist), q, g, min_bin_count=1)
    for cell, m in rep.per_bin_map.items():
        rows = [i for i in range(n_q) if cells[i] == cell]
        _, want, _ = ranking_oracle([dist[i] for i in rows], [q_ids[i] for i in rows], [9] * len(rows),
                             g_ids, list(range(n_g)), (1,), True)
        assert m == pytest.approx(want, abs=1e-12)
        assert rep.delta_map[cell] == pytest.approx(m - rep.map, abs=1e-15)
    weighted = sum(rep.per_bin_count[c] * rep.per_bin_map[c] for c in rep.per_bin_map) / n_q
    assert weighted == pytest.approx(rep.map, abs=1e-9)


# -- protocol plumbing --------------------------------------------------------

def _toy_set(seed=0):
    gen = torch.Generator().manual_seed(seed)
    ids = [0, 0, 1, 1, 2, 2]
    views = ["A", "G"] * 3
    feats = torch.randn(6, 4, generator=gen, dtype=torch.float64)
    return meta(ids, cams=[2, 0] * 3, views=views, feats=feats)


def test_protocol_selection_and_names():
    emb = _toy_set()
    rep = evaluate_embeddings(emb, ProtocolSpec.named("a2g"))
    assert rep.n_queries == 3
    assert ProtocolSpec.named("g2a").name == "g2a"
    with pytest.raises(ProtocolError):
        ProtocolSpec.named("x2y")
    with pytest.raises(ProtocolError):
        evaluate_embeddings(emb, ProtocolSpec.named("a2w"))


def test_same_view_protocol_never_retrieves_self():
    feats = torch.eye(4, dtype=torch.float64)
    emb = meta([0, 1, 2, 3], cams=[0, 1, 2, 3], views=["A"] * 4, feats=feats)
    # every query's only same-id item is itself, so no valid positive remains
    with pytest.raises(ProtocolError):
        evaluate_embeddings(emb, ProtocolSpec.named("a2a"))


def test_evaluation_deterministic_and_report_files(tmp_path):
    emb = _toy_set(3)
    a = evaluate_embeddings(emb, ProtocolSpec())
    b = evaluate_embeddings(emb, ProtocolSpec())
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
    write_report(a, tmp_path, "r")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc["cmc"]) == {"1", "5", "10"}
    assert (tmp_path / "r_cmc.csv").read_text().startswith("rank,cmc\n")
    assert (tmp_path / "r_bins.csv").exists()
