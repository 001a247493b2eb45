import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import graphs, make_graph, sbm
from fsmirl import _accel
from fsmirl.graph import SplitAssignment, neighbors
from fsmirl.sampler import (ATTENTION, CAUSAL, EMPTY_SIGNATURE, AttentionProjection,
                            SamplingProfile, attention_weight, build_profiles, causal_weight,
                            causal_weight_table, sample_neighbors, sample_table,
                            sampling_profile, signature, signature_table, uniform_profiles)


# -- independent oracles -----------------------------------------------------

def sig_oracle(adj, known, C, v):
    nb = adj[v]
    labs = [known[u] for u in nb if known[u] >= 0]
    if not labs:
        return None
    hist = []
    for c in range(C):
        p = Fraction(labs.count(c), len(labs))
        # nearest quarter, ties upward
        q = math.floor(p * 4 + Fraction(1, 2))
        hist.append(Fraction(q, 4))
    return tuple(hist), int(math.floor(math.log2(len(nb))))


def weight_oracle(adj, known, C, v):
    sigs = {u: (sig_oracle(adj, known, C, u) if adj[u] else None) for u in adj}
    pop = [u for u in adj if known[u] >= 0]
    match_u = [u for u in pop if sigs[u] == sigs[v]]
    match_joint = [u for u in match_u if known[u] == known[v]]
    return Fraction(len(match_u), len(pop) * len(match_joint))


def adjacency(g):
    return {v: [int(u) for u in g.edge_list()[g.edge_list()[:, 0] == v][:, 1]] +
            [int(u) for u in g.edge_list()[g.edge_list()[:, 1] == v][:, 0]]
            for v in range(g.num_nodes)}


# -- signature ---------------------------------------------------------------

def test_signature_examples():
    g = make_graph(5, [(0, k) for k in range(1, 5)], [0, 0, 0, 0, 0], C=2)
    s = signature(g, 0, g.labels)
    assert s.histogram == (1, 0) and s.degree_bucket == 2
    g = make_graph(5, [(0, k) for k in range(1, 5)], [0, 0, 0, 0, 1], C=2)
    s = signature(g, 0, g.labels)
    assert s.histogram == (Fraction(3, 4), Fraction(1, 4)) and s.degree_bucket == 2


def test_signature_unknown_neighbors_excluded():
    g = make_graph(4, [(0, 1), (0, 2), (0, 3)], [0, 1, 1, 0], C=2)
    known = np.array([0, 1, -1, -1])
    s = signature(g, 0, known)
    assert s.histogram == (0, 1) and s.degree_bucket == 1
    assert signature(g, 0, np.full(4, -1)) is None
    with pytest.raises(ValueError):
        signature(make_graph(2, [], [0, 0]), 0, np.zeros(2, int))


def test_signature_matches_oracle_sbm():
    g = sbm(30, 3, 0.4, 0.1, seed=2)
    adj = adjacency(g)
    known = g.labels.copy()
    known[::4] = -1
    ids = signature_table(g, known)
    by_key = {}
    for v in range(30):
        if not adj[v]:
            continue
        want = sig_oracle(adj, known, 3, v)
        got = signature(g, v, known)
        if want is None:
            assert got is None and ids[v] == EMPTY_SIGNATURE
            continue
        assert (got.histogram, got.degree_bucket) == want
        by_key.setdefault(want, set()).add(int(ids[v]))
    # table ids are a faithful encoding of the signatures
    assert all(len(s) == 1 for s in by_key.values())
    assert len({next(iter(s)) for s in by_key.values()}) == len(by_key)


@given(graphs(min_nodes=2))
def test_signature_histogram_sums_to_one(g):
    for v in range(g.num_nodes):
        if g.degrees[v] == 0:
            continue
        s = signature(g, v, g.labels)
        # one quarter of slack holds for C <= 3 (per-class rounding error < 1/8)
        assert abs(sum(s.histogram) - 1) <= Fraction(1, 4)
        assert s.degree_bucket >= 0
        assert all(4 * h == int(4 * h) for h in s.histogram)


# -- causal weight -----------------------------------------------------------

def test_causal_weight_uniform_population():
    # complete graph on one label: every node has the same signature
    n = 6
    g = make_graph(n, [(u, v) for u in range(n) for v in range(u + 1, n)], [0] * n)
    sigs = signature_table(g, g.labels)
    for v in range(n):
        assert causal_weight(g, v, g.labels, sigs) == 1 / n


def test_causal_weight_toy_population():
    # 10 known nodes; a signature class of 4 holding 2 with label 0
    labels = np.array([0, 0, 1, 1, 0, 0, 1, 1, 0, 1])
    sigs = np.array([7, 7, 7, 7, 1, 2, 3, 4, 5, 6])
    assert causal_weight(None, 0, labels, sigs) == pytest.approx(0.2, abs=0)
    assert causal_weight(None, 0, labels, sigs) == 4 / (10 * 2)
    # unique holder of a size-1 class
    assert causal_weight(None, 4, labels, sigs) == 1 / 10


def test_causal_weight_requires_known_label():
    labels = np.array([0, -1])
    sigs = np.array([0, 0])
    with pytest.raises(ValueError):
        causal_weight(None, 1, labels, sigs)
    with pytest.raises(ValueError):
        causal_weight(None, 0, labels, np.array([EMPTY_SIGNATURE, 0]))


@given(graphs(min_nodes=2, max_nodes=12), st.integers(0, 2 ** 16))
def test_causal_weight_matches_counting_oracle(g, seed):
    rng = np.random.default_rng(seed)
    known = np.where(rng.random(g.num_nodes) < 0.7, g.labels, -1)
    adj = adjacency(g)
    sigs = signature_table(g, known)
    table = causal_weight_table(known, sigs)
    n_pop = int(np.count_nonzero(known >= 0))
    for v in range(g.num_nodes):
        if known[v] < 0 or sigs[v] == EMPTY_SIGNATURE:
            assert np.isnan(table[v])
            continue
        want = weight_oracle(adj, known, g.num_classes, v)
        got = causal_weight(g, v, known, sigs)
        assert got == float(want)
        assert table[v] == float(want)
        assert 1 / n_pop <= got <= 1


# -- attention ---------------------------------------------------------------

def test_attention_examples():
    proj = AttentionProjection.init(3, seed=1)
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(attention_weight(proj, x, [[1, 2, 3], [1, 2, 3]]), [0.5, 0.5])
    np.testing.assert_array_equal(attention_weight(proj, x, [[1, 2, 3]]), [1.0])


def test_attention_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    d = 4
    proj = AttentionProjection.init(d, seed=9)
    xt = rng.normal(size=d)
    xs = rng.normal(size=(3, d))
    scores = []
    for x in xs:
        s = 0.0
        for k in range(d):
            s += proj.vector[k] * xt[k] + proj.vector[d + k] * x[k]
        scores.append(s)
    m = max(scores)
    ex = [math.exp(s - m) for s in scores]
    want = [e / sum(ex) for e in ex]
    np.testing.assert_allclose(attention_weight(proj, xt, xs), want, atol=1e-12, rtol=0)


def test_attention_errors():
    proj = AttentionProjection.init(2, seed=0)
    with pytest.raises(ValueError):
        attention_weight(proj, [0, 0], np.zeros((0, 2)))
    with pytest.raises(ValueError):
        attention_weight(proj, [0, 0, 0], [[1, 1, 1]])
    with pytest.raises(FloatingPointError, match="node 5"):
        attention_weight(proj, [0, 0], [[np.inf, 0]], node=5)


def test_projection_kaiming_and_seeded():
    a = AttentionProjection.init(50, seed=4)
    b = AttentionProjection.init(50, seed=4)
    np.testing.assert_array_equal(a.vector, b.vector)
    assert a.vector.shape == (100,)
    assert np.all(np.abs(a.vector) <= math.sqrt(6 / 100))


@given(st.integers(0, 1000), st.floats(0.1, 10))
def test_attention_argmax_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    proj = AttentionProjection.init(3, seed)
    xt, xs = rng.normal(size=3), rng.normal(size=(5, 3))
    w1 = attention_weight(proj, xt, xs)
    w2 = attention_weight(AttentionProjection(c * proj.vector), xt, xs)
    assert np.argmax(w1) == np.argmax(w2)


# -- profiles ----------------------------------------------------------------

def _ring_plus(labels, extra=()):
    n = len(labels)
    edges = [(k, (k + 1) % n) for k in range(n)] + list(extra)
    return make_graph(n, edges, labels, d=3, seed=5)


def test_profile_all_homogeneous():
    g = make_graph(5, [(0, k) for k in range(1, 5)] + [(1, 2), (3, 4)], [0] * 5)
    known = g.labels
    sigs = signature_table(g, known)
    p = sampling_profile(g, 0, known, sigs, AttentionProjection.init(3, 0))
    assert p.branch == (CAUSAL,) * 4
    cw = np.array([causal_weight(g, u, known, sigs) for u in p.neighbors])
    np.testing.assert_allclose(p.weights, cw / cw.sum(), atol=1e-15)


def test_profile_all_heterogeneous():
    g = make_graph(4, [(0, 1), (0, 2), (0, 3)], [0, 1, 1, 1], C=2)
    proj = AttentionProjection.init(3, 2)
    sigs = signature_table(g, g.labels)
    p = sampling_profile(g, 0, g.labels, sigs, proj)
    assert p.branch == (ATTENTION,) * 3
    np.testing.assert_allclose(p.weights, attention_weight(proj, g.features[0], g.features[1:]),
                               atol=1e-15)


def test_profile_two_and_two():
    g = make_graph(7, [(0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (2, 6), (5, 6)],
                   [0, 0, 0, 1, 1, 0, 1], C=2)
    proj = AttentionProjection.init(3, 8)
    known = g.labels
    sigs = signature_table(g, known)
    p = sampling_profile(g, 0, known, sigs, proj)
    assert p.branch == (CAUSAL, CAUSAL, ATTENTION, ATTENTION)
    cw = np.array([causal_weight(g, u, known, sigs) for u in (1, 2)])
    aw = attention_weight(proj, g.features[0], g.features[[3, 4]])
    want = np.concatenate([0.5 * cw / cw.sum(), 0.5 * aw])
    np.testing.assert_allclose(p.weights, want, atol=1e-15)
    assert p.weights[:2].sum() == pytest.approx(0.5)


def test_profile_inference_all_attention():
    g = sbm(15, 2, 0.5, 0.2, seed=1)
    proj = AttentionProjection.init(g.num_features, 0)
    hidden = np.full(15, -1)
    table = build_profiles(g, hidden, proj)
    assert not table.causal.any()


def test_profile_isolated_empty():
    g = make_graph(3, [(0, 1)])
    p = sampling_profile(g, 2, g.labels, signature_table(g, g.labels), AttentionProjection.init(3, 0))
    assert p.neighbors.size == 0 and p.weights.size == 0


@given(graphs(min_nodes=2), st.integers(0, 2 ** 16))
def test_profile_table_matches_per_node(g, seed):
    rng = np.random.default_rng(seed)
    known = SplitAssignment.from_sets(
        g.num_nodes, train=np.flatnonzero(rng.random(g.num_nodes) < 0.6)).known_labels(g.labels)
    proj = AttentionProjection.init(g.num_features, seed)
    sigs = signature_table(g, known)
    table = build_profiles(g, known, proj)
    for v in range(g.num_nodes):
        p = sampling_profile(g, v, known, sigs, proj)
        q = table.profile(g, v)
        np.testing.assert_array_equal(p.neighbors, q.neighbors)
        np.testing.assert_allclose(p.weights, q.weights, atol=1e-12)
        assert p.branch == q.branch
        if p.neighbors.size:
            assert np.all(p.weights >= 0)
            assert abs(p.weights.sum() - 1) <= 1e-10
        for u, b in zip(p.neighbors, p.branch):
            same = known[v] >= 0 and known[u] == known[v] and sigs[u] != EMPTY_SIGNATURE
            assert (b == CAUSAL) == bool(same)


@given(graphs(min_nodes=2, max_nodes=9), st.integers(0, 2 ** 16))
def test_profile_permutation_equivariant(g, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g.num_nodes)  # old id -> new id
    edges = perm[g.edge_list()] if g.num_edges else np.zeros((0, 2), int)
    inv = np.argsort(perm)
    h = make_graph(g.num_nodes, edges, g.labels[inv], C=g.num_classes)
    h = h.with_features(g.features[inv])
    proj = AttentionProjection.init(g.num_features, seed)
    a = build_profiles(g, g.labels, proj)
    b = build_profiles(h, h.labels, proj)
    for v in range(g.num_nodes):
        pa, pb = a.profile(g, v), b.profile(h, int(perm[v]))
        wa = dict(zip(perm[pa.neighbors].tolist(), pa.weights))
        wb = dict(zip(pb.neighbors.tolist(), pb.weights))
        assert wa.keys() == wb.keys()
        for k in wa:
            assert wa[k] == pytest.approx(wb[k], abs=1e-12)


def test_profile_export_json():
    import json
    g = _ring_plus([0, 1, 0, 1])
    t = build_profiles(g, g.labels, AttentionProjection.init(3, 0))
    body = json.loads(t.to_json(g))
    assert set(body) == {"0", "1", "2", "3"}
    assert all(len(trip) == 3 for trip in body["0"])


# -- drawing -----------------------------------------------------------------

def _profile(weights):
    w = np.asarray(weights, dtype=float)
    return SamplingProfile(0, np.arange(1, w.size + 1), w, (ATTENTION,) * w.size)


def test_sample_single_neighbor_repeated():
    ids, warned = sample_neighbors(_profile([1.0]), 3, seed=0)
    assert ids.tolist() == [1, 1, 1] and not warned


def test_sample_zero_size_warns():
    ids, warned = sample_neighbors(_profile([1.0]), 0, seed=0)
    assert ids.size == 0 and warned


def test_sample_zero_weight_never_drawn():
    prof = _profile([0.5, 0.0, 0.5])
    for seed in range(10_000):
        ids, _ = sample_neighbors(prof, 1, seed)
        assert ids[0] != 2
    # without replacement with exhausted mass still avoids it
    ids, _ = sample_neighbors(_profile([1.0, 0.0]), 2, seed=3)
    assert 2 not in ids.tolist()


def test_sample_frequency():
    offsets = np.array([0, 2])
    targets = np.array([10, 20])
    w = np.array([0.8, 0.2])
    u = np.random.default_rng(123).random((100_000, 1))
    ids = _accel.draw_neighbors(offsets, targets, w, np.zeros(100_000, dtype=np.int64), u)
    assert abs(np.mean(ids == 10) - 0.8) < 0.01


def test_sample_without_replacement_when_deg_ge_s():
    prof = _profile([0.1, 0.2, 0.3, 0.4])
    for seed in range(200):
        ids, _ = sample_neighbors(prof, 4, seed)
        assert sorted(ids.tolist()) == [1, 2, 3, 4]


def test_sample_deterministic():
    prof = _profile([0.1, 0.2, 0.3, 0.4])
    a, _ = sample_neighbors(prof, 7, 11)
    b, _ = sample_neighbors(prof, 7, 11)
    np.testing.assert_array_equal(a, b)


@given(graphs(min_nodes=2), st.integers(1, 6), st.integers(0, 100))
def test_draw_backends_agree(g, s, seed):
    table = uniform_profiles(g)
    nodes = np.arange(g.num_nodes)
    u = np.random.default_rng(seed).random((g.num_nodes, s))
    a = _accel.draw_neighbors_nb(g.offsets, g.targets, table.weights, nodes, u)
    b = _accel.draw_neighbors_np(g.offsets, g.targets, table.weights, nodes, u)
    np.testing.assert_array_equal(a, b)
    for v in range(g.num_nodes):
        nb = set(neighbors(g, v).tolist())
        row = a[v].tolist()
        if not nb:
            assert row == [-1] * s
        else:
            assert set(row) <= nb
            if len(nb) >= s:
                assert len(set(row)) == s


def test_sample_table_seed_streams():
    g = sbm(20, 2, 0.6, 0.2, seed=0)
    t = uniform_profiles(g)
    a = sample_table(g, t, [1, 2, 3], 4, seed=5, epoch=1, layer=1)
    b = sample_table(g, t, [3, 2, 1], 4, seed=5, epoch=1, layer=1)
    np.testing.assert_array_equal(a, b[::-1])
