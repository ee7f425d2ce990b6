import math

import numpy as np
import pytest

from khgt import data, model
from khgt.data import (InteractionLog, InteractionRecord, build_item_item_graph,
                       build_user_item_graph, full_subgraph)

import oracles

WEEK = 604800


def tiny_params(I=4, J=5, K=2, R=2, d=4, H=2, M=2, L=1, seed=0, dense=True):
    return model.init_params(I, J, K, R, dim=d, heads=H, channels=M,
                             layers=L, seed=seed, dense_random=dense)


def make_log(triples, I, J, K):
    return InteractionLog([InteractionRecord(*t) for t in triples], I, J, K)


def toy_instance(seed=0, I=6, J=8, K=2, n=40, d=8, H=2, M=2, L=1):
    rng = np.random.default_rng(seed)
    triples = {(int(rng.integers(I)), int(rng.integers(J)), int(rng.integers(K)))
               for _ in range(n)}
    log = make_log([(u, i, b, int(rng.integers(0, 30 * WEEK))) for u, i, b in triples],
                   I, J, K)
    gu = build_user_item_graph(log, WEEK)
    gv = build_item_item_graph(log, rng.integers(0, 3, size=J), cap=4, seed=seed)
    params = model.init_params(I, J, K, gv.num_relations, dim=d, heads=H,
                               channels=M, layers=L, seed=seed, dense_random=True)
    return params, full_subgraph(gu, gv), log


# ---------------------------------------------------------------------------
# temporal encoding

def test_sinusoid_slot_zero_alternates():
    enc = model.sinusoid_encoding([0], 4)[0]
    assert np.array_equal(enc, [0.0, 1.0] * 4)


def test_sinusoid_slot_one_first_entry():
    enc = model.sinusoid_encoding([1], 6)[0]
    assert math.isclose(enc[0], math.sin(1.0), rel_tol=1e-12)
    assert math.isclose(enc[0], 0.841471, abs_tol=1e-6)


def test_sinusoid_bounded():
    enc = model.sinusoid_encoding(np.arange(0, 5000, 37), 8)
    assert (enc >= -1.0).all() and (enc <= 1.0).all()


def test_temporal_encode_matches_oracle():
    params = tiny_params()
    got = model.temporal_encode(params, slot=13, behavior=1)
    want = oracles.temporal(params, 13, 1)
    assert np.allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# channel-gated transforms

def test_single_channel_is_exact_base():
    params = tiny_params(K=1, M=1)
    q, k, v = model.compose_type_transforms(params, 0)
    assert np.array_equal(q, params.ui_q_base[0])
    assert np.array_equal(k, params.ui_k_base[0])
    assert np.array_equal(v, params.ui_v_base[0])


def test_equal_logits_halve_channels():
    params = tiny_params(M=2, dense=False)  # gate logits zero -> uniform
    params.ui_q_base[1] = 0.0
    q, _, _ = model.compose_type_transforms(params, 0)
    assert np.allclose(q, params.ui_q_base[0] / 2.0, atol=1e-15)


def test_compose_matches_oracle():
    params = tiny_params()
    got = model.compose_type_transforms(params, 1)
    want = oracles.compose(params, "behavior", 1)
    for g, w in zip(got, want):
        assert np.allclose(g, np.array(w), atol=1e-12)


# ---------------------------------------------------------------------------
# message propagation

def test_single_neighbor_attention_is_one():
    params = tiny_params()
    target = np.ones(params.dim)
    nbr = np.full((1, params.dim), 0.3)
    _, omega = model.propagate_messages(params, 0, target, nbr, [2])
    assert np.allclose(omega, 1.0, atol=1e-15)


def test_identical_neighbors_split_attention():
    params = tiny_params()
    target = np.linspace(0, 1, params.dim)
    nbr = np.tile(np.linspace(-1, 1, params.dim), (2, 1))
    _, omega = model.propagate_messages(params, 1, target, nbr, [5, 5])
    assert np.allclose(omega, 0.5, atol=1e-12)


def test_propagate_matches_scalar_oracle():
    params = tiny_params(d=4, H=2)
    rng = np.random.default_rng(3)
    target = rng.normal(size=4)
    nbrs = rng.normal(size=(2, 4))
    slots = [1, 7]
    messages, omega = model.propagate_messages(params, 0, target, nbrs, slots)
    want_m, want_o = oracles.propagate(params, 0, target.tolist(),
                                       nbrs.tolist(), slots)
    assert np.allclose(messages, np.array(want_m), atol=1e-10)
    assert np.allclose(omega, np.array(want_o), atol=1e-10)


def test_propagate_requires_neighbors():
    params = tiny_params()
    with pytest.raises(ValueError):
        model.propagate_messages(params, 0, np.zeros(4), np.zeros((0, 4)), [])


# ---------------------------------------------------------------------------
# aggregation

def test_aggregate_empty_is_zero():
    out = model.aggregate_node(np.zeros((0, 6)))
    assert np.array_equal(out, np.zeros(6))


def test_aggregate_positive_passthrough():
    m = np.array([[0.5, 1.0, 2.0, 0.1]])
    assert np.array_equal(model.aggregate_node(m), m[0])


def test_aggregate_two_messages_hand():
    m = np.array([[1.0, -2.0, 0.5, 0.0], [1.0, 1.0, -1.0, -3.0]])
    # sums: [2, -1, -0.5, -3]; LeakyReLU slope 0.01 on the negatives
    want = [2.0, -0.01, -0.005, -0.03]
    assert np.allclose(model.aggregate_node(m), want, atol=1e-15)


def test_item_relation_no_neighbors_zero():
    params = tiny_params()
    out = model.aggregate_item_relations(params, 0, np.ones(4), np.zeros((0, 4)))
    assert np.array_equal(out, np.zeros(4))


def test_item_relation_single_neighbor():
    params = tiny_params(d=4, H=2)
    nbr = np.array([[0.2, -0.4, 0.8, 0.1]])
    got = model.aggregate_item_relations(params, 1, np.ones(4), nbr)
    _, _, v_heads = oracles.compose(params, "relation", 1)
    projected = []
    for h in range(params.heads):
        projected.extend(oracles.matvec(v_heads[h], nbr[0].tolist()))
    assert np.allclose(got, oracles.leaky(projected), atol=1e-12)


def test_item_relation_clique_matches_oracle():
    params = tiny_params(d=4, H=2, seed=5)
    rng = np.random.default_rng(9)
    embs = rng.normal(size=(3, 4))
    got = model.aggregate_item_relations(params, 0, embs[0], embs[1:])
    messages, _ = oracles.propagate(params, 0, embs[0].tolist(),
                                    embs[1:].tolist(), None, kind="relation")
    want = oracles.aggregate(messages, 4)
    assert np.allclose(got, want, atol=1e-10)


# ---------------------------------------------------------------------------
# mutual attention

def test_mutual_singleton_is_value_projection():
    params = tiny_params(K=1, M=1)
    q = np.array([[0.3, -0.2, 0.9, 0.4]])
    got = model.mutual_attention(params, q, side="user")
    want = []
    for h in range(params.heads):
        want.extend(oracles.matvec(params.mu_v[h].tolist(), q[0].tolist()))
    assert np.allclose(got[0], want, atol=1e-12)


def test_mutual_identical_inputs_identical_outputs():
    params = tiny_params()
    q = np.tile([0.5, -0.1, 0.2, 0.8], (3, 1))
    got = model.mutual_attention(params, q, side="item")
    assert np.allclose(got[0], got[1], atol=1e-14)
    assert np.allclose(got[1], got[2], atol=1e-14)


def test_mutual_matches_scalar_oracle():
    params = tiny_params(d=4, H=2, seed=2)
    rng = np.random.default_rng(4)
    qs = rng.normal(size=(2, 4))
    got = model.mutual_attention(params, qs, side="user")
    want = oracles.mutual(params, qs.tolist(), "user")
    assert np.allclose(got, np.array(want), atol=1e-10)


# ---------------------------------------------------------------------------
# gated fusion

def test_fusion_singleton_identity():
    params = tiny_params(K=1, M=1)
    q = np.array([[0.4, 0.1, -0.3, 0.2]])
    got = model.gated_fusion(params, q, None, side="user")
    assert np.allclose(got, q[0], atol=1e-14)


def test_fusion_equal_vectors_ignore_gates():
    params = tiny_params()
    q = np.tile([0.7, -0.2, 0.1, 0.05], (2, 1))
    got = model.gated_fusion(params, q, None, side="user")
    assert np.allclose(got, q[0], atol=1e-14)
    params.fuse_a[:] = 3.0  # gates shift, convex combination unchanged
    got2 = model.gated_fusion(params, q, None, side="user")
    assert np.allclose(got2, q[0], atol=1e-14)


def test_fusion_matches_scalar_oracle():
    params = tiny_params(seed=6)
    rng = np.random.default_rng(6)
    qb = rng.normal(size=(2, 4))
    qr = rng.normal(size=(2, 4))
    got = model.gated_fusion(params, qb, qr, side="item")
    want = oracles.fusion(params, qb.tolist(), qr.tolist())
    assert np.allclose(got, np.array(want), atol=1e-10)


# ---------------------------------------------------------------------------
# layers and encode

def test_isolated_node_layer_output_zero():
    # user 2 and item 3 have no edges at all
    log = make_log([(0, 0, 0, 1), (1, 1, 0, 2), (0, 1, 1, 3)], 3, 4, 2)
    gu = build_user_item_graph(log, WEEK)
    gv = data.empty_item_graph(4)
    params = tiny_params(I=3, J=4, K=2, R=0, d=4)
    sub = full_subgraph(gu, gv)
    u1, v1 = model.forward_layer(params, sub, params.user_emb, params.item_emb)
    assert np.allclose(u1[2], 0.0, atol=1e-14)
    assert np.allclose(v1[3], 0.0, atol=1e-14)
    assert not np.allclose(u1[0], 0.0)


def test_encode_single_layer_equals_forward_layer():
    params, sub, _ = toy_instance(L=1)
    phi_u, phi_v = model.encode(params, sub)
    u1, v1 = model.forward_layer(params, sub,
                                 params.user_emb[sub.user_ids],
                                 params.item_emb[sub.item_ids])
    assert np.allclose(phi_u, u1, atol=1e-12)
    assert np.allclose(phi_v, v1, atol=1e-12)


def test_encode_two_layers_is_layer_sum():
    params, sub, _ = toy_instance(L=2)
    phi_u, phi_v = model.encode(params, sub)
    u1, v1 = model.forward_layer(params, sub,
                                 params.user_emb[sub.user_ids],
                                 params.item_emb[sub.item_ids])
    u2, v2 = model.forward_layer(params, sub, u1, v1)
    assert np.allclose(phi_u, u1 + u2, atol=1e-10)
    assert np.allclose(phi_v, v1 + v2, atol=1e-10)


def test_encode_shapes():
    params, sub, _ = toy_instance()
    phi_u, phi_v = model.encode(params, sub)
    assert phi_u.shape == (sub.graph.num_users, params.dim)
    assert phi_v.shape == (sub.graph.num_items, params.dim)
    assert np.isfinite(phi_u).all() and np.isfinite(phi_v).all()


# ---------------------------------------------------------------------------
# scoring

def test_score_zero_embedding_annihilates():
    params = tiny_params()
    assert model.score(params, np.zeros(4), np.ones(4)) == 0.0


def test_score_unit_basis():
    params = tiny_params()
    params.score_z[:] = 1.0
    e1 = np.eye(4)[0]
    assert model.score(params, e1, e1) == 1.0


def test_score_matches_hand_dot():
    params = tiny_params(d=8, H=2)
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=8), rng.normal(size=8)
    want = oracles.dot(params.score_z.tolist(), [x * y for x, y in zip(a, b)])
    assert math.isclose(model.score(params, a, b), want, rel_tol=1e-12)


# ---------------------------------------------------------------------------
# model-level invariants

def test_permutation_equivariance():
    params, sub, log = toy_instance(seed=11)
    rng = np.random.default_rng(11)
    J = sub.graph.num_items
    perm = rng.permutation(J)
    # relabel item ids in both graphs and permute embedding rows to match
    relabeled = [InteractionRecord(r.user_id, int(perm[r.item_id]), r.behavior, r.timestamp)
                 for r in log.records]
    log2 = InteractionLog(relabeled, log.num_users, J, log.num_behaviors)
    gu2 = build_user_item_graph(log2, WEEK)
    params2 = params.copy()
    params2.item_emb[perm] = params.item_emb
    # rebuild the relation graph by relabeling its edges directly
    adjacency = []
    for r in range(sub.item_graph.num_relations):
        d_, s_ = sub.item_graph.edges(r)
        pairs = {(int(perm[a]), int(perm[b])) for a, b in zip(d_, s_) if a < b}
        adjacency.append(data._symmetric_csr(J, pairs))
    gv2 = data.ItemRelationGraph(J, adjacency, list(sub.item_graph.kinds))
    phi_u, phi_v = model.encode(params, sub)
    phi_u2, phi_v2 = model.encode(params2, full_subgraph(gu2, gv2))
    for user in range(sub.graph.num_users):
        for item in range(J):
            s1 = model.score(params, phi_u[user], phi_v[item])
            s2 = model.score(params2, phi_u2[user], phi_v2[int(perm[item])])
            assert abs(s1 - s2) < 1e-9


def test_temporal_sensitivity_witness():
    params = tiny_params(d=8, H=2, seed=3)
    rng = np.random.default_rng(3)
    target = rng.normal(size=8)
    nbrs = rng.normal(size=(3, 8))
    _, omega_a = model.propagate_messages(params, 0, target, nbrs, [1, 2, 3])
    _, omega_b = model.propagate_messages(params, 0, target, nbrs, [1, 2, 9])
    assert not np.allclose(omega_a, omega_b, atol=1e-12)


def test_single_channel_forward_bit_identical_to_gate_free(monkeypatch):
    params, sub, _ = toy_instance(M=1, seed=13)
    phi_u, phi_v = model.encode(params, sub)

    original = model._compose

    def gate_free(weights, kind, index, p, trace):
        base = {role: weights[f"{kind}_{role}_base"][0] for role in ("q", "k", "v")}
        return base["q"], base["k"], base["v"]

    monkeypatch.setattr(model, "_compose", gate_free)
    phi_u2, phi_v2 = model.encode(params, sub)
    monkeypatch.setattr(model, "_compose", original)
    assert np.array_equal(phi_u, phi_u2)
    assert np.array_equal(phi_v, phi_v2)


def test_locality_one_hop():
    params, sub, log = toy_instance(seed=17, L=1)
    gu, gv = sub.graph, sub.item_graph
    # restrict to the closed 1-hop neighborhood of user 0 (plus the item
    # neighbors' own neighborhoods are NOT needed for the user's layer-1 value)
    users, items = data.khop_nodes(gu, gv, [0], [], 1)
    sub2 = data.induce_subgraph(gu, gv, users, items)
    phi_u_full, _ = model.encode(params, sub)
    phi_u_sub, _ = model.encode(params, sub2)
    local = int(np.searchsorted(sub2.user_ids, 0))
    assert np.allclose(phi_u_sub[local], phi_u_full[0], atol=1e-6)


def test_normalization_trace_clean():
    params, sub, _ = toy_instance(seed=19, L=2)
    trace = model.ForwardTrace()
    model.encode(params, sub, trace=trace)
    assert trace.max_softmax_deviation < 1e-9


def test_variants_all_run():
    params, sub, _ = toy_instance(seed=23, L=2)
    base_u, base_v = model.encode(params, sub)
    for variant in model.VARIANTS:
        u, v = model.encode(params, sub, variant=variant)
        assert u.shape == base_u.shape and np.isfinite(u).all()
        assert v.shape == base_v.shape and np.isfinite(v).all()
