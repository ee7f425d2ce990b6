"""Temporal multi-behavior graph transformer over user-item and item-item graphs.

One forward pass per (sub)graph: per-behavior attentive message passing
with sinusoidal edge-time encodings, channel-gated query/key/value
transforms shared across behavior types, type-level mutual attention, and
gated fusion into per-node embeddings. The same code path runs on plain
arrays (inference) or on tape nodes (training), because every primitive in
`autodiff` accepts either.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from khgt import autodiff as ad
from khgt.autodiff import value_of
from khgt.data import ItemRelationGraph, MultiBehaviorGraph, SubGraph, substream

LEAKY_SLOPE = 0.01
STREAM_INIT = 21
STREAM_DROPOUT = 22

# ablation switches: GA swaps attention for uniform graph-conv averaging,
# MR removes mutual attention, BF mean-pools instead of gated fusion,
# Ti drops the temporal encoding, KG drops the item-item graph
VARIANTS = ("GA", "MR", "BF", "Ti", "KG")

TENSOR_FIELDS = (
    "user_emb", "item_emb", "time_proj",
    "ui_q_base", "ui_k_base", "ui_v_base",
    "ii_q_base", "ii_k_base", "ii_v_base",
    "ui_gate_q", "ui_gate_k", "ui_gate_v",
    "ii_gate_q", "ii_gate_k", "ii_gate_v",
    "mu_q", "mu_k", "mu_v",
    "mi_q", "mi_k", "mi_v",
    "fuse_a", "fuse_b",
    "fuse_B1_u", "fuse_B2_u", "fuse_B1_v", "fuse_B2_v",
    "fuse_c0_u", "fuse_c0_v", "fuse_c1_u", "fuse_c1_v",
    "score_z",
)


@dataclass
class ModelParams:
    """All trainable tensors plus the hyperparameters that shape them."""

    num_users: int
    num_items: int
    num_behaviors: int
    num_relations: int
    dim: int
    heads: int
    channels: int
    layers: int
    user_emb: np.ndarray
    item_emb: np.ndarray
    time_proj: np.ndarray
    ui_q_base: np.ndarray
    ui_k_base: np.ndarray
    ui_v_base: np.ndarray
    ii_q_base: np.ndarray
    ii_k_base: np.ndarray
    ii_v_base: np.ndarray
    ui_gate_q: np.ndarray
    ui_gate_k: np.ndarray
    ui_gate_v: np.ndarray
    ii_gate_q: np.ndarray
    ii_gate_k: np.ndarray
    ii_gate_v: np.ndarray
    mu_q: np.ndarray
    mu_k: np.ndarray
    mu_v: np.ndarray
    mi_q: np.ndarray
    mi_k: np.ndarray
    mi_v: np.ndarray
    fuse_a: np.ndarray
    fuse_b: np.ndarray
    fuse_B1_u: np.ndarray
    fuse_B2_u: np.ndarray
    fuse_B1_v: np.ndarray
    fuse_B2_v: np.ndarray
    fuse_c0_u: np.ndarray
    fuse_c0_v: np.ndarray
    fuse_c1_u: np.ndarray
    fuse_c1_v: np.ndarray
    score_z: np.ndarray

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_FIELDS}

    def copy(self) -> "ModelParams":
        kwargs = {name: getattr(self, name).copy() for name in TENSOR_FIELDS}
        return ModelParams(self.num_users, self.num_items, self.num_behaviors,
                           self.num_relations, self.dim, self.heads,
                           self.channels, self.layers, **kwargs)

    def total_entries(self) -> int:
        return sum(t.size for t in self.tensors().values())


def init_params(num_users: int, num_items: int, num_behaviors: int,
                num_relations: int, *, dim: int = 16, heads: int = 2,
                channels: int = 2, layers: int = 2, seed: int = 0,
                dense_random: bool = False) -> ModelParams:
    """Uniform(-1/sqrt(dim), 1/sqrt(dim)) weights; gate logits and biases zero.

    `dense_random` draws every tensor (gates and biases included) from the
    same uniform range, which is what gradient checking wants: no exact
    zeros and no degenerate symmetric points.
    """
    if dim % heads != 0:
        raise ValueError(f"dim {dim} must be divisible by heads {heads}")
    if channels > num_behaviors:
        raise ValueError(f"channels {channels} must not exceed behavior types {num_behaviors}")
    if channels < 1 or layers < 1:
        raise ValueError("channels and layers must be >= 1")
    rng = substream(seed, STREAM_INIT)
    s = 1.0 / np.sqrt(dim)
    dh = dim // heads

    def uniform(*shape):
        return rng.uniform(-s, s, size=shape)

    def gates(*shape):
        return uniform(*shape) if dense_random else np.zeros(shape)

    K, R, M, H, d = num_behaviors, num_relations, channels, heads, dim
    return ModelParams(
        num_users=num_users, num_items=num_items, num_behaviors=K,
        num_relations=R, dim=d, heads=H, channels=M, layers=layers,
        user_emb=uniform(num_users, d),
        item_emb=uniform(num_items, d),
        time_proj=uniform(K, 2 * d, d),
        ui_q_base=uniform(M, H, dh, d), ui_k_base=uniform(M, H, dh, d),
        ui_v_base=uniform(M, H, dh, d),
        ii_q_base=uniform(M, H, dh, d), ii_k_base=uniform(M, H, dh, d),
        ii_v_base=uniform(M, H, dh, d),
        ui_gate_q=gates(K, M), ui_gate_k=gates(K, M), ui_gate_v=gates(K, M),
        ii_gate_q=gates(R, M), ii_gate_k=gates(R, M), ii_gate_v=gates(R, M),
        mu_q=uniform(H, dh, d), mu_k=uniform(H, dh, d), mu_v=uniform(H, dh, d),
        mi_q=uniform(H, dh, d), mi_k=uniform(H, dh, d), mi_v=uniform(H, dh, d),
        fuse_a=uniform(d), fuse_b=uniform(d),
        fuse_B1_u=uniform(d, d), fuse_B2_u=uniform(d, d),
        fuse_B1_v=uniform(d, d), fuse_B2_v=uniform(d, d),
        fuse_c0_u=gates(1), fuse_c0_v=gates(1),
        fuse_c1_u=gates(d), fuse_c1_v=gates(d),
        score_z=uniform(d),
    )


# ---------------------------------------------------------------------------
# forward-pass instrumentation

class ForwardTrace:
    """Records softmax normalization health and, optionally, attention weights."""

    def __init__(self, collect: bool = False):
        self.collect = collect
        self.max_softmax_deviation = 0.0
        self.type_attention: list[tuple[int, str, np.ndarray]] = []  # (layer, side, (N,H,T,T))
        self.behavior_gates: list[tuple[int, str, np.ndarray]] = []  # (layer, side, (N,K))
        self.relation_gates: list[tuple[int, np.ndarray]] = []       # (layer, (N,R))

    def check_sums(self, sums: np.ndarray) -> None:
        if sums.size:
            dev = float(np.abs(sums - 1.0).max())
            if dev > self.max_softmax_deviation:
                self.max_softmax_deviation = dev


def _check_segment_softmax(trace: ForwardTrace | None, omega, segments, num_segments: int):
    if trace is None:
        return
    w = value_of(omega)
    w2 = w[:, None] if w.ndim == 1 else w
    sums = np.zeros((num_segments, w2.shape[1]))
    np.add.at(sums, segments, w2)
    occupied = np.bincount(segments, minlength=num_segments) > 0
    trace.check_sums(sums[occupied])


def _check_softmax(trace: ForwardTrace | None, weights):
    if trace is None:
        return
    trace.check_sums(value_of(weights).sum(axis=-1))


# ---------------------------------------------------------------------------
# building blocks

def sinusoid_encoding(slots, dim: int) -> np.ndarray:
    """Per-slot sinusoid features of width 2*dim.

    Index i holds sin(slot / 10000^(i/dim)) for even i and the cosine of
    the same argument for odd i.
    """
    slots = np.asarray(slots, dtype=np.float64).reshape(-1, 1)
    idx = np.arange(2 * dim)
    angles = slots / np.power(10000.0, idx / dim)
    return np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))


def _head_slice(tensor, head: int, head_dim: int, dim: int):
    flat = ad.reshape(tensor, (-1, head_dim * dim))
    return ad.reshape(ad.gather_rows(flat, np.array([head])), (head_dim, dim))


def _flat_heads_t(tensor, heads: int, head_dim: int, dim: int):
    """(H, dh, d) -> (d, H*dh) so x @ result stacks all head projections."""
    return ad.transpose_last2(ad.reshape(tensor, (heads * head_dim, dim)))


def _time_projection(weights, behavior: int, num_behaviors: int, dim: int):
    flat = ad.reshape(weights["time_proj"], (num_behaviors, 2 * dim * dim))
    row = ad.gather_rows(flat, np.array([behavior]))
    return ad.reshape(row, (2 * dim, dim))


def temporal_encode(params: ModelParams, slot: int, behavior: int,
                    weights: Mapping | None = None) -> np.ndarray:
    """Projected sinusoid embedding of one time slot under one behavior type."""
    w = weights if weights is not None else params.tensors()
    pre = sinusoid_encoding([slot], params.dim)
    proj = _time_projection(w, behavior, params.num_behaviors, params.dim)
    return ad.reshape(ad.matmul(pre, proj), (params.dim,))


def _compose(weights, kind: str, index: int, params: ModelParams,
             trace: ForwardTrace | None):
    """Gate the M base channels into one type-specific (Q, K, V) triple."""
    M, H, dh, d = params.channels, params.heads, params.head_dim, params.dim
    out = []
    for role in ("q", "k", "v"):
        logits = ad.gather_rows(weights[f"{kind}_gate_{role}"], np.array([index]))
        gate = ad.softmax(logits)  # (1, M)
        _check_softmax(trace, gate)
        base = ad.reshape(weights[f"{kind}_{role}_base"], (M, H * dh * d))
        mixed = ad.reshape(ad.matmul(gate, base), (H, dh, d))
        out.append(mixed)
    return tuple(out)


def compose_type_transforms(params: ModelParams, index: int,
                            kind: str = "behavior") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array-valued (Q, K, V) for one behavior type or item relation."""
    prefix = {"behavior": "ui", "relation": "ii"}[kind]
    return _compose(params.tensors(), prefix, index, params, None)


def _edge_attention(p_target, p_source, qkv, segments, num_segments: int,
                    params: ModelParams, trace: ForwardTrace | None,
                    uniform: bool = False):
    """Multi-head attention over edges grouped by target node.

    Returns per-edge messages (E, d) — head outputs concatenated — and the
    attention weights (E, H). `uniform` replaces attention with 1/degree
    averaging (the graph-convolution ablation).
    """
    H, dh = params.heads, params.head_dim
    E = value_of(p_target).shape[0]
    Q, K, V = qkv
    values = ad.matmul(p_source, _flat_heads_t(V, H, dh, params.dim))  # (E, H*dh)
    if uniform:
        counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
        omega = np.repeat((1.0 / counts[segments])[:, None], H, axis=1)
    else:
        queries = ad.matmul(p_target, _flat_heads_t(Q, H, dh, params.dim))
        keys = ad.matmul(p_source, _flat_heads_t(K, H, dh, params.dim))
        prod = ad.mul(ad.reshape(queries, (E, H, dh)), ad.reshape(keys, (E, H, dh)))
        logits = ad.mul(ad.sum_axis(prod, axis=2), 1.0 / np.sqrt(dh))  # (E, H)
        omega = ad.segment_softmax(logits, segments, num_segments)
        _check_segment_softmax(trace, omega, segments, num_segments)
    weighted = ad.mul(ad.reshape(omega, (E, H, 1)), ad.reshape(values, (E, H, dh)))
    messages = ad.reshape(weighted, (E, H * dh))
    return messages, omega


def propagate_messages(params: ModelParams, behavior: int, target_embedding,
                       neighbor_embeddings, slots, *, side: str = "user",
                       weights: Mapping | None = None):
    """Messages flowing to one node from its typed neighborhood.

    `side` names the target: "user" receives from items, "item" from users.
    Returns (per-edge messages (n, d), attention weights (n, H)).
    """
    w = weights if weights is not None else params.tensors()
    neighbors = np.asarray(neighbor_embeddings, dtype=np.float64)
    n = neighbors.shape[0]
    if n == 0:
        raise ValueError("propagate_messages needs at least one neighbor")
    target = np.broadcast_to(np.asarray(target_embedding, dtype=np.float64),
                             neighbors.shape)
    if slots is not None:
        tbar = ad.matmul(sinusoid_encoding(slots, params.dim),
                         _time_projection(w, behavior, params.num_behaviors, params.dim))
        p_target = ad.add(target, tbar)
        p_source = ad.add(neighbors, tbar)
    else:
        p_target, p_source = target, neighbors
    qkv = _compose(w, "ui", behavior, params, None)
    seg = np.zeros(n, dtype=np.intp)
    return _edge_attention(p_target, p_source, qkv, seg, 1, params, None)


def aggregate_node(messages) -> np.ndarray:
    """LeakyReLU over the message sum; no neighbors means a zero vector."""
    m = np.asarray(messages, dtype=np.float64)
    if m.shape[0] == 0:
        return np.zeros(m.shape[1])
    return ad.leaky_relu(m.sum(axis=0), LEAKY_SLOPE)


def aggregate_item_relations(params: ModelParams, relation: int,
                             target_embedding, neighbor_embeddings) -> np.ndarray:
    """Attentive aggregate over one item-item relation (no temporal term)."""
    neighbors = np.asarray(neighbor_embeddings, dtype=np.float64)
    if neighbors.shape[0] == 0:
        return np.zeros(params.dim)
    w = params.tensors()
    target = np.broadcast_to(np.asarray(target_embedding, dtype=np.float64),
                             neighbors.shape)
    qkv = _compose(w, "ii", relation, params, None)
    seg = np.zeros(neighbors.shape[0], dtype=np.intp)
    messages, _ = _edge_attention(target, neighbors, qkv, seg, 1, params, None)
    agg = ad.segment_sum(messages, seg, 1)
    return value_of(ad.reshape(ad.leaky_relu(agg, LEAKY_SLOPE), (params.dim,)))


def _mutual_attention(weights, stacked, side: str, params: ModelParams,
                      trace: ForwardTrace | None, layer: int):
    """Type-level attention across the stacked per-type aggregates (N, T, d)."""
    H, dh, d = params.heads, params.head_dim, params.dim
    prefix = "mu" if side == "user" else "mi"
    shape = value_of(stacked).shape
    outs = []
    lam_collect = []
    for h in range(H):
        qh = _head_slice(weights[f"{prefix}_q"], h, dh, d)
        kh = _head_slice(weights[f"{prefix}_k"], h, dh, d)
        vh = _head_slice(weights[f"{prefix}_v"], h, dh, d)
        a = ad.matmul(stacked, ad.transpose_last2(qh))  # (N, T, dh)
        b = ad.matmul(stacked, ad.transpose_last2(kh))
        logits = ad.mul(ad.matmul(a, ad.transpose_last2(b)), 1.0 / np.sqrt(dh))
        lam = ad.softmax(logits)  # (N, T, T), rows over source types
        _check_softmax(trace, lam)
        if trace is not None and trace.collect:
            lam_collect.append(value_of(lam))
        v = ad.matmul(stacked, ad.transpose_last2(vh))
        outs.append(ad.matmul(lam, v))
    if trace is not None and trace.collect:
        trace.type_attention.append((layer, side, np.stack(lam_collect, axis=1)))
    return ad.concat(outs, axis=2)


def mutual_attention(params: ModelParams, type_vectors, side: str = "user") -> np.ndarray:
    """Pairwise type-relevance re-encoding of one node's aggregate vectors."""
    stacked = np.asarray(type_vectors, dtype=np.float64)[None, :, :]
    out = _mutual_attention(params.tensors(), stacked, side, params, None, 0)
    return value_of(out)[0]


def _fusion_gates(weights, q_tilde, which: str, params: ModelParams,
                  trace: ForwardTrace | None):
    shape = value_of(q_tilde).shape
    n, t, d = shape
    total = ad.sum_axis(q_tilde, axis=1, keepdims=True)  # (N, 1, d)
    hidden = ad.add(ad.add(ad.matmul(q_tilde, ad.transpose_last2(weights[f"fuse_B1_{which}"])),
                           ad.matmul(total, ad.transpose_last2(weights[f"fuse_B2_{which}"]))),
                    weights[f"fuse_c1_{which}"])
    vec = weights["fuse_a"] if which == "u" else weights["fuse_b"]
    scores = ad.reshape(ad.matmul(hidden, ad.reshape(vec, (d, 1))), (n, t))
    gates = ad.softmax(ad.add(scores, weights[f"fuse_c0_{which}"]))
    _check_softmax(trace, gates)
    return gates


def _apply_gates(gates, q_tilde):
    n, t, d = value_of(q_tilde).shape
    return ad.reshape(ad.matmul(ad.reshape(gates, (n, 1, t)), q_tilde), (n, d))


def gated_fusion(params: ModelParams, behavior_vectors, relation_vectors=None,
                 side: str = "user") -> np.ndarray:
    """Convex per-type mixture of one node's re-encoded aggregates."""
    w = params.tensors()
    qb = np.asarray(behavior_vectors, dtype=np.float64)[None, :, :]
    eta = _fusion_gates(w, qb, "u", params, None)
    out = _apply_gates(eta, qb)
    if relation_vectors is not None and len(relation_vectors):
        qr = np.asarray(relation_vectors, dtype=np.float64)[None, :, :]
        xi = _fusion_gates(w, qr, "v", params, None)
        out = ad.add(out, _apply_gates(xi, qr))
    return value_of(out)[0]


# ---------------------------------------------------------------------------
# full forward pass

@dataclass
class ForwardOptions:
    variant: str | None = None
    dropout: float = 0.0
    rng: np.random.Generator | None = None
    trace: ForwardTrace | None = None

    def __post_init__(self):
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.dropout > 0.0 and self.rng is None:
            raise ValueError("dropout needs an rng")


def _stack_types(parts: Sequence, num_nodes: int, dim: int):
    reshaped = [ad.reshape(p, (num_nodes, 1, dim)) for p in parts]
    return ad.concat(reshaped, axis=1)


def _dropout(x, opts: ForwardOptions):
    if opts.dropout <= 0.0:
        return x
    keep = 1.0 - opts.dropout
    mask = (opts.rng.random(value_of(x).shape) < keep) / keep
    return ad.mul(x, mask)


def _mean_gates(n: int, t: int) -> np.ndarray:
    return np.full((n, t), 1.0 / t)


def _layer_forward(weights, params: ModelParams, sub: SubGraph, x_u, x_v,
                   transforms, opts: ForwardOptions, layer: int):
    gu, gv = sub.graph, sub.item_graph
    U, V, d = gu.num_users, gu.num_items, params.dim
    K = params.num_behaviors
    use_items = opts.variant != "KG" and gv.num_relations > 0
    R = gv.num_relations if use_items else 0

    q_user, q_item = [], []
    for k in range(K):
        users, items, slots = gu.edges(k)
        if len(users) == 0:
            q_user.append(np.zeros((U, d)))
        else:
            xu_e = ad.gather_rows(x_u, users)
            xv_e = ad.gather_rows(x_v, items)
            if opts.variant == "Ti":
                p_u, p_v = xu_e, xv_e
            else:
                tbar = ad.matmul(sinusoid_encoding(slots, d),
                                 _time_projection(weights, k, K, d))
                p_u, p_v = ad.add(xu_e, tbar), ad.add(xv_e, tbar)
            messages, _ = _edge_attention(p_u, p_v, transforms["ui"][k], users, U,
                                          params, opts.trace, uniform=opts.variant == "GA")
            q_user.append(ad.leaky_relu(ad.segment_sum(messages, users, U), LEAKY_SLOPE))

        items_t, users_t, slots_t = gu.edges_by_item(k)
        if len(items_t) == 0:
            q_item.append(np.zeros((V, d)))
        else:
            xv_e = ad.gather_rows(x_v, items_t)
            xu_e = ad.gather_rows(x_u, users_t)
            if opts.variant == "Ti":
                p_v, p_u = xv_e, xu_e
            else:
                tbar = ad.matmul(sinusoid_encoding(slots_t, d),
                                 _time_projection(weights, k, K, d))
                p_v, p_u = ad.add(xv_e, tbar), ad.add(xu_e, tbar)
            messages, _ = _edge_attention(p_v, p_u, transforms["ui"][k], items_t, V,
                                          params, opts.trace, uniform=opts.variant == "GA")
            q_item.append(ad.leaky_relu(ad.segment_sum(messages, items_t, V), LEAKY_SLOPE))

    q_rel = []
    for r in range(R):
        dst, src = gv.edges(r)
        if len(dst) == 0:
            q_rel.append(np.zeros((V, d)))
            continue
        p_dst = ad.gather_rows(x_v, dst)
        p_src = ad.gather_rows(x_v, src)
        messages, _ = _edge_attention(p_dst, p_src, transforms["ii"][r], dst, V,
                                      params, opts.trace, uniform=opts.variant == "GA")
        q_rel.append(ad.leaky_relu(ad.segment_sum(messages, dst, V), LEAKY_SLOPE))

    stacked_u = _stack_types(q_user, U, d)
    stacked_v = _stack_types(q_item + q_rel, V, d)
    if opts.variant != "MR":
        stacked_u = _mutual_attention(weights, stacked_u, "user", params, opts.trace, layer)
        stacked_v = _mutual_attention(weights, stacked_v, "item", params, opts.trace, layer)
    stacked_u = _dropout(stacked_u, opts)
    stacked_v = _dropout(stacked_v, opts)

    if opts.variant == "BF":
        eta_u = _mean_gates(U, K)
        eta_v = _mean_gates(V, K)
        xi_v = _mean_gates(V, R) if R else None
    else:
        eta_u = _fusion_gates(weights, stacked_u, "u", params, opts.trace)
        behavior_part = ad.slice_axis1(stacked_v, 0, K) if R else stacked_v
        eta_v = _fusion_gates(weights, behavior_part, "u", params, opts.trace)
        xi_v = (_fusion_gates(weights, ad.slice_axis1(stacked_v, K, K + R), "v",
                              params, opts.trace) if R else None)
    if opts.trace is not None and opts.trace.collect:
        opts.trace.behavior_gates.append((layer, "user", value_of(eta_u)))
        opts.trace.behavior_gates.append((layer, "item", value_of(eta_v)))
        if xi_v is not None:
            opts.trace.relation_gates.append((layer, value_of(xi_v)))

    phi_u = _apply_gates(eta_u, stacked_u)
    behavior_part = ad.slice_axis1(stacked_v, 0, K) if R else stacked_v
    phi_v = _apply_gates(eta_v, behavior_part)
    if R:
        phi_v = ad.add(phi_v, _apply_gates(xi_v, ad.slice_axis1(stacked_v, K, K + R)))
    return phi_u, phi_v


def forward_layer(params: ModelParams, sub: SubGraph, x_users, x_items,
                  *, variant: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One propagation layer on plain arrays."""
    opts = ForwardOptions(variant=variant)
    weights = params.tensors()
    transforms = _compose_all(weights, params, sub, opts)
    u, v = _layer_forward(weights, params, sub, np.asarray(x_users, dtype=np.float64),
                          np.asarray(x_items, dtype=np.float64), transforms, opts, 0)
    return value_of(u), value_of(v)


def _compose_all(weights, params: ModelParams, sub: SubGraph, opts: ForwardOptions):
    transforms = {"ui": [_compose(weights, "ui", k, params, opts.trace)
                         for k in range(params.num_behaviors)]}
    if opts.variant != "KG" and sub.item_graph.num_relations > 0:
        transforms["ii"] = [_compose(weights, "ii", r, params, opts.trace)
                            for r in range(sub.item_graph.num_relations)]
    return transforms


def encode_graph(params: ModelParams, sub: SubGraph, weights: Mapping | None = None,
                 opts: ForwardOptions | None = None):
    """L-layer forward pass; returns layer-summed (phi_users, phi_items).

    With `weights` bound to tape leaves the result is differentiable;
    otherwise it is a pair of arrays.
    """
    opts = opts or ForwardOptions()
    w = weights if weights is not None else params.tensors()
    transforms = _compose_all(w, params, sub, opts)
    x_u = ad.gather_rows(w["user_emb"], sub.user_ids)
    x_v = ad.gather_rows(w["item_emb"], sub.item_ids)
    out_u = out_v = None
    for layer in range(params.layers):
        x_u, x_v = _layer_forward(w, params, sub, x_u, x_v, transforms, opts, layer)
        out_u = x_u if out_u is None else ad.add(out_u, x_u)
        out_v = x_v if out_v is None else ad.add(out_v, x_v)
    return out_u, out_v


def encode(params: ModelParams, sub: SubGraph, *, variant: str | None = None,
           trace: ForwardTrace | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode embeddings for every node of the (sub)graph."""
    opts = ForwardOptions(variant=variant, trace=trace)
    u, v = encode_graph(params, sub, None, opts)
    return value_of(u), value_of(v)


def score_rows(z, phi_users, phi_items, user_rows, item_rows):
    """Interaction scores for aligned (user_row, item_row) pairs."""
    pu = ad.gather_rows(phi_users, np.asarray(user_rows, dtype=np.intp))
    pv = ad.gather_rows(phi_items, np.asarray(item_rows, dtype=np.intp))
    d = value_of(z).shape[-1]
    return ad.reshape(ad.matmul(ad.mul(pu, pv), ad.reshape(z, (d, 1))), (len(user_rows),))


def score(params: ModelParams, phi_user, phi_item) -> float:
    """z . (phi_user * phi_item) for one pair."""
    return float(np.dot(params.score_z, np.asarray(phi_user) * np.asarray(phi_item)))
