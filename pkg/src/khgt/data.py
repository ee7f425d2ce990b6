"""Interaction logs, multi-behavior graphs, item relations, splits, sampling.

Graphs are stored as compressed sparse rows per behavior type (with the
interaction time slot on every edge) plus per-relation symmetric item-item
adjacencies. All randomized constructors are pure functions of their
inputs and a seed.
"""
from __future__ import annotations

import itertools
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

# fixed sub-stream tags so every consumer of a run seed draws independently
STREAM_SYNTH = 11
STREAM_CATEGORY_CAP = 12
STREAM_SUBGRAPH = 13

WEEK_SECONDS = 604800

# weight decay applied to a node each time the sampling walk visits it
WALK_REVISIT_DECAY = 0.9
WALK_STEP_FACTOR = 50


class ParseError(ValueError):
    """Malformed or out-of-range interaction input."""


def substream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(t) for t in tags]))


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    behavior: int
    timestamp: int


@dataclass
class InteractionLog:
    records: list[InteractionRecord]
    num_users: int
    num_items: int
    num_behaviors: int

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class CsrAdjacency:
    """Row-compressed adjacency; `slots` carries per-edge time slots when present."""

    indptr: np.ndarray
    indices: np.ndarray
    slots: np.ndarray | None = None

    @property
    def num_rows(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        return len(self.indices)

    def neighbors(self, row: int) -> np.ndarray:
        return self.indices[self.indptr[row]:self.indptr[row + 1]]

    def slot_values(self, row: int) -> np.ndarray:
        assert self.slots is not None
        return self.slots[self.indptr[row]:self.indptr[row + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)


def _build_csr(num_rows: int, rows: np.ndarray, cols: np.ndarray,
               slots: np.ndarray | None) -> CsrAdjacency:
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(num_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return CsrAdjacency(indptr=indptr, indices=cols.astype(np.int64),
                        slots=None if slots is None else slots[order].astype(np.int64))


@dataclass
class MultiBehaviorGraph:
    """Per-behavior bipartite adjacency, stored in both directions."""

    num_users: int
    num_items: int
    num_behaviors: int
    user_to_item: list[CsrAdjacency]
    item_to_user: list[CsrAdjacency]

    def edges(self, behavior: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """COO triples (users, items, slots) sorted by user then item."""
        adj = self.user_to_item[behavior]
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), adj.degrees())
        return users, adj.indices, adj.slots

    def edges_by_item(self, behavior: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """COO triples (items, users, slots) sorted by item then user."""
        adj = self.item_to_user[behavior]
        items = np.repeat(np.arange(self.num_items, dtype=np.int64), adj.degrees())
        return items, adj.indices, adj.slots

    def total_edges(self) -> int:
        return sum(a.num_edges for a in self.user_to_item)

    def user_degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_users, dtype=np.int64)
        for adj in self.user_to_item:
            deg += adj.degrees()
        return deg

    def item_degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_items, dtype=np.int64)
        for adj in self.item_to_user:
            deg += adj.degrees()
        return deg


@dataclass
class ItemRelationGraph:
    """Symmetric item-item adjacency per relation, self-loop free."""

    num_items: int
    adjacency: list[CsrAdjacency]
    kinds: list[str]

    @property
    def num_relations(self) -> int:
        return len(self.adjacency)

    def edges(self, relation: int) -> tuple[np.ndarray, np.ndarray]:
        """COO pairs (target item, source item); both directions present."""
        adj = self.adjacency[relation]
        dst = np.repeat(np.arange(self.num_items, dtype=np.int64), adj.degrees())
        return dst, adj.indices

    def total_edges(self) -> int:
        return sum(a.num_edges for a in self.adjacency)

    def item_degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_items, dtype=np.int64)
        for adj in self.adjacency:
            deg += adj.degrees()
        return deg


@dataclass
class Split:
    train: InteractionLog
    test: list[tuple[int, int]]


@dataclass
class SubGraph:
    """Node-induced restriction of the two graphs, with global-id mappings."""

    user_ids: np.ndarray
    item_ids: np.ndarray
    graph: MultiBehaviorGraph
    item_graph: ItemRelationGraph

    @property
    def num_nodes(self) -> int:
        return len(self.user_ids) + len(self.item_ids)

    def local_user(self, global_ids) -> np.ndarray:
        pos = np.searchsorted(self.user_ids, global_ids)
        if np.any(pos >= len(self.user_ids)) or np.any(self.user_ids[np.minimum(pos, len(self.user_ids) - 1)] != global_ids):
            raise KeyError("user id not present in sub-graph")
        return pos

    def local_item(self, global_ids) -> np.ndarray:
        pos = np.searchsorted(self.item_ids, global_ids)
        if np.any(pos >= len(self.item_ids)) or np.any(self.item_ids[np.minimum(pos, len(self.item_ids) - 1)] != global_ids):
            raise KeyError("item id not present in sub-graph")
        return pos


# ---------------------------------------------------------------------------
# parsing

def parse_interactions(lines: Iterable[str], num_users: int, num_items: int,
                       num_behaviors: int) -> InteractionLog:
    """Parse tab-separated `user item behavior unix_seconds` lines."""
    records = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            user, item, behavior, ts = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer field in {line!r}") from None
        if not 0 <= user < num_users:
            raise ParseError(f"line {lineno}: user id {user} outside [0, {num_users})")
        if not 0 <= item < num_items:
            raise ParseError(f"line {lineno}: item id {item} outside [0, {num_items})")
        if not 0 <= behavior < num_behaviors:
            raise ParseError(f"line {lineno}: behavior {behavior} outside [0, {num_behaviors})")
        if ts < 0:
            raise ParseError(f"line {lineno}: negative timestamp {ts}")
        records.append(InteractionRecord(user, item, behavior, ts))
    return InteractionLog(records, num_users, num_items, num_behaviors)


def parse_item_categories(lines: Iterable[str], num_items: int) -> np.ndarray:
    """Parse tab-separated `item category` lines; every item must appear."""
    categories = np.full(num_items, -1, dtype=np.int64)
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"line {lineno}: expected 2 tab-separated fields, got {len(parts)}")
        try:
            item, cat = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer field in {line!r}") from None
        if not 0 <= item < num_items:
            raise ParseError(f"line {lineno}: item id {item} outside [0, {num_items})")
        categories[item] = cat
    missing = np.flatnonzero(categories < 0)
    if len(missing):
        raise ParseError(f"no category for item {missing[0]}")
    return categories


def time_slot(timestamp: int, resolution: int) -> int:
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    return int(timestamp) // int(resolution)


# ---------------------------------------------------------------------------
# graph construction

def _dedup_latest(log: InteractionLog) -> dict[tuple[int, int, int], int]:
    """Collapse duplicate (user, item, behavior) records to the latest timestamp."""
    latest: dict[tuple[int, int, int], int] = {}
    for r in log.records:
        key = (r.user_id, r.item_id, r.behavior)
        if key not in latest or r.timestamp > latest[key]:
            latest[key] = r.timestamp
    return latest


def build_user_item_graph(log: InteractionLog, resolution: int = WEEK_SECONDS) -> MultiBehaviorGraph:
    latest = _dedup_latest(log)
    by_behavior: list[list[tuple[int, int, int]]] = [[] for _ in range(log.num_behaviors)]
    for (user, item, behavior), ts in latest.items():
        by_behavior[behavior].append((user, item, time_slot(ts, resolution)))
    user_to_item, item_to_user = [], []
    for triples in by_behavior:
        if triples:
            arr = np.array(triples, dtype=np.int64)
            users, items, slots = arr[:, 0], arr[:, 1], arr[:, 2]
        else:
            users = items = slots = np.zeros(0, dtype=np.int64)
        user_to_item.append(_build_csr(log.num_users, users, items, slots))
        item_to_user.append(_build_csr(log.num_items, items, users, slots))
    return MultiBehaviorGraph(log.num_users, log.num_items, log.num_behaviors,
                              user_to_item, item_to_user)


def _symmetric_csr(num_items: int, pairs: Iterable[tuple[int, int]]) -> CsrAdjacency:
    pair_list = list(pairs)
    if not pair_list:
        empty = np.zeros(0, dtype=np.int64)
        return _build_csr(num_items, empty, empty, None)
    arr = np.array(pair_list, dtype=np.int64)
    rows = np.concatenate([arr[:, 0], arr[:, 1]])
    cols = np.concatenate([arr[:, 1], arr[:, 0]])
    return _build_csr(num_items, rows, cols, None)


def _co_interaction_pairs(user_items: Mapping[int, set[int]], min_co_count: int,
                          cap: int) -> list[tuple[int, int]]:
    counts: Counter[tuple[int, int]] = Counter()
    for items in user_items.values():
        for a, b in itertools.combinations(sorted(items), 2):
            counts[(a, b)] += 1
    ranked: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for (a, b), c in counts.items():
        if c >= min_co_count:
            ranked[a].append((-c, b))
            ranked[b].append((-c, a))
    # per-item strongest-first shortlist; an edge survives only if both ends
    # shortlist each other, which keeps degrees <= cap and the graph symmetric
    keep: dict[int, set[int]] = {}
    for item, cands in ranked.items():
        cands.sort()
        keep[item] = {b for _, b in cands[:cap]}
    pairs = []
    for (a, b), c in counts.items():
        if c >= min_co_count and b in keep.get(a, ()) and a in keep.get(b, ()):
            pairs.append((a, b))
    return pairs


def _category_pairs(categories: np.ndarray, cap: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for item, cat in enumerate(categories):
        groups[int(cat)].append(item)
    pairs = []
    degree: Counter[int] = Counter()
    for cat in sorted(groups):
        members = groups[cat]
        if len(members) < 2:
            continue
        all_pairs = list(itertools.combinations(members, 2))
        if len(members) - 1 <= cap:
            pairs.extend(all_pairs)
            continue
        # oversized category: admit pairs in seeded random order while both
        # endpoints stay under the cap
        order = rng.permutation(len(all_pairs))
        for idx in order:
            a, b = all_pairs[idx]
            if degree[a] < cap and degree[b] < cap:
                pairs.append((a, b))
                degree[a] += 1
                degree[b] += 1
    return pairs


def build_item_item_graph(log: InteractionLog, item_categories: np.ndarray | Sequence[int],
                          *, cap: int = 10, min_co_count: int = 2,
                          seed: int = 0) -> ItemRelationGraph:
    """One co-interaction relation per behavior type plus a shared-category relation."""
    categories = np.asarray(item_categories, dtype=np.int64)
    if len(categories) != log.num_items:
        raise ValueError(f"expected {log.num_items} item categories, got {len(categories)}")
    latest = _dedup_latest(log)
    adjacency, kinds = [], []
    for behavior in range(log.num_behaviors):
        user_items: dict[int, set[int]] = defaultdict(set)
        for (user, item, b) in latest:
            if b == behavior:
                user_items[user].add(item)
        pairs = _co_interaction_pairs(user_items, min_co_count, cap)
        adjacency.append(_symmetric_csr(log.num_items, pairs))
        kinds.append(f"co-interaction:{behavior}")
    rng = substream(seed, STREAM_CATEGORY_CAP)
    adjacency.append(_symmetric_csr(log.num_items, _category_pairs(categories, cap, rng)))
    kinds.append("shared-category")
    return ItemRelationGraph(log.num_items, adjacency, kinds)


def empty_item_graph(num_items: int) -> ItemRelationGraph:
    return ItemRelationGraph(num_items, [], [])


# ---------------------------------------------------------------------------
# splits

def leave_one_out_split(log: InteractionLog, target_behavior: int) -> Split:
    """Hold out each user's latest target-behavior interaction.

    Users with fewer than two target-behavior records stay train-only.
    Timestamp ties break toward the higher item id; auxiliary records are
    never held out.
    """
    if not 0 <= target_behavior < log.num_behaviors:
        raise ValueError(f"target behavior {target_behavior} outside [0, {log.num_behaviors})")
    per_user: dict[int, list[InteractionRecord]] = defaultdict(list)
    for r in log.records:
        if r.behavior == target_behavior:
            per_user[r.user_id].append(r)
    held: dict[int, int] = {}
    for user, recs in per_user.items():
        if len(recs) < 2:
            continue
        latest = max(recs, key=lambda r: (r.timestamp, r.item_id))
        held[user] = latest.item_id
    train_records = [r for r in log.records
                     if not (r.behavior == target_behavior and held.get(r.user_id) == r.item_id)]
    train = InteractionLog(train_records, log.num_users, log.num_items, log.num_behaviors)
    test = sorted(held.items())
    return Split(train=train, test=test)


def filter_behaviors(log: InteractionLog, behaviors: Sequence[int]) -> InteractionLog:
    """Keep only the listed behavior types, renumbering them 0..len-1."""
    remap = {b: i for i, b in enumerate(behaviors)}
    records = [replace(r, behavior=remap[r.behavior])
               for r in log.records if r.behavior in remap]
    return InteractionLog(records, log.num_users, log.num_items, len(behaviors))


# ---------------------------------------------------------------------------
# synthetic corpora

@dataclass
class SyntheticSpec:
    num_users: int
    num_items: int
    num_behaviors: int
    latent_dim: int = 8
    noise: float = 0.1
    correlation: float = 0.8
    target_per_user: int = 5
    aux_per_user: int = 10
    num_categories: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError(f"correlation must be in [0, 1], got {self.correlation}")
        if self.aux_per_user < self.target_per_user:
            raise ValueError("aux_per_user must be >= target_per_user")
        if self.num_items < self.aux_per_user:
            raise ValueError("num_items must exceed aux_per_user")


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[InteractionLog, np.ndarray]:
    """Latent-factor corpus where the last behavior is the target.

    Auxiliary behavior propensities mix the realized target propensity with
    an independent one at weight `correlation`, so correlation=1 makes every
    auxiliary set contain the target set and correlation=0 decouples them.
    """
    rng = substream(seed, STREAM_SYNTH)
    inv = 1.0 / np.sqrt(spec.latent_dim)
    user_f = rng.normal(size=(spec.num_users, spec.latent_dim)) * inv
    item_f = rng.normal(size=(spec.num_items, spec.latent_dim)) * inv
    target_score = user_f @ item_f.T
    if spec.noise > 0:
        target_score = target_score + spec.noise * rng.normal(size=target_score.shape)

    target = spec.num_behaviors - 1
    chosen: dict[int, list[tuple[int, int]]] = defaultdict(list)  # user -> [(item, behavior)]
    for user in range(spec.num_users):
        top = np.argsort(-target_score[user], kind="stable")[:spec.target_per_user]
        chosen[user].extend((int(i), target) for i in top)
    for behavior in range(spec.num_behaviors - 1):
        ind_u = rng.normal(size=(spec.num_users, spec.latent_dim)) * inv
        ind_v = rng.normal(size=(spec.num_items, spec.latent_dim)) * inv
        independent = ind_u @ ind_v.T
        if spec.noise > 0:
            independent = independent + spec.noise * rng.normal(size=independent.shape)
        mixed = spec.correlation * target_score + (1.0 - spec.correlation) * independent
        for user in range(spec.num_users):
            top = np.argsort(-mixed[user], kind="stable")[:spec.aux_per_user]
            chosen[user].extend((int(i), behavior) for i in top)

    records = []
    for user in range(spec.num_users):
        events = chosen[user]
        order = rng.permutation(len(events))
        ts = int(rng.integers(0, 10_000_000))
        for idx in order:
            item, behavior = events[idx]
            ts += int(rng.integers(3600, 14 * 86400))
            records.append(InteractionRecord(user, item, behavior, ts))

    num_categories = spec.num_categories or max(2, spec.num_items // 10)
    categories = rng.integers(0, num_categories, size=spec.num_items)
    log = InteractionLog(records, spec.num_users, spec.num_items, spec.num_behaviors)
    return log, categories.astype(np.int64)


# ---------------------------------------------------------------------------
# sub-graph sampling

def full_subgraph(graph: MultiBehaviorGraph, item_graph: ItemRelationGraph) -> SubGraph:
    return SubGraph(user_ids=np.arange(graph.num_users, dtype=np.int64),
                    item_ids=np.arange(graph.num_items, dtype=np.int64),
                    graph=graph, item_graph=item_graph)


def induce_subgraph(graph: MultiBehaviorGraph, item_graph: ItemRelationGraph,
                    user_ids: np.ndarray, item_ids: np.ndarray) -> SubGraph:
    """Restrict both graphs to the given node sets (edges need both endpoints)."""
    user_ids = np.unique(np.asarray(user_ids, dtype=np.int64))
    item_ids = np.unique(np.asarray(item_ids, dtype=np.int64))
    user_to_item, item_to_user = [], []
    for behavior in range(graph.num_behaviors):
        users, items, slots = graph.edges(behavior)
        mask = np.isin(users, user_ids) & np.isin(items, item_ids)
        lu = np.searchsorted(user_ids, users[mask])
        li = np.searchsorted(item_ids, items[mask])
        ls = slots[mask]
        user_to_item.append(_build_csr(len(user_ids), lu, li, ls))
        item_to_user.append(_build_csr(len(item_ids), li, lu, ls))
    sub_graph = MultiBehaviorGraph(len(user_ids), len(item_ids), graph.num_behaviors,
                                   user_to_item, item_to_user)
    adjacency = []
    for relation in range(item_graph.num_relations):
        dst, src = item_graph.edges(relation)
        mask = np.isin(dst, item_ids) & np.isin(src, item_ids)
        ld = np.searchsorted(item_ids, dst[mask])
        ls = np.searchsorted(item_ids, src[mask])
        adjacency.append(_build_csr(len(item_ids), ld, ls, None))
    sub_items = ItemRelationGraph(len(item_ids), adjacency, list(item_graph.kinds))
    return SubGraph(user_ids=user_ids, item_ids=item_ids,
                    graph=sub_graph, item_graph=sub_items)


def _combined_neighbors(graph: MultiBehaviorGraph, item_graph: ItemRelationGraph,
                        node: int) -> np.ndarray:
    """Neighbors in the union graph; nodes are users then items offset by I."""
    I = graph.num_users
    if node < I:
        parts = [graph.user_to_item[k].neighbors(node) + I
                 for k in range(graph.num_behaviors)]
    else:
        item = node - I
        parts = [graph.item_to_user[k].neighbors(item)
                 for k in range(graph.num_behaviors)]
        parts += [item_graph.adjacency[r].neighbors(item) + I
                  for r in range(item_graph.num_relations)]
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(parts))


def sample_subgraph(graph: MultiBehaviorGraph, item_graph: ItemRelationGraph,
                    max_nodes: int, restart_prob: float, seed: int) -> SubGraph:
    """Random walk with restart, biased away from already-visited nodes.

    Next hops are drawn proportionally to a weight vector that starts at
    combined node degree and decays by 0.9 on every visit. The walk stops
    once `max_nodes` distinct nodes are collected or after 50 * max_nodes
    steps.
    """
    if max_nodes < 2:
        raise ValueError(f"max_nodes must be >= 2, got {max_nodes}")
    if not 0.0 < restart_prob < 1.0:
        raise ValueError(f"restart_prob must be in (0, 1), got {restart_prob}")
    if graph.total_edges() == 0:
        raise ValueError("cannot sample a sub-graph from a graph with no edges")

    I, J = graph.num_users, graph.num_items
    weights = np.concatenate([graph.user_degrees().astype(np.float64),
                              (graph.item_degrees() + item_graph.item_degrees()).astype(np.float64)])
    rng = substream(seed, STREAM_SUBGRAPH)
    eligible_users = np.flatnonzero(graph.user_degrees() > 0)
    start = int(rng.choice(eligible_users))
    visited = {start}
    weights[start] *= WALK_REVISIT_DECAY
    current = start
    max_steps = WALK_STEP_FACTOR * max_nodes
    steps = 0
    while len(visited) < max_nodes and steps < max_steps:
        steps += 1
        if rng.random() < restart_prob:
            current = start
            continue
        nbrs = _combined_neighbors(graph, item_graph, current)
        if len(nbrs) == 0:
            current = start
            continue
        w = weights[nbrs]
        total = w.sum()
        probs = w / total if total > 0 else np.full(len(nbrs), 1.0 / len(nbrs))
        current = int(rng.choice(nbrs, p=probs))
        visited.add(current)
        weights[current] *= WALK_REVISIT_DECAY

    nodes = np.array(sorted(visited), dtype=np.int64)
    user_ids = nodes[nodes < I]
    item_ids = nodes[nodes >= I] - I
    return induce_subgraph(graph, item_graph, user_ids, item_ids)


def khop_nodes(graph: MultiBehaviorGraph, item_graph: ItemRelationGraph,
               seed_users: Sequence[int], seed_items: Sequence[int],
               hops: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed L-hop neighborhood over the union of both graphs."""
    I = graph.num_users
    frontier = set(int(u) for u in seed_users) | set(int(i) + I for i in seed_items)
    seen = set(frontier)
    for _ in range(hops):
        nxt = set()
        for node in frontier:
            nxt.update(int(n) for n in _combined_neighbors(graph, item_graph, node))
        frontier = nxt - seen
        seen |= nxt
        if not frontier:
            break
    nodes = np.array(sorted(seen), dtype=np.int64)
    return nodes[nodes < I], nodes[nodes >= I] - I


# ---------------------------------------------------------------------------
# file IO

def write_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in log.records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.behavior}\t{r.timestamp}\n")


def write_item_categories(categories: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, cat in enumerate(categories):
            fh.write(f"{item}\t{int(cat)}\n")


def load_interactions(path, num_users: int, num_items: int, num_behaviors: int) -> InteractionLog:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_interactions(fh, num_users, num_items, num_behaviors)


def load_item_categories(path, num_items: int) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_item_categories(fh, num_items)
