"""Pairwise hinge-loss training with Adam and per-epoch learning-rate decay.

Each step samples a (sub)graph batch, draws positive/negative item pairs
for its users, runs the differentiable forward pass, and applies one Adam
update. All randomness flows from the run seed through named sub-streams,
so identical configs produce byte-identical checkpoints.
"""
from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from khgt import autodiff as ad
from khgt import model as mdl
from khgt.autodiff import NumericError, value_of
from khgt.data import (InteractionLog, ItemRelationGraph, MultiBehaviorGraph,
                       Split, SubGraph, full_subgraph, sample_subgraph,
                       substream)

STREAM_PAIRS = 31
STREAM_EPOCH = 32
STREAM_BATCH_GRAPH = 33
STREAM_DROPOUT = 34

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"KHGT"
CHECKPOINT_VERSION = 1

RECOMMENDED_REG_WEIGHTS = (0.1, 0.05, 0.01, 0.005, 0.001)

SUBGRAPH_RESTART_PROB = 0.2


class ConfigError(ValueError):
    """Invalid training configuration."""


@dataclass
class TrainConfig:
    dim: int = 16
    heads: int = 2
    channels: int = 2
    layers: int = 2
    learning_rate: float = 1e-3
    lr_decay: float = 0.96
    batch_size: int = 32
    pairs_per_user: int = 2
    reg_weight: float = 0.01
    epochs: int = 100
    seed: int = 0
    subgraph_nodes: int = 100_000
    time_resolution: int = 604_800
    dropout: float = 0.1

    def validate(self) -> list[str]:
        """Raises on hard errors; returns advisory notes."""
        positives = {"dim": self.dim, "heads": self.heads, "channels": self.channels,
                     "layers": self.layers, "learning_rate": self.learning_rate,
                     "lr_decay": self.lr_decay, "batch_size": self.batch_size,
                     "pairs_per_user": self.pairs_per_user, "epochs": self.epochs,
                     "subgraph_nodes": self.subgraph_nodes,
                     "time_resolution": self.time_resolution}
        for name, value in positives.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.reg_weight < 0 or self.dropout < 0 or self.dropout >= 1:
            raise ConfigError("reg_weight must be >= 0 and dropout in [0, 1)")
        notes = []
        if self.reg_weight and self.reg_weight not in RECOMMENDED_REG_WEIGHTS:
            notes.append(f"note: reg_weight {self.reg_weight} is outside the usual set "
                         f"{RECOMMENDED_REG_WEIGHTS}")
        return notes


@dataclass(frozen=True)
class TrainingPair:
    user_id: int
    positive_item: int
    negative_item: int


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step: int
    learning_rate: float


def init_adam(params: mdl.ModelParams, learning_rate: float) -> AdamState:
    zeros = {name: np.zeros_like(t) for name, t in params.tensors().items()}
    return AdamState(first_moment=zeros,
                     second_moment={k: v.copy() for k, v in zeros.items()},
                     step=0, learning_rate=learning_rate)


def target_items_by_user(log: InteractionLog, target_behavior: int) -> dict[int, set[int]]:
    items: dict[int, set[int]] = defaultdict(set)
    for r in log.records:
        if r.behavior == target_behavior:
            items[r.user_id].add(r.item_id)
    return items


def sample_pairs(log: InteractionLog, target_behavior: int, pairs_per_user: int,
                 seed: int, *, users: Sequence[int] | None = None,
                 allowed_items: np.ndarray | None = None) -> list[TrainingPair]:
    """Per-user positives (with replacement) and uniform negatives.

    Users without any target interaction are skipped. With `allowed_items`
    both ends are restricted to that set: pairs whose positives fall outside
    are dropped, negatives are drawn from the allowed complement.
    """
    rng = substream(seed, STREAM_PAIRS)
    by_user = target_items_by_user(log, target_behavior)
    candidates = sorted(by_user) if users is None else [u for u in users if u in by_user]
    allowed = None if allowed_items is None else np.asarray(allowed_items)
    pairs = []
    for user in candidates:
        positives = sorted(by_user[user])
        if allowed is not None:
            positives = [p for p in positives if p in allowed]
            pool = allowed[~np.isin(allowed, sorted(by_user[user]))]
        else:
            mask = np.ones(log.num_items, dtype=bool)
            mask[sorted(by_user[user])] = False
            pool = np.flatnonzero(mask)
        if not positives or len(pool) == 0:
            continue
        for _ in range(pairs_per_user):
            pos = positives[int(rng.integers(len(positives)))]
            neg = int(pool[int(rng.integers(len(pool)))])
            pairs.append(TrainingPair(user, pos, neg))
    return pairs


def squared_frobenius_mass(weights):
    """Sum of squared entries over every tensor in the map."""
    total = None
    for tensor in weights.values():
        if value_of(tensor).size == 0:
            continue
        part = ad.sum_all(ad.mul(tensor, tensor))
        total = part if total is None else ad.add(total, part)
    return total if total is not None else np.zeros(())


def hinge_loss(pos_scores, neg_scores, weights=None, reg_weight: float = 0.0):
    """Sum of max(0, 1 - pos + neg) plus reg_weight * squared Frobenius mass."""
    margins = ad.relu(ad.add(ad.sub(neg_scores, pos_scores), 1.0))
    loss = ad.sum_all(margins)
    if reg_weight and weights is not None:
        loss = ad.add(loss, ad.mul(squared_frobenius_mass(weights), reg_weight))
    return loss


def adam_step(params: mdl.ModelParams, grads: ad.GradientMap, state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Aborts on non-finite gradients."""
    state.step += 1
    t = state.step
    for name, tensor in params.tensors().items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        tensor -= state.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    learning_rate: float


def _batch_loss(params, weights, sub: SubGraph, pairs: list[TrainingPair],
                opts: mdl.ForwardOptions, reg_weight: float):
    """Full-batch loss node plus the plain hinge value for reporting."""
    phi_u, phi_v = mdl.encode_graph(params, sub, weights, opts)
    user_rows = sub.local_user([p.user_id for p in pairs])
    pos_rows = sub.local_item([p.positive_item for p in pairs])
    neg_rows = sub.local_item([p.negative_item for p in pairs])
    pos = mdl.score_rows(weights["score_z"], phi_u, phi_v, user_rows, pos_rows)
    neg = mdl.score_rows(weights["score_z"], phi_u, phi_v, user_rows, neg_rows)
    hinge_part = hinge_loss(pos, neg)
    loss = hinge_part
    if reg_weight:
        loss = ad.add(loss, ad.mul(squared_frobenius_mass(weights), reg_weight))
    return loss, float(value_of(hinge_part))


def train(config: TrainConfig, split: Split, graph: MultiBehaviorGraph,
          item_graph: ItemRelationGraph, target_behavior: int,
          *, variant: str | None = None,
          params: mdl.ModelParams | None = None) -> tuple[mdl.ModelParams, list[EpochStats]]:
    """Optimize hinge loss over sampled batches; returns params and loss history.

    The recorded mean loss is the per-pair hinge term averaged over the
    epoch's batches plus the regularization term, so with reg_weight zero
    it reads directly as the mean margin violation.
    """
    config.validate()
    if params is None:
        params = mdl.init_params(graph.num_users, graph.num_items,
                                 graph.num_behaviors, item_graph.num_relations,
                                 dim=config.dim, heads=config.heads,
                                 channels=config.channels, layers=config.layers,
                                 seed=config.seed)
    state = init_adam(params, config.learning_rate)
    by_user = target_items_by_user(split.train, target_behavior)
    train_users = np.array(sorted(by_user), dtype=np.int64)
    if len(train_users) == 0:
        raise ConfigError("training split has no users with target-behavior interactions")
    total_nodes = graph.num_users + graph.num_items
    use_sampling = config.subgraph_nodes < total_nodes
    full = full_subgraph(graph, item_graph)

    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        state.learning_rate = config.learning_rate * config.lr_decay ** epoch
        rng_epoch = substream(config.seed, STREAM_EPOCH, epoch)
        order = rng_epoch.permutation(train_users)
        num_batches = int(np.ceil(len(order) / config.batch_size))
        epoch_terms = []
        for batch in range(num_batches):
            if use_sampling:
                sub = sample_subgraph(graph, item_graph, config.subgraph_nodes,
                                      SUBGRAPH_RESTART_PROB,
                                      seed=hash((config.seed, STREAM_BATCH_GRAPH,
                                                 epoch, batch)) % (2**31))
                in_sub = [u for u in sub.user_ids if u in by_user]
                batch_users = in_sub[:config.batch_size]
                allowed = sub.item_ids
            else:
                sub = full
                batch_users = order[batch * config.batch_size:(batch + 1) * config.batch_size]
                allowed = None
            pairs = sample_pairs(split.train, target_behavior, config.pairs_per_user,
                                 seed=hash((config.seed, epoch, batch)) % (2**31),
                                 users=sorted(int(u) for u in batch_users),
                                 allowed_items=allowed)
            if not pairs:
                continue
            tape = ad.Tape()
            leaves = {name: tape.leaf(t, name=name) for name, t in params.tensors().items()}
            drop_rng = substream(config.seed, STREAM_DROPOUT, epoch, batch)
            opts = mdl.ForwardOptions(variant=variant, dropout=config.dropout,
                                      rng=drop_rng)
            loss = _batch_loss(params, leaves, sub, pairs, opts, config.reg_weight)
            grads = ad.backward(tape, loss)
            adam_step(params, grads, state)
            hinge_term = float(loss.value)
            if config.reg_weight:
                reg = config.reg_weight * sum(float((t ** 2).sum())
                                              for t in params.tensors().values())
            else:
                reg = 0.0
            epoch_terms.append((hinge_term - (reg if config.reg_weight else 0.0)) / len(pairs) + reg)
        mean_loss = float(np.mean(epoch_terms)) if epoch_terms else 0.0
        history.append(EpochStats(epoch, mean_loss, state.learning_rate))
    return params, history


# ---------------------------------------------------------------------------
# checkpoint and history files

def save_checkpoint(params: mdl.ModelParams, path) -> None:
    """Binary checkpoint: magic, version, hyperparameters, named f32 tensors."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<8I", params.dim, params.heads, params.channels,
                             params.layers, params.num_behaviors,
                             params.num_relations, params.num_users,
                             params.num_items))
        for name, tensor in params.tensors().items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.astype("<f4").tobytes())


def load_checkpoint(path) -> mdl.ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dim, heads, channels, layers, K, R, I, J = struct.unpack_from("<8I", blob, 8)
    offset = 8 + 32
    tensors = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[name] = data.astype(np.float64).reshape(shape)
    missing = [n for n in mdl.TENSOR_FIELDS if n not in tensors]
    if missing:
        raise ValueError(f"{path}: checkpoint is missing tensors {missing}")
    return mdl.ModelParams(num_users=I, num_items=J, num_behaviors=K,
                           num_relations=R, dim=dim, heads=heads,
                           channels=channels, layers=layers,
                           **{n: tensors[n] for n in mdl.TENSOR_FIELDS})


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,mean_loss,learning_rate\n")
        for row in history:
            fh.write(f"{row.epoch},{row.mean_loss!r},{row.learning_rate!r}\n")


# ---------------------------------------------------------------------------
# end-to-end gradient check on a fixed tiny instance

def _tiny_instance(seed: int):
    from khgt.data import build_user_item_graph, CsrAdjacency, ItemRelationGraph
    import khgt.data as data_mod

    I, J, K = 4, 6, 2
    rng = np.random.default_rng(seed)
    triples = set()
    # every user interacts under both behaviors; timestamps span several slots
    for user in range(I):
        for k in range(K):
            for item in rng.choice(J, size=3, replace=False):
                triples.add((user, int(item), k))
    records = [(u, i, b, int(rng.integers(0, 20) * 604800 + rng.integers(0, 1000)))
               for (u, i, b) in sorted(triples)]
    log = InteractionLog([data_mod.InteractionRecord(*r) for r in records], I, J, K)
    graph = build_user_item_graph(log, 604800)
    # two hand-rolled symmetric item relations (R=2)
    rel0 = [(0, 1), (1, 2), (3, 4)]
    rel1 = [(0, 5), (2, 3), (4, 5)]
    item_graph = ItemRelationGraph(J, [data_mod._symmetric_csr(J, rel0),
                                       data_mod._symmetric_csr(J, rel1)],
                                   ["co-interaction:0", "shared-category"])
    split = Split(train=log, test=[])
    return graph, item_graph, split


def pipeline_grad_check(seed: int = 0, eps: float = 1e-5) -> float:
    """Finite-difference check of encode + score + hinge loss end to end.

    Runs the fixed tiny instance (4 users, 6 items, 2 behaviors, 2 item
    relations, dim 8, 2 heads, 2 channels, 1 layer, 1 pair per user) with
    densely randomized parameters and nonzero regularization so every
    parameter entry carries gradient signal.
    """
    graph, item_graph, split = _tiny_instance(seed)
    params = mdl.init_params(4, 6, 2, 2, dim=8, heads=2, channels=2, layers=1,
                             seed=seed, dense_random=True)
    pairs = sample_pairs(split.train, target_behavior=1, pairs_per_user=1,
                         seed=seed)
    sub = full_subgraph(graph, item_graph)
    opts = mdl.ForwardOptions()

    def model_fn(weights):
        return _batch_loss(params, weights, sub, pairs, opts, reg_weight=0.05)

    return ad.grad_check(model_fn, params, eps=eps)
