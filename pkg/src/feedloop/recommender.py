"""Recommendation policies and the GAT retraining schedule.

Policies: ``none`` (chronological feed, no recommendations), ``random``
(uniform over active content), ``content_similarity`` (cosine between user
preference and item topic) and ``gat`` (link prediction on the user-content
engagement graph). The GAT is trained at activation and then every
``retrain_period`` steps, or only once when ``frozen``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from feedloop import gat
from feedloop.config import ExperimentConfig, TrainConfig
from feedloop.rng import stream
from feedloop.state import LIKE, SHARE


class NotTrainedError(RuntimeError):
    """Scores were requested from a GAT that has never been trained."""


class DegenerateSplitError(RuntimeError):
    """The validation split kept only one class after one resample."""


@dataclass
class RecommenderState:
    policy: str
    frozen: bool = False
    serving: bool = False
    model: gat.GatModel | None = None
    # (step, validation AUC, whether weights were updated)
    history: list = field(default_factory=list)
    _cache_step: int = -1
    _cache_scores: np.ndarray | None = None

    @classmethod
    def for_config(cls, config: ExperimentConfig) -> "RecommenderState":
        return cls(policy=config.policy, frozen=config.frozen)


@dataclass
class BipartiteData:
    """Nodes ``0..n-1`` are users; node ``n + r`` is content ``content_ids[r]``."""

    n_users: int
    content_ids: np.ndarray
    features: np.ndarray
    pos_users: np.ndarray
    pos_items: np.ndarray  # node indices

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def graph(self, mask: np.ndarray | None = None, neighbor_cap: int | None = None,
              rng: np.random.Generator | None = None) -> gat.Graph:
        u = self.pos_users if mask is None else self.pos_users[mask]
        c = self.pos_items if mask is None else self.pos_items[mask]
        src = np.concatenate([u, c])
        dst = np.concatenate([c, u])
        if neighbor_cap is not None and rng is not None and len(src):
            src, dst = _cap_neighbors(src, dst, neighbor_cap, rng)
        return gat.Graph.from_edges(self.n_nodes, src, dst)


def _cap_neighbors(src, dst, cap, rng):
    order = np.lexsort((rng.random(len(dst)), dst))
    dst_sorted = dst[order]
    starts = np.searchsorted(dst_sorted, dst_sorted, side="left")
    rank = np.arange(len(dst_sorted)) - starts
    keep = order[rank < cap]
    return src[keep], dst[keep]


def bipartite_data(state, first_step: int) -> BipartiteData:
    """Engagement pairs (likes and shares) since ``first_step`` plus all active content."""
    log = state.interactions.since(first_step)
    kinds = log["kind"]
    sel = (kinds == LIKE) | (kinds == SHARE)
    users = log["agent"][sel].astype(np.int64)
    items = log["content"][sel].astype(np.int64)
    n = state.n
    active = state.content.active_ids()
    content_ids = np.union1d(active, items)
    pairs = np.unique(users * (state.content.size + 1) + items)
    users = pairs // (state.content.size + 1)
    items = pairs % (state.content.size + 1)
    item_nodes = n + np.searchsorted(content_ids, items)
    features = np.vstack([state.agents.preference, state.content.topic[content_ids]])
    return BipartiteData(n, content_ids, features, users, item_nodes)


def _sample_negatives(data: BipartiteData, users: np.ndarray, positive_keys: set,
                      rng: np.random.Generator) -> np.ndarray:
    m = len(data.content_ids)
    items = data.n_users + rng.integers(0, m, size=len(users))
    for idx in range(len(users)):
        tries = 0
        while (int(users[idx]), int(items[idx])) in positive_keys and tries < 20:
            items[idx] = data.n_users + rng.integers(0, m)
            tries += 1
    return items


def _split(n_pos: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n_pos)
    n_val = max(1, int(round(val_fraction * n_pos)))
    return perm[n_val:], perm[:n_val]


def _validation_split(data: BipartiteData, keys: set, val_fraction: float, rng: np.random.Generator):
    """Held-out positives plus one sampled negative each. Negatives that hit a
    known positive are dropped; a split left with one class is redrawn once."""
    n_pos = len(data.pos_users)
    for _ in range(2):
        train_idx, val_idx = _split(n_pos, val_fraction, rng)
        val_u = data.pos_users[val_idx]
        neg = _sample_negatives(data, val_u, keys, rng)
        clean = np.array([(int(u), int(c)) not in keys for u, c in zip(val_u, neg)], dtype=bool)
        if len(val_idx) and clean.any():
            users = np.concatenate([val_u, val_u[clean]])
            items = np.concatenate([data.pos_items[val_idx], neg[clean]])
            labels = np.concatenate([np.ones(len(val_idx)), np.zeros(int(clean.sum()))])
            return train_idx, users, items, labels
    raise DegenerateSplitError("validation split has a single class after resampling")


def gat_train(data: BipartiteData, train: TrainConfig, rng: np.random.Generator,
              model: gat.GatModel | None = None, update: bool = True,
              neighbor_cap: int | None = None) -> tuple[gat.GatModel, dict]:
    """Train (or, with ``update=False``, only evaluate) a GAT on engagement pairs.

    Each epoch samples ``batches_per_epoch`` random minibatches of
    ``batch_size`` positives with as many sampled negatives. Training stops
    early when validation loss has not improved for ``patience`` epochs and the
    best weights are kept.
    """
    n_pos = len(data.pos_users)
    if model is None:
        model = gat.GatModel.init(data.features.shape[1], train.hidden_dim, train.heads, rng)
    keys = set(zip(data.pos_users.tolist(), data.pos_items.tolist()))
    train_idx, val_users, val_items, val_labels = _validation_split(data, keys, train.val_fraction, rng)
    mask = np.zeros(n_pos, dtype=bool)
    mask[train_idx] = True
    graph = data.graph(mask, neighbor_cap, rng)
    X = data.features

    def evaluate(m: gat.GatModel):
        H = gat.forward(m, X, graph)
        loss, _ = gat.link_loss(H, val_users, val_items, val_labels)
        z = np.sum(H[val_users] * H[val_items], axis=1)
        return loss, gat.auc(z, val_labels)

    info = {"epochs": 0, "first_loss": float("nan")}
    if update and len(train_idx) > 0:
        best_loss, _ = evaluate(model)
        best = model.copy()
        stale = 0
        B = train.batch_size
        for epoch in range(train.max_epochs):
            perm = rng.permutation(train_idx)
            n_batches = min(train.batches_per_epoch, max(1, math.ceil(len(perm) / B)))
            for b in range(n_batches):
                batch = perm[b * B:(b + 1) * B]
                if len(batch) == 0:
                    break
                bu = data.pos_users[batch]
                neg = _sample_negatives(data, bu, keys, rng)
                users = np.concatenate([bu, bu])
                items = np.concatenate([data.pos_items[batch], neg])
                labels = np.concatenate([np.ones(len(batch)), np.zeros(len(batch))])
                loss, grads = gat.loss_and_grad(model, X, graph, users, items, labels,
                                                dropout=train.dropout, rng=rng)
                if epoch == 0 and b == 0:
                    info["first_loss"] = loss
                gat.adam_step(model, grads, train.learning_rate)
            info["epochs"] = epoch + 1
            if not model.finite():
                raise FloatingPointError("GAT parameters became non-finite")
            val_loss, _ = evaluate(model)
            if val_loss < best_loss - 1e-12:
                best_loss = val_loss
                best = model.copy()
                stale = 0
            else:
                stale += 1
                if stale >= train.patience:
                    break
        model = best
        model.train_count += 1
    _, val_auc = evaluate(model)
    model.validation_auc = val_auc
    return model, info


def score_pairs(model: gat.GatModel | None, H: np.ndarray, user_node: int,
                item_nodes: np.ndarray) -> np.ndarray:
    if model is None:
        raise NotTrainedError("GAT has not been trained; fall back to the chronological feed")
    z = H[item_nodes] @ H[user_node]
    return 1.0 / (1.0 + np.exp(-z))


def score_matrix(state, active_ids: np.ndarray) -> np.ndarray | None:
    """Scores of every user (rows) against every active item (columns).

    ``None`` for the random policy, which does not score.
    """
    rec = state.recommender
    if rec._cache_step == state.step and rec._cache_scores is not None \
            and rec._cache_scores.shape[1] == len(active_ids):
        return rec._cache_scores
    if rec.policy == "content_similarity":
        scores = state.agents.preference @ state.content.topic[active_ids].T
    elif rec.policy == "gat":
        if rec.model is None:
            raise NotTrainedError("GAT has not been trained; fall back to the chronological feed")
        train = state.config.train
        data = bipartite_data(state, state.step - train.window + 1)
        cap = train.neighbor_sample if state.n > train.neighbor_sample_above else None
        graph = data.graph(None, cap, stream(state.seed, "gat-infer", state.step))
        H = gat.forward(rec.model, data.features, graph)
        nodes = state.n + np.searchsorted(data.content_ids, active_ids)
        scores = 1.0 / (1.0 + np.exp(-(H[: state.n] @ H[nodes].T)))
    else:
        return None
    rec._cache_step = state.step
    rec._cache_scores = scores
    return scores


def recommend(state, user_id: int, count: int, rng: np.random.Generator,
              active_ids: np.ndarray | None = None, scores: np.ndarray | None = None,
              policy: str | None = None) -> list[int]:
    """Ranked content ids for ``user_id``, excluding the user's own and already seen items."""
    policy = state.recommender.policy if policy is None else policy
    if count < 1:
        raise ValueError("count must be >= 1")
    if policy == "none":
        return []
    if active_ids is None:
        active_ids = state.content.active_ids()
    if active_ids.size == 0:
        return []
    ok = state.content.creator[active_ids] != user_id
    seen = state.seen[user_id]
    if seen:
        ok &= ~np.isin(active_ids, np.fromiter(seen, dtype=np.int64, count=len(seen)))
    candidates = np.flatnonzero(ok)
    if candidates.size == 0:
        return []
    if policy == "random":
        pick = rng.permutation(candidates.size)[:count]
        return active_ids[candidates[pick]].tolist()
    if scores is None:
        scores = score_matrix(state, active_ids)
    row = scores[user_id, candidates]
    k = min(count, candidates.size)
    top = np.argpartition(-row, k - 1)[:k] if k < candidates.size else np.arange(candidates.size)
    # descending score, ties by content id
    top = top[np.lexsort((active_ids[candidates[top]], -row[top]))]
    return active_ids[candidates[top]].tolist()


def retrain_due(step: int, t_activate: int, period: int) -> bool:
    return step >= t_activate and (step - t_activate) % period == 0


def maybe_retrain(state) -> None:
    """Phase 4: activate the recommender and keep the GAT on its schedule."""
    cfg = state.config
    rec = state.recommender
    t = state.step
    if rec.policy == "none" or t < cfg.t_activate:
        return
    if rec.policy != "gat":
        rec.serving = True
        return
    train = cfg.train
    if not retrain_due(t, cfg.t_activate, train.retrain_period):
        return
    data = bipartite_data(state, t - train.window + 1)
    if len(data.pos_users) < train.min_positive_edges:
        return
    rng = stream(state.seed, "gat-train", t)
    init_rng = stream(state.seed, "gat-init")
    cap = train.neighbor_sample if state.n > train.neighbor_sample_above else None
    update = not (rec.frozen and rec.model is not None)
    model = rec.model
    if model is None:
        model = gat.GatModel.init(data.features.shape[1], train.hidden_dim, train.heads, init_rng)
    model, _ = gat_train(data, train, rng, model=model.copy(), update=update, neighbor_cap=cap)
    if update:
        model.last_trained_step = t
    rec.model = model
    rec.serving = True
    rec._cache_step = -1
    rec.history.append((t, model.validation_auc, update))
