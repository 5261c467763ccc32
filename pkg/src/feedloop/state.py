"""Platform state containers: agents, content store, interaction log."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from feedloop.config import ExperimentConfig

# interaction kinds
VIEW, LIKE, SHARE, FOLLOW_OPPORTUNITY = 0, 1, 2, 3
KIND_NAMES = ("view", "like", "share", "follow_opportunity")
# interaction sources
ORGANIC, RECOMMENDED = 0, 1
SOURCE_NAMES = ("organic", "recommended")
# content kinds
NICHE, POPULAR = 0, 1


@dataclass
class Agents:
    user_type: np.ndarray
    preference: np.ndarray
    creation_rate: np.ndarray
    satisfaction: np.ndarray
    active: np.ndarray

    @property
    def n(self) -> int:
        return len(self.user_type)


class ContentStore:
    """Append-only columnar store of content items; ids are row indices."""

    def __init__(self, k: int, capacity: int = 1024):
        capacity = max(capacity, 16)
        self.k = k
        self.size = 0
        self.topic = np.zeros((capacity, k))
        self.creator = np.zeros(capacity, dtype=np.int64)
        self.birth = np.zeros(capacity, dtype=np.int64)
        self.kind = np.zeros(capacity, dtype=np.int8)
        self.likes = np.zeros(capacity, dtype=np.int64)
        self.shares = np.zeros(capacity, dtype=np.int64)
        self.views = np.zeros(capacity, dtype=np.int64)
        self.active = np.zeros(capacity, dtype=bool)

    def _grow(self) -> None:
        cap = 2 * len(self.creator)
        for name in ("creator", "birth", "kind", "likes", "shares", "views", "active"):
            old = getattr(self, name)
            new = np.zeros(cap, dtype=old.dtype)
            new[: self.size] = old[: self.size]
            setattr(self, name, new)
        topic = np.zeros((cap, self.k))
        topic[: self.size] = self.topic[: self.size]
        self.topic = topic

    def add(self, topic: np.ndarray, creator: int, birth: int, kind: int) -> int:
        if self.size == len(self.creator):
            self._grow()
        cid = self.size
        self.topic[cid] = topic
        self.creator[cid] = creator
        self.birth[cid] = birth
        self.kind[cid] = kind
        self.active[cid] = True
        self.size += 1
        return cid

    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.active[: self.size])

    def expire(self, step: int, lifespan: int) -> None:
        n = self.size
        old = (step - self.birth[:n]) >= lifespan
        self.active[:n] &= ~old


class InteractionLog:
    """Append-only interaction log stored as one columnar chunk per step."""

    COLUMNS = ("step", "agent", "content", "kind", "similarity", "delta", "source")

    def __init__(self):
        self.chunks: list[dict[str, np.ndarray]] = []

    def append_step(self, step: int, agent, content, kind, similarity, delta, source) -> None:
        if len(agent) == 0:
            return
        self.chunks.append({
            "step": np.full(len(agent), step, dtype=np.int64),
            "agent": np.asarray(agent, dtype=np.int64),
            "content": np.asarray(content, dtype=np.int64),
            "kind": np.asarray(kind, dtype=np.int8),
            "similarity": np.asarray(similarity, dtype=float),
            "delta": np.asarray(delta, dtype=float),
            "source": np.asarray(source, dtype=np.int8),
        })

    def __len__(self) -> int:
        return sum(len(c["agent"]) for c in self.chunks)

    def since(self, first_step: int) -> dict[str, np.ndarray]:
        """All columns for events with ``step >= first_step``."""
        chunks = [c for c in self.chunks if c["step"][0] >= first_step]
        if not chunks:
            return {name: np.zeros(0) for name in self.COLUMNS}
        return {name: np.concatenate([c[name] for c in chunks]) for name in self.COLUMNS}


@dataclass
class PlatformState:
    config: ExperimentConfig
    seed: int
    step: int
    agents: Agents
    content: ContentStore
    following: list[set[int]]
    outbox: list[deque]
    seen: list[set[int]]
    interactions: InteractionLog = field(default_factory=InteractionLog)
    recommender: object = None
    # per-step {(i, j): views of j's content by i}, newest last
    view_window: deque = field(default_factory=deque)
    view_totals: dict = field(default_factory=dict)
    last_recommendations: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.agents.n

    def adjacency(self) -> sp.csr_matrix:
        rows = []
        cols = []
        for i, outs in enumerate(self.following):
            rows.extend([i] * len(outs))
            cols.extend(outs)
        data = np.ones(len(rows), dtype=np.int64)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def edge_count(self) -> int:
        return sum(len(s) for s in self.following)

    def engagement(self, i: int, j: int, window: int) -> float:
        return min(1.0, self.view_totals.get((i, j), 0) / window)
