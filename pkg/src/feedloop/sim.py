"""The discrete-time platform loop.

Each transition runs four phases in order: activity (feeds are built and
consumed), content (creation, cascade posting, expiry), network (follow
opportunities) and recommender (activation and retraining). Every stochastic
choice draws from a stream keyed by (seed, phase, step, agent), so agent
evaluation order never matters.
"""

from __future__ import annotations

import copy
import io
from collections import Counter, deque
from collections.abc import Iterable

import numpy as np

from feedloop import behavior, metrics, recommender
from feedloop.config import ExperimentConfig
from feedloop.metrics import METRIC_COLUMNS, MetricsSnapshot
from feedloop.rng import stream
from feedloop.state import (
    FOLLOW_OPPORTUNITY, LIKE, ORGANIC, POPULAR, NICHE, RECOMMENDED, SHARE, VIEW,
    Agents, ContentStore, PlatformState,
)

CSV_HEADER = ("step",) + METRIC_COLUMNS


def _dirichlet_unit(rng: np.random.Generator, count: int, k: int, concentration: float) -> np.ndarray:
    x = rng.dirichlet(np.full(k, concentration), size=count)
    # a Dirichlet draw can underflow to an all-zero row for tiny concentrations
    bad = ~np.isfinite(x).all(axis=1) | (x.sum(axis=1) == 0)
    if bad.any():
        x[bad] = rng.dirichlet(np.ones(k), size=int(bad.sum()))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def initial_edge_probability(target_density: float) -> float:
    """Directed edge probability whose undirected projection has the target density."""
    return 1.0 - np.sqrt(1.0 - target_density)


def init_platform(config: ExperimentConfig, seed: int) -> PlatformState:
    config.validate()
    bp = config.behavior
    n, k = config.n_users, bp.topics
    g = stream(seed, "init")
    user_type = (g.random(n) < config.alpha_enthusiast).astype(np.int8)
    preference = _dirichlet_unit(g, n, k, bp.preference_concentration)
    rates = np.where(user_type == behavior.ENTHUSIAST, bp.creation_rates[1], bp.creation_rates[0])
    agents = Agents(
        user_type=user_type,
        preference=preference,
        creation_rate=rates.astype(float),
        satisfaction=np.full(n, bp.initial_satisfaction),
        active=np.ones(n, dtype=bool),
    )

    p_edge = initial_edge_probability(bp.initial_density)
    mask = g.random((n, n)) < p_edge
    np.fill_diagonal(mask, False)
    following = [set(np.flatnonzero(row).tolist()) for row in mask]

    pool_size = max(1, int(round(n * config.content_ratio)))
    store = ContentStore(k, capacity=pool_size * 2)
    topics = _dirichlet_unit(g, pool_size, k, bp.preference_concentration)
    creators = g.integers(0, n, size=pool_size)
    kinds = np.where(g.random(pool_size) < bp.popular_fraction, POPULAR, NICHE)
    outbox = [deque() for _ in range(n)]
    for topic, creator, kind in zip(topics, creators, kinds):
        cid = store.add(topic, int(creator), 0, int(kind))
        outbox[int(creator)].append((0, cid))

    state = PlatformState(
        config=config,
        seed=seed,
        step=0,
        agents=agents,
        content=store,
        following=following,
        outbox=outbox,
        seen=[set() for _ in range(n)],
    )
    state.recommender = recommender.RecommenderState.for_config(config)
    return state


def followee_posts(state: PlatformState, i: int, limit: int) -> list[int]:
    """Most recent active items posted (created or shared) by ``i``'s followees."""
    content = state.content
    posts = []
    for j in state.following[i]:
        for t, cid in state.outbox[j]:
            if content.active[cid]:
                posts.append((-t, cid))
    posts.sort()
    out = []
    taken = set()
    for _, cid in posts:
        if cid in taken or content.creator[cid] == i or cid in state.seen[i]:
            continue
        taken.add(cid)
        out.append(cid)
        if len(out) >= limit:
            break
    return out


def _random_items(active_ids: np.ndarray, count: int, exclude, rng: np.random.Generator) -> list[int]:
    if count <= 0 or active_ids.size == 0:
        return []
    draw = rng.permutation(active_ids.size)[: count + len(exclude) + 4]
    out = []
    for idx in draw.tolist():
        cid = int(active_ids[idx])
        if cid in exclude:
            continue
        out.append(cid)
        if len(out) >= count:
            break
    return out


def candidate_pool(state: PlatformState, i: int, active_ids: np.ndarray, rng: np.random.Generator,
                   rec_scores: np.ndarray | None = None, ranked: list[int] | None = None
                   ) -> tuple[list[int], list[int]]:
    """Candidate items for agent ``i`` and a parallel list of sources.

    ``ranked`` may carry the recommender's top ``2F`` list when the caller has
    already computed it.
    """
    bp = state.config.behavior
    F, D = bp.feed_size, bp.random_discovery
    rec = state.recommender
    if rec.serving:
        if ranked is None:
            ranked = recommender.recommend(state, i, 2 * F, rng, active_ids=active_ids, scores=rec_scores)
        base, source = ranked, RECOMMENDED
    else:
        base, source = followee_posts(state, i, 2 * F), ORGANIC
    exclude = set(base) | state.seen[i]
    extra = [c for c in _random_items(active_ids, D + 2, exclude, rng)
             if state.content.creator[c] != i][:D]
    return base + extra, [source] * len(base) + [ORGANIC] * len(extra)


def build_feed(state: PlatformState, i: int, rng: np.random.Generator,
               active_ids: np.ndarray | None = None, rec_scores: np.ndarray | None = None,
               ranked: list[int] | None = None) -> tuple[list[int], list[int]]:
    """Feed for agent ``i``: up to ``feed_size`` items drawn without replacement
    from the candidate pool by exploration sampling over similarity.

    Returns ``(content ids, sources)`` in draw order.
    """
    if active_ids is None:
        active_ids = state.content.active_ids()
    pool, sources = candidate_pool(state, i, active_ids, rng, rec_scores, ranked)
    if not pool:
        return [], []
    p = state.agents.preference[i]
    sims = state.content.topic[pool] @ p
    order = behavior.sample_without_replacement(sims, state.config.r_explore,
                                                state.config.behavior.feed_size, rng)
    return [pool[j] for j in order], [sources[j] for j in order]


def churn_update(state: PlatformState) -> None:
    """Agents below the churn threshold become inactive for good."""
    agents = state.agents
    agents.active &= agents.satisfaction >= state.config.behavior.churn_threshold


def _activity_phase(state: PlatformState, t: int):
    cfg = state.config
    bp = cfg.behavior
    agents = state.agents
    content = state.content
    active_ids = content.active_ids()
    rec = state.recommender
    rec_scores = recommender.score_matrix(state, active_ids) if rec.serving else None
    cols = {name: [] for name in ("agent", "content", "kind", "similarity", "delta", "source")}
    engaged: dict[int, set[int]] = {}
    opportunities: dict[int, list[int]] = {}
    recs_now: dict[int, list[int]] = {}
    step_views = Counter()
    likes_total = shares_total = views_total = 0
    topic_counts = np.zeros(bp.topics)
    new_shares: list[tuple[int, int]] = []
    sat_next = agents.satisfaction.copy()
    for i in np.flatnonzero(agents.active).tolist():
        g = stream(state.seed, "activity", t, i)
        ranked = None
        if rec.serving:
            ranked = recommender.recommend(state, i, 2 * bp.feed_size, g, active_ids=active_ids,
                                           scores=rec_scores)
            recs_now[i] = ranked[:10]
        feed, sources = build_feed(state, i, g, active_ids, rec_scores, ranked)
        if not feed:
            continue
        feed_arr = np.asarray(feed)
        sims = np.clip(content.topic[feed_arr] @ agents.preference[i], 0.0, 1.0)
        draws = g.random((3, len(feed)))
        deltas = behavior.satisfaction_deltas(sims, int(agents.user_type[i]), draws[0], bp)
        p_like = behavior.like_probability(sims, bp)
        liked = draws[1] < p_like
        shared = draws[2] < behavior.sigmoid(bp.kappa * (deltas - bp.share_threshold))
        content.views[feed_arr] += 1
        content.likes[feed_arr[liked]] += 1
        content.shares[feed_arr[shared]] += 1
        views_total += len(feed)
        likes_total += int(liked.sum())
        shares_total += int(shared.sum())
        np.add.at(topic_counts, np.argmax(content.topic[feed_arr], axis=1), 1)
        if bp.satisfaction_update == "mean":
            sat_next[i] = behavior.update_satisfaction(agents.satisfaction[i], float(deltas.mean()))
        else:
            s = agents.satisfaction[i]
            for d in deltas:
                s = behavior.update_satisfaction(s, float(d))
            sat_next[i] = s
        if bp.exclude_seen:
            state.seen[i].update(feed)
        eng = set()
        opp = []
        for pos, cid in enumerate(feed):
            creator = int(content.creator[cid])
            step_views[(i, creator)] += 1
            src = sources[pos]
            for kind, flag in ((VIEW, True), (LIKE, liked[pos]), (SHARE, shared[pos])):
                if flag:
                    cols["agent"].append(i)
                    cols["content"].append(cid)
                    cols["kind"].append(kind)
                    cols["similarity"].append(sims[pos])
                    cols["delta"].append(deltas[pos])
                    cols["source"].append(src)
            if shared[pos]:
                new_shares.append((i, cid))
            if liked[pos] or shared[pos]:
                eng.add(cid)
            if liked[pos] or (shared[pos] and bp.follow_trigger == "engaged"):
                if creator != i and creator not in state.following[i] and creator not in opp:
                    opp.append(creator)
                    cols["agent"].append(i)
                    cols["content"].append(cid)
                    cols["kind"].append(FOLLOW_OPPORTUNITY)
                    cols["similarity"].append(sims[pos])
                    cols["delta"].append(deltas[pos])
                    cols["source"].append(src)
        engaged[i] = eng
        if opp:
            opportunities[i] = opp
    agents.satisfaction = sat_next
    state.interactions.append_step(t, **cols)
    summary = {
        "views": views_total, "likes": likes_total, "shares": shares_total,
        "topic_counts": topic_counts, "engaged": engaged, "recs": recs_now,
    }
    return opportunities, new_shares, step_views, summary


def _content_phase(state: PlatformState, t: int, new_shares) -> None:
    bp = state.config.behavior
    agents = state.agents
    for i, cid in new_shares:
        state.outbox[i].append((t, cid))
    for i in np.flatnonzero(agents.active).tolist():
        g = stream(state.seed, "create", t, i)
        topic = behavior.create_content(agents.preference[i], agents.creation_rate[i], bp, g)
        if topic is not None:
            kind = POPULAR if g.random() < bp.popular_fraction else NICHE
            cid = state.content.add(topic, i, t, kind)
            state.outbox[i].append((t, cid))
    state.content.expire(t, bp.content_lifespan)
    horizon = t - bp.content_lifespan
    for box in state.outbox:
        while box and box[0][0] <= horizon:
            box.popleft()


def _network_phase(state: PlatformState, t: int, opportunities, step_views) -> None:
    bp = state.config.behavior
    # engagement window: views of j's content by i over the last W steps
    state.view_window.append(step_views)
    for key, c in step_views.items():
        state.view_totals[key] = state.view_totals.get(key, 0) + c
    while len(state.view_window) > bp.engagement_window:
        old = state.view_window.popleft()
        for key, c in old.items():
            left = state.view_totals[key] - c
            if left:
                state.view_totals[key] = left
            else:
                del state.view_totals[key]
    pref = state.agents.preference
    for i in sorted(opportunities):
        if not state.agents.active[i]:
            continue
        new = evaluate_follow_opportunities(state, i, opportunities[i],
                                            stream(state.seed, "follow", t, i))
        state.following[i].update(new)


def evaluate_follow_opportunities(state: PlatformState, i: int, creators: Iterable[int],
                                  rng: np.random.Generator) -> set[int]:
    """New followees for ``i`` among the creators it engaged with this step."""
    bp = state.config.behavior
    pref = state.agents.preference
    new = set()
    for j in sorted(set(creators)):
        if j == i or j in state.following[i]:
            continue
        sim = float(np.clip(pref[i] @ pref[j], 0.0, 1.0))
        e = state.engagement(i, j, bp.engagement_window)
        if rng.random() < behavior.follow_probability(sim, e, bp):
            new.add(j)
    return new


def clone_state(state: PlatformState) -> PlatformState:
    """Independent copy of ``state``. The interaction log and the GAT weights
    are shared: a step only appends new log chunks and retraining replaces the
    model object instead of mutating it."""
    log = state.interactions
    shared_log = type(log)()
    shared_log.chunks = list(log.chunks)
    memo = {id(log): shared_log, id(state.config): state.config}
    model = state.recommender.model
    if model is not None:
        memo[id(model)] = model
    return copy.deepcopy(state, memo)


def snapshot(state: PlatformState, summary: dict, precision: float) -> MetricsSnapshot:
    adj = state.adjacency()
    und = metrics.undirected(adj)
    content = state.content
    act = content.active_ids()
    views = content.views[act]
    shares = content.shares[act]
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(views > 0, np.minimum(1.0, shares / np.maximum(views, 1)), 0.0)
    topic_counts = summary["topic_counts"]
    return MetricsSnapshot(
        step=state.step,
        density=metrics.density(und),
        local_clustering_mean=float(metrics.local_clustering(und).mean()),
        transitivity=metrics.global_transitivity(und),
        modularity=metrics.greedy_modularity(und)[0],
        avg_path_length=metrics.safe(metrics.avg_path_length, und),
        reciprocity=metrics.safe(metrics.reciprocity, adj),
        assortativity=metrics.safe(metrics.degree_assortativity, und),
        topic_entropy=metrics.safe(metrics.topic_entropy, topic_counts),
        retention=metrics.retention(state.agents.satisfaction, state.config.behavior.churn_threshold),
        engagement_rate=metrics.engagement_rate(summary["views"], summary["likes"], summary["shares"]),
        content_spread=float(views.mean()) if act.size else 0.0,
        viral_coefficient_mean=float(phi.mean()) if act.size else 0.0,
        precision_at_10=precision,
        satisfaction_mean=float(state.agents.satisfaction.mean()),
    )


def step(state: PlatformState, measure: bool = True) -> MetricsSnapshot | None:
    """Advance ``state`` by one transition in place and return its metrics
    (``None`` when ``measure`` is false)."""
    t = state.step + 1
    opportunities, new_shares, step_views, summary = _activity_phase(state, t)
    churn_update(state)
    _content_phase(state, t, new_shares)
    _network_phase(state, t, opportunities, step_views)

    precision = float("nan")
    if state.last_recommendations:
        precision = metrics.safe(metrics.precision_at_k, state.last_recommendations,
                                 summary["engaged"], 10)
    state.last_recommendations = summary["recs"]

    state.step = t
    recommender.maybe_retrain(state)
    if not measure:
        return None
    return snapshot(state, summary, precision)


def run(config: ExperimentConfig, seed: int, steps: int | None = None,
        state_hook=None) -> list[MetricsSnapshot]:
    steps = config.steps if steps is None else steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    state = init_platform(config, seed)
    out = []
    for _ in range(steps):
        out.append(step(state))
        if state_hook is not None:
            state_hook(state)
    return out


def format_value(v: float) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v != v:
        return "nan"
    return repr(float(v))


def trajectory_csv(trajectory: list[MetricsSnapshot]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for snap in trajectory:
        buf.write(",".join(format_value(v) for v in snap.values()) + "\n")
    return buf.getvalue()
