"""GAT forward pass against a loop-per-node reference, gradient check, training."""

import numpy as np
import pytest

from feedloop import gat


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def reference_forward(model, X, src, dst):
    """Per-destination loops straight from the attention definition (self-loops added)."""
    n = X.shape[0]
    edges = sorted(set(zip(src, dst)) | {(v, v) for v in range(n)})
    incoming = {v: [s for s, d in edges if d == v] for v in range(n)}
    heads = model.heads
    p = model.params

    def layer(Hin, W, a_s, a_d, concat):
        d = W.shape[1] // heads
        Z = (Hin @ W).reshape(n, heads, d)
        out = np.zeros((n, heads, d))
        for v in range(n):
            for h in range(heads):
                logits = []
                for s in incoming[v]:
                    e = Z[v, h] @ a_d[h] + Z[s, h] @ a_s[h]
                    logits.append(e if e > 0 else 0.2 * e)
                w = np.exp(np.array(logits) - max(logits))
                w /= w.sum()
                for wk, s in zip(w, incoming[v]):
                    out[v, h] += wk * Z[s, h]
        pre = out.reshape(n, heads * d) if concat else out.mean(axis=1)
        return _elu(pre)

    h1 = layer(X, p["W1"], p["a1_src"], p["a1_dst"], True)
    h2 = layer(h1, p["W2"], p["a2_src"], p["a2_dst"], False)
    return h2 / np.linalg.norm(h2, axis=1, keepdims=True)


def small_instance(seed=0, n=6, in_dim=5, hidden=8, heads=2):
    rng = np.random.default_rng(seed)
    X = rng.random((n, in_dim))
    src = [0, 1, 2, 3, 4, 5, 0, 3]
    dst = [3, 4, 5, 0, 1, 2, 4, 5]
    g = gat.Graph.from_edges(n, src, dst)
    m = gat.GatModel.init(in_dim, hidden, heads, rng)
    return X, src, dst, g, m


def test_forward_matches_loop_reference():
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(5, 25))
        E = int(rng.integers(n, 4 * n))
        src = rng.integers(0, n, E).tolist()
        dst = rng.integers(0, n, E).tolist()
        X = rng.normal(size=(n, 7))
        m = gat.GatModel.init(7, 12, 3, rng)
        H = gat.forward(m, X, gat.Graph.from_edges(n, src, dst))
        np.testing.assert_allclose(H, reference_forward(m, X, src, dst), atol=1e-10)


def test_gradient_check_six_nodes():
    X, _, _, g, m = small_instance()
    u = np.array([0, 1, 2, 0])
    c = np.array([3, 4, 5, 5])
    y = np.array([1, 1, 0, 0.0])
    _, grads = gat.loss_and_grad(m, X, g, u, c, y)
    worst = 0.0
    h = 1e-6
    for name, v in m.params.items():
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            lp, _ = gat.loss_and_grad(m, X, g, u, c, y)
            v[idx] = orig - h
            lm, _ = gat.loss_and_grad(m, X, g, u, c, y)
            v[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(1e-8, abs(fd) + abs(an)))
    assert worst < 1e-3


def test_attention_rows_sum_to_one():
    X, _, _, g, m = small_instance(1)
    a1, a2 = gat.attention_weights(m, X, g)
    for alpha in (a1, a2):
        sums = np.add.reduceat(alpha, g.indptr[:-1], axis=0)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)
        assert (alpha >= 0).all()


def test_embeddings_are_unit_norm():
    X, _, _, g, m = small_instance(2)
    H = gat.forward(m, X, g)
    np.testing.assert_allclose(np.linalg.norm(H, axis=1), 1.0, atol=1e-12)


def test_graph_requires_incoming_edges():
    with pytest.raises(gat.GraphError):
        gat.Graph.from_edges(3, [0], [1], add_self_loops=False)


def test_link_loss_gradient():
    rng = np.random.default_rng(3)
    H = rng.normal(size=(6, 4))
    u = np.array([0, 1, 2])
    c = np.array([3, 4, 5])
    y = np.array([1.0, 0.0, 1.0])
    _, dH = gat.link_loss(H, u, c, y)
    h = 1e-6
    for idx in np.ndindex(H.shape):
        Hp = H.copy()
        Hp[idx] += h
        Hm = H.copy()
        Hm[idx] -= h
        fd = (gat.link_loss(Hp, u, c, y)[0] - gat.link_loss(Hm, u, c, y)[0]) / (2 * h)
        assert dH[idx] == pytest.approx(fd, abs=1e-8)


def test_adam_reduces_loss_on_toy_links():
    rng = np.random.default_rng(4)
    n = 20
    X = np.eye(n)
    src = rng.integers(0, n, 40)
    dst = rng.integers(0, n, 40)
    g = gat.Graph.from_edges(n, np.concatenate([src, dst]), np.concatenate([dst, src]))
    m = gat.GatModel.init(n, 8, 2, rng)
    users = np.concatenate([src[:20], src[:20]])
    items = np.concatenate([dst[:20], rng.integers(0, n, 20)])
    labels = np.concatenate([np.ones(20), np.zeros(20)])
    first, _ = gat.loss_and_grad(m, X, g, users, items, labels)
    for _ in range(200):
        _, grads = gat.loss_and_grad(m, X, g, users, items, labels)
        gat.adam_step(m, grads, 0.01)
    last, _ = gat.loss_and_grad(m, X, g, users, items, labels)
    assert last < first


def test_dropout_is_reproducible_and_off_by_default():
    X, _, _, g, m = small_instance(5)
    a = gat.forward(m, X, g, dropout=0.3, rng=np.random.default_rng(9))
    b = gat.forward(m, X, g, dropout=0.3, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert np.array_equal(gat.forward(m, X, g), gat.forward(m, X, g, dropout=0.3, rng=None))


def test_checkpoint_round_trip(tmp_path):
    X, _, _, g, m = small_instance(6)
    m.last_trained_step = 35
    gat.save_checkpoint(m, tmp_path / "ck")
    back = gat.load_checkpoint(tmp_path / "ck")
    for k in gat.PARAM_NAMES:
        assert np.array_equal(back.params[k], m.params[k])
    assert back.heads == m.heads and back.last_trained_step == 35
    assert np.array_equal(gat.forward(back, X, g), gat.forward(m, X, g))
    import json
    manifest = json.loads((tmp_path / "ck" / "model_manifest.json").read_text())
    assert manifest["heads"] == 2 and manifest["step_trained"] == 35
    assert [layer["shape"] for layer in manifest["layers"]][0] == [5, 8]


def test_auc_requires_both_classes():
    with pytest.raises(ValueError):
        gat.auc([0.1, 0.2], [1, 1])
    assert gat.auc([0.1, 0.9], [0, 1]) == 1.0
