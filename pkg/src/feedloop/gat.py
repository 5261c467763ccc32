"""Two-layer multi-head graph attention network with a hand-written backward pass.

Layer 1 concatenates its heads, layer 2 averages them; both apply ELU after
aggregation and the final embeddings are L2-normalized. Link scores are
``sigmoid(h_u . h_c)``. Messages flow along ``src -> dst`` edges; every node
must have a self-loop so its attention softmax is defined.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.stats import rankdata

LEAKY_SLOPE = 0.2
PARAM_NAMES = ("W1", "a1_src", "a1_dst", "W2", "a2_src", "a2_dst")


class GraphError(ValueError):
    pass


@dataclass
class Graph:
    """Edges sorted by destination, in CSR layout over destinations."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    indptr: np.ndarray

    @classmethod
    def from_edges(cls, n_nodes: int, src, dst, add_self_loops: bool = True) -> "Graph":
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if add_self_loops:
            loops = np.arange(n_nodes, dtype=np.int64)
            src = np.concatenate([src, loops])
            dst = np.concatenate([dst, loops])
        # dedupe and sort by (dst, src)
        key = np.unique(dst * n_nodes + src)
        dst = key // n_nodes
        src = key % n_nodes
        counts = np.bincount(dst, minlength=n_nodes)
        if (counts == 0).any():
            bad = int(np.flatnonzero(counts == 0)[0])
            raise GraphError(f"node {bad} has no incoming edge (attention undefined)")
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(n_nodes, src, dst, indptr)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))


@njit(cache=True)
def _segment_softmax(logits, indptr):
    E, H = logits.shape
    out = np.empty_like(logits)
    for v in range(len(indptr) - 1):
        lo, hi = indptr[v], indptr[v + 1]
        for h in range(H):
            mx = -np.inf
            for e in range(lo, hi):
                if logits[e, h] > mx:
                    mx = logits[e, h]
            tot = 0.0
            for e in range(lo, hi):
                x = np.exp(logits[e, h] - mx)
                out[e, h] = x
                tot += x
            for e in range(lo, hi):
                out[e, h] /= tot
    return out


@njit(cache=True)
def _aggregate(beta, Z, src, indptr):
    """``O[v, h] = sum over edges e into v of beta[e, h] * Z[src[e], h]``."""
    N, H, d = Z.shape
    O = np.zeros((N, H, d))
    for v in range(N):
        for e in range(indptr[v], indptr[v + 1]):
            j = src[e]
            for h in range(H):
                b = beta[e, h]
                for k in range(d):
                    O[v, h, k] += b * Z[j, h, k]
    return O


@njit(cache=True)
def _aggregate_backward(dO, beta, Z, src, indptr):
    """Gradients of ``_aggregate`` with respect to ``Z`` and ``beta``."""
    N, H, d = Z.shape
    dZ = np.zeros((N, H, d))
    dbeta = np.empty(beta.shape)
    for v in range(N):
        for e in range(indptr[v], indptr[v + 1]):
            j = src[e]
            for h in range(H):
                b = beta[e, h]
                acc = 0.0
                for k in range(d):
                    g = dO[v, h, k]
                    acc += g * Z[j, h, k]
                    dZ[j, h, k] += b * g
                dbeta[e, h] = acc
    return dZ, dbeta


@njit(cache=True)
def _softmax_backward(alpha, dalpha, indptr):
    E, H = alpha.shape
    out = np.empty_like(alpha)
    for v in range(len(indptr) - 1):
        lo, hi = indptr[v], indptr[v + 1]
        for h in range(H):
            inner = 0.0
            for e in range(lo, hi):
                inner += alpha[e, h] * dalpha[e, h]
            for e in range(lo, hi):
                out[e, h] = alpha[e, h] * (dalpha[e, h] - inner)
    return out


def segment_softmax(logits: np.ndarray, graph: Graph) -> np.ndarray:
    """Softmax of per-edge logits (E, H) within each destination's edge block."""
    return _segment_softmax(np.ascontiguousarray(logits, dtype=np.float64), graph.indptr)


@dataclass
class GatModel:
    params: dict[str, np.ndarray]
    heads: int
    hidden_dim: int
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    last_trained_step: int = -1
    validation_auc: float = float("nan")
    train_count: int = 0

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, heads: int, rng: np.random.Generator) -> "GatModel":
        d1 = hidden_dim // heads

        def glorot(fan_in, fan_out, shape):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape)

        params = {
            "W1": glorot(in_dim, heads * d1, (in_dim, heads * d1)),
            "a1_src": glorot(d1, 1, (heads, d1)),
            "a1_dst": glorot(d1, 1, (heads, d1)),
            "W2": glorot(heads * d1, hidden_dim, (heads * d1, heads * hidden_dim)),
            "a2_src": glorot(hidden_dim, 1, (heads, hidden_dim)),
            "a2_dst": glorot(hidden_dim, 1, (heads, hidden_dim)),
        }
        return cls(params=params, heads=heads, hidden_dim=hidden_dim)

    def copy(self) -> "GatModel":
        return GatModel(
            params={k: v.copy() for k, v in self.params.items()},
            heads=self.heads, hidden_dim=self.hidden_dim,
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            adam_t=self.adam_t, last_trained_step=self.last_trained_step,
            validation_auc=self.validation_auc, train_count=self.train_count,
        )

    def finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())


def _layer_forward(X, W, a_src, a_dst, graph: Graph, heads: int, concat: bool,
                   dropout: float, rng):
    N = X.shape[0]
    d = W.shape[1] // heads
    Z = (X @ W).reshape(N, heads, d)
    s = np.einsum("nhd,hd->nh", Z, a_src)
    r = np.einsum("nhd,hd->nh", Z, a_dst)
    u = r[graph.dst] + s[graph.src]
    alpha = segment_softmax(leaky_relu(u), graph)
    if dropout > 0 and rng is not None:
        mask = (rng.random(alpha.shape) >= dropout) / (1.0 - dropout)
    else:
        mask = None
    beta = alpha * mask if mask is not None else alpha
    O = _aggregate(np.ascontiguousarray(beta), np.ascontiguousarray(Z), graph.src, graph.indptr)
    pre = O.reshape(N, heads * d) if concat else O.mean(axis=1)
    cache = dict(X=X, Z=Z, u=u, alpha=alpha, mask=mask, beta=beta, pre=pre, concat=concat)
    return elu(pre), cache


def _layer_backward(dY, W, a_src, a_dst, graph: Graph, heads: int, cache):
    X, Z, u, alpha, mask, beta, pre = (cache[k] for k in ("X", "Z", "u", "alpha", "mask", "beta", "pre"))
    N, _, d = Z.shape
    dpre = dY * elu_grad(pre)
    if cache["concat"]:
        dO = dpre.reshape(N, heads, d)
    else:
        dO = np.repeat(dpre[:, None, :] / heads, heads, axis=1)
    dZ, dbeta = _aggregate_backward(np.ascontiguousarray(dO), np.ascontiguousarray(beta),
                                    np.ascontiguousarray(Z), graph.src, graph.indptr)
    dalpha = dbeta * mask if mask is not None else dbeta
    dl = _softmax_backward(alpha, np.ascontiguousarray(dalpha), graph.indptr)
    du = dl * np.where(u > 0, 1.0, LEAKY_SLOPE)
    dr = np.add.reduceat(du, graph.indptr[:-1], axis=0)
    ds = np.stack([np.bincount(graph.src, weights=du[:, h], minlength=N) for h in range(heads)], axis=1)
    dZ += ds[:, :, None] * a_src[None] + dr[:, :, None] * a_dst[None]
    da_src = np.einsum("nh,nhd->hd", ds, Z)
    da_dst = np.einsum("nh,nhd->hd", dr, Z)
    dZf = dZ.reshape(N, -1)
    dW = X.T @ dZf
    dX = dZf @ W.T
    return dX, dW, da_src, da_dst


def forward(model: GatModel, X: np.ndarray, graph: Graph, dropout: float = 0.0, rng=None,
            return_cache: bool = False):
    """Unit-norm node embeddings (N, hidden_dim)."""
    p = model.params
    X0 = X
    in_mask = None
    if dropout > 0 and rng is not None:
        in_mask = (rng.random(X.shape) >= dropout) / (1.0 - dropout)
        X0 = X * in_mask
    Y1, c1 = _layer_forward(X0, p["W1"], p["a1_src"], p["a1_dst"], graph, model.heads, True, dropout, rng)
    Y2, c2 = _layer_forward(Y1, p["W2"], p["a2_src"], p["a2_dst"], graph, model.heads, False, dropout, rng)
    norm = np.linalg.norm(Y2, axis=1, keepdims=True)
    norm = np.maximum(norm, 1e-12)
    H = Y2 / norm
    if return_cache:
        return H, dict(c1=c1, c2=c2, norm=norm, H=H, in_mask=in_mask)
    return H


def backward(model: GatModel, graph: Graph, cache, dH: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    H, norm = cache["H"], cache["norm"]
    dY2 = (dH - H * np.sum(H * dH, axis=1, keepdims=True)) / norm
    dY1, dW2, da2s, da2d = _layer_backward(dY2, p["W2"], p["a2_src"], p["a2_dst"], graph,
                                           model.heads, cache["c2"])
    _, dW1, da1s, da1d = _layer_backward(dY1, p["W1"], p["a1_src"], p["a1_dst"], graph,
                                         model.heads, cache["c1"])
    return {"W1": dW1, "a1_src": da1s, "a1_dst": da1d, "W2": dW2, "a2_src": da2s, "a2_dst": da2d}


def attention_weights(model: GatModel, X: np.ndarray, graph: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Per-edge attention (E, heads) of layers 1 and 2, without dropout."""
    _, cache = forward(model, X, graph, return_cache=True)
    return cache["c1"]["alpha"], cache["c2"]["alpha"]


def link_loss(H: np.ndarray, users: np.ndarray, items: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy of ``sigmoid(h_u . h_c)`` and its gradient w.r.t. H."""
    z = np.sum(H[users] * H[items], axis=1)
    # log(1 + exp(-z)) and log(1 + exp(z)), stably
    loss = np.mean(labels * np.logaddexp(0.0, -z) + (1 - labels) * np.logaddexp(0.0, z))
    yhat = 1.0 / (1.0 + np.exp(-z))
    dz = (yhat - labels) / len(labels)
    dH = np.zeros_like(H)
    np.add.at(dH, users, dz[:, None] * H[items])
    np.add.at(dH, items, dz[:, None] * H[users])
    return float(loss), dH


def loss_and_grad(model: GatModel, X, graph: Graph, users, items, labels, dropout=0.0, rng=None):
    H, cache = forward(model, X, graph, dropout=dropout, rng=rng, return_cache=True)
    loss, dH = link_loss(H, users, items, labels)
    return loss, backward(model, graph, cache, dH)


def adam_step(model: GatModel, grads: dict[str, np.ndarray], lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    model.adam_t += 1
    t = model.adam_t
    for name in PARAM_NAMES:
        g = grads[name]
        m = model.adam_m.get(name)
        if m is None:
            m = np.zeros_like(g)
            model.adam_v[name] = np.zeros_like(g)
        v = model.adam_v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        model.adam_m[name] = m
        model.adam_v[name] = v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        model.params[name] = model.params[name] - lr * mhat / (np.sqrt(vhat) + eps)


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied pairs count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    r = rankdata(scores, method="average")
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


CHECKPOINT_FORMAT = "feedloop-gat-1"


def save_checkpoint(model: GatModel, directory: str | Path) -> Path:
    """Write the weights as raw little-endian float64 (``weights.bin``, tensors
    concatenated in ``PARAM_NAMES`` order) and a JSON manifest of shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    offset = 0
    with open(directory / "weights.bin", "wb") as fh:
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            fh.write(arr.tobytes())
            layers.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "heads": model.heads,
        "hidden_dim": model.hidden_dim,
        "step_trained": model.last_trained_step,
        "train_count": model.train_count,
        "validation_auc": model.validation_auc,
        "layers": layers,
    }
    path = directory / "model_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory: str | Path) -> GatModel:
    directory = Path(directory)
    manifest = json.loads((directory / "model_manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.fromfile(directory / "weights.bin", dtype="<f8")
    params = {}
    for layer in manifest["layers"]:
        size = int(np.prod(layer["shape"]))
        params[layer["name"]] = flat[layer["offset"]:layer["offset"] + size].reshape(layer["shape"]).copy()
    return GatModel(params=params, heads=manifest["heads"], hidden_dim=manifest["hidden_dim"],
                    last_trained_step=manifest["step_trained"], train_count=manifest["train_count"],
                    validation_auc=manifest["validation_auc"])
