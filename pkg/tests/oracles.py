"""Literal numpy reference implementations used as test oracles.

Nothing here imports the package; every formula is written out densely so
that the sparse/batched code paths are checked against an independent route.
"""

from __future__ import annotations

import itertools

import numpy as np


def leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def dense_gat(h, adj, W, a_dst, a_src, slope=0.2):
    """Multi-head graph attention over a dense adjacency.

    h: (N, d); adj[i, j] = 1 when j is a neighbour feeding node i;
    W: (heads, d_k, d); a_dst, a_src: (heads, d_k).
    Returns alpha (heads, N, N) with zeros off the graph, and h~ (N, heads*d_k).
    """
    N = h.shape[0]
    heads, d_k, _ = W.shape
    alpha = np.zeros((heads, N, N))
    out = np.zeros((N, heads * d_k))
    for k in range(heads):
        v = h @ W[k].T
        a = np.concatenate([a_dst[k], a_src[k]])
        for i in range(N):
            nbrs = [j for j in range(N) if adj[i, j]]
            logits = np.array([leaky(a @ np.concatenate([v[i], v[j]]), slope) for j in nbrs])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            for j, wj in zip(nbrs, w):
                alpha[k, i, j] = wj
                out[i, k * d_k:(k + 1) * d_k] += wj * v[j]
    return alpha, out


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def dense_block(h, adj, p, slope=0.2):
    """GAT block: LN(skip(x) + GAT(x)) then LN(out + FFN(out)); ``p`` holds numpy weights."""
    _, att = dense_gat(h, adj, p["W"], p["a_dst"], p["a_src"], slope)
    skip = h if p.get("skip") is None else h @ p["skip"].T
    out = layer_norm(skip + att, p["ln1_g"], p["ln1_b"])
    ffn = np.maximum(out @ p["f1_w"].T + p["f1_b"], 0) @ p["f2_w"].T + p["f2_b"]
    return layer_norm(out + ffn, p["ln2_g"], p["ln2_b"])


def cosine_table(x):
    N = x.shape[0]
    sim = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            ni, nj = np.linalg.norm(x[i]), np.linalg.norm(x[j])
            sim[i, j] = 0.0 if ni == 0 or nj == 0 else x[i] @ x[j] / (ni * nj)
    return sim


def cosine_adjacency(x, n, mode="lowest"):
    """Dense adjacency: each node takes the n extremal-similarity others (ties by index) plus itself."""
    N = x.shape[0]
    sim = cosine_table(x)
    adj = np.eye(N, dtype=int)
    n = min(n, N - 1)
    for i in range(N):
        others = [j for j in range(N) if j != i]
        sign = 1 if mode == "lowest" else -1
        others.sort(key=lambda j: (sign * sim[i, j], j))
        for j in others[:n]:
            adj[i, j] = 1
    return adj


def softmax(x):
    w = np.exp(x - x.max())
    return w / w.sum()


def connected_graphs(n_nodes):
    """All connected undirected simple graphs on ``n_nodes`` labelled nodes, as adjacency with self-loops."""
    pairs = list(itertools.combinations(range(n_nodes), 2))
    for mask in range(1 << len(pairs)):
        adj = np.eye(n_nodes, dtype=int)
        for b, (i, j) in enumerate(pairs):
            if mask >> b & 1:
                adj[i, j] = adj[j, i] = 1
        seen, stack = {0}, [0]
        while stack:
            u = stack.pop()
            for v in np.nonzero(adj[u])[0]:
                if v not in seen:
                    seen.add(int(v))
                    stack.append(int(v))
        if len(seen) == n_nodes:
            yield adj


def block_params_numpy(block):
    """Numpy copies of a GATBlock's parameters in the oracle's layout."""
    att = block.attn
    heads, d_k = att.heads, att.d_k
    W = att.W.weight.detach().double().numpy().reshape(heads, d_k, -1)
    skip = getattr(block.skip, "weight", None)
    return {
        "W": W,
        "a_dst": att.a_dst.detach().double().numpy(),
        "a_src": att.a_src.detach().double().numpy(),
        "skip": None if skip is None else skip.detach().double().numpy(),
        "ln1_g": block.ln1.weight.detach().double().numpy(),
        "ln1_b": block.ln1.bias.detach().double().numpy(),
        "f1_w": block.ffn[0].weight.detach().double().numpy(),
        "f1_b": block.ffn[0].bias.detach().double().numpy(),
        "f2_w": block.ffn[2].weight.detach().double().numpy(),
        "f2_b": block.ffn[2].bias.detach().double().numpy(),
        "ln2_g": block.ln2.weight.detach().double().numpy(),
        "ln2_b": block.ln2.bias.detach().double().numpy(),
    }


def edges_from_adj(adj):
    tgt, src = np.nonzero(adj)
    return np.stack([tgt, src])


def metrics_naive(pred, true):
    """Two-pass textbook MAE, RMSE, PCC."""
    n = len(pred)
    mae = sum(abs(p - t) for p, t in zip(pred, true)) / n
    rmse = (sum((p - t) ** 2 for p, t in zip(pred, true)) / n) ** 0.5
    mp = sum(pred) / n
    mt = sum(true) / n
    cov = sum((p - mp) * (t - mt) for p, t in zip(pred, true))
    vp = sum((p - mp) ** 2 for p in pred)
    vt = sum((t - mt) ** 2 for t in true)
    return mae, rmse, cov / (vp * vt) ** 0.5


def sample_std(values):
    n = len(values)
    mean = sum(values) / n
    return (sum((v - mean) ** 2 for v in values) / (n - 1)) ** 0.5
