"""Straight-loop reference forward pass, written independently of the package.

Everything is scalar Python loops over float64 values taken from a model's
``state_dict``; no kernel from ``gdcaf`` is used. Slow by design, meant for
maps no bigger than 4x4 and a handful of channels.
"""

from __future__ import annotations

import math

import numpy as np


def conv_same(img, kern):
    """3x3 (odd) cross-correlation with zero padding on one 2-D map."""
    H, W = img.shape
    kh, kw = kern.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    y, x = i + a - kh // 2, j + b - kw // 2
                    if 0 <= y < H and 0 <= x < W:
                        acc += img[y, x] * kern[a, b]
            out[i, j] = acc
    return out


def depthwise(x, kernels):
    """x (C, H, W), kernels (C, M, 3, 3) -> (C*M, H, W), channel c*M + m."""
    C, M = kernels.shape[:2]
    return np.stack([conv_same(x[c], kernels[c, m]) for c in range(C) for m in range(M)])


def pointwise(x, w, b):
    Cout, Cin = w.shape
    H, W = x.shape[1:]
    out = np.zeros((Cout, H, W))
    for o in range(Cout):
        for i in range(H):
            for j in range(W):
                acc = b[o]
                for c in range(Cin):
                    acc += w[o, c] * x[c, i, j]
                out[o, i, j] = acc
    return out


def largest_divisor_at_most(n, cap=4):
    return max(g for g in range(1, min(cap, n) + 1) if n % g == 0)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    C = x.shape[0]
    per = C // groups
    out = np.empty_like(x)
    for g in range(groups):
        vals = [v for c in range(g * per, (g + 1) * per) for v in x[c].ravel()]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        for c in range(g * per, (g + 1) * per):
            out[c] = (x[c] - mean) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def relu(x):
    return np.where(x > 0, x, 0.0)


def leaky(v, slope):
    return v if v >= 0 else slope * v


def stage(x, sd, prefix, p):
    h = depthwise(x, sd[prefix + "depthwise"][p])
    h = pointwise(h, sd[prefix + "pointwise"][p], sd[prefix + "bias"][p])
    h = group_norm(h, largest_divisor_at_most(h.shape[0]), sd[prefix + "gamma"][p], sd[prefix + "beta"][p])
    return relu(h)


def block(x, sd, prefix, p=0):
    return stage(stage(x, sd, prefix + "stage1.", p), sd, prefix + "stage2.", p)


def pool(x):
    C, H, W = x.shape
    out = np.zeros((C, H // 2, W // 2))
    for c in range(C):
        for i in range(H // 2):
            for j in range(W // 2):
                out[c, i, j] = (x[c, 2 * i, 2 * j] + x[c, 2 * i + 1, 2 * j] + x[c, 2 * i, 2 * j + 1] + x[c, 2 * i + 1, 2 * j + 1]) / 4
    return out


def upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def inner(a, b):
    return sum(float(u) * float(v) for u, v in zip(a.ravel(), b.ravel()))


def softmax(vals):
    m = max(vals)
    e = [math.exp(v - m) for v in vals]
    s = sum(e)
    return [v / s for v in e]


def projections(nodes, sd, prefix, K, T):
    """Per node, per head: the head's T-channel slice through that head's q/k/v block."""
    out = {}
    for name in ("query", "key", "value"):
        out[name] = [
            [block(x[k * T : (k + 1) * T], sd, f"{prefix}{name}.", k) for k in range(K)]
            for x in nodes
        ]
    return out


def spatial_attention(nodes, sd, prefix, K, T, slope, pool_qkv):
    """nodes: list of (D, H, W). Returns (outputs, alpha[k][t] as N x N lists)."""
    src = [pool(x) for x in nodes] if pool_qkv else nodes
    N = len(nodes)
    d = src[0].shape[1] * src[0].shape[2]
    P = projections(src, sd, prefix, K, T)
    agg = [np.zeros_like(s) for s in src]
    alphas = np.zeros((K, T, N, N))
    for k in range(K):
        for t in range(T):
            for i in range(N):
                scores = [leaky(inner(P["query"][i][k][t], P["key"][v][k][t]) / math.sqrt(d), slope) for v in range(N)]
                alpha = softmax(scores)
                alphas[k, t, i] = alpha
                for v in range(N):
                    agg[i][k * T + t] += alpha[v] * P["value"][v][k][t]
    if pool_qkv:
        agg = [upsample(a) for a in agg]
    return [block(a, sd, prefix + "post.") for a in agg], alphas


def temporal_attention(nodes, sd, prefix, K, T, slope, pool_qkv):
    src = [pool(x) for x in nodes] if pool_qkv else nodes
    N = len(nodes)
    d = src[0].shape[1] * src[0].shape[2]
    P = projections(src, sd, prefix, K, T)
    agg = [np.zeros_like(s) for s in src]
    betas = np.zeros((K, N, T, T))
    for k in range(K):
        for n in range(N):
            for ti in range(T):
                scores = [leaky(inner(P["query"][n][k][ti], P["key"][n][k][t]) / math.sqrt(d), slope) for t in range(T)]
                beta = softmax(scores)
                betas[k, n, ti] = beta
                for t in range(T):
                    agg[n][k * T + ti] += beta[t] * P["value"][n][k][t]
    if pool_qkv:
        agg = [upsample(a) for a in agg]
    return [block(a, sd, prefix + "post.") for a in agg], betas


def forward(X, state, cfg):
    """X (N, T, H, W) for one sample -> ((N, H, W), spatial alphas, temporal betas) per block."""
    sd = {k: np.asarray(v, np.float64) for k, v in state.items()}
    K, T = cfg.heads, cfg.t_in
    nodes = [np.asarray(x, np.float64) for x in X]
    if cfg.pool_input:
        nodes = [pool(x) for x in nodes]
    nodes = [block(x, sd, "expand.") for x in nodes]
    alphas, betas = [], []
    for layer in range(cfg.blocks):
        pre = f"block{layer + 1}."
        p, a = spatial_attention(nodes, sd, pre + "spatial.", K, T, cfg.leaky_slope, cfg.pool_qkv)
        o, b = temporal_attention(nodes, sd, pre + "temporal.", K, T, cfg.leaky_slope, cfg.pool_qkv)
        fused = [block(np.concatenate([p[i], o[i]]), sd, pre + "fusion.") for i in range(len(nodes))]
        nodes = [nodes[i] + fused[i] for i in range(len(nodes))]
        alphas.append(a)
        betas.append(b)
    if cfg.pool_input:
        nodes = [upsample(x) for x in nodes]
    out = np.stack([block(x, sd, "reduce.")[0] for x in nodes])
    return out, alphas, betas
