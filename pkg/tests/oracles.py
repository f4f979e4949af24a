"""Scalar-loop reference implementations used as test oracles."""

import math

import numpy as np


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def loop_conv(x, k, bias, stride=1):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = bias[o]
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            acc += x[c, i * stride + a, j * stride + b] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


def loop_maxpool(x, win):
    c, h, w = x.shape
    out = np.empty((c, h // win, w // win))
    for ch in range(c):
        for i in range(h // win):
            for j in range(w // win):
                best = -math.inf
                for a in range(win):
                    for b in range(win):
                        best = max(best, x[ch, i * win + a, j * win + b])
                out[ch, i, j] = best
    return out


def loop_attention(H, V, w):
    """a_p = exp(w^T tanh(V h_p^T)) / sum_j exp(w^T tanh(V h_j^T)), one scalar at a time."""
    m, L = H.shape
    D = V.shape[0]
    scores = []
    for p in range(m):
        s = 0.0
        for d in range(D):
            acc = 0.0
            for l in range(L):
                acc += V[d, l] * H[p, l]
            s += w[d] * math.tanh(acc)
        scores.append(s)
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    return np.array([e / total for e in exps])


def loop_aggregate(H, a):
    m, L = H.shape
    z = [0.0] * L
    for p in range(m):
        for l in range(L):
            z[l] += a[p] * H[p, l]
    return np.array(z)


def loop_pool_max(H):
    m, L = H.shape
    return np.array([max(H[p, l] for p in range(m)) for l in range(L)])


def loop_pool_mean(H):
    m, L = H.shape
    return np.array([sum(H[p, l] for p in range(m)) / m for l in range(L)])


def loop_relu(x):
    return np.vectorize(lambda v: v if v > 0 else 0.0)(x)


def loop_features(patch, P):
    """Feature extractor of one 3×s×s patch from the loop primitives."""
    x = loop_maxpool(loop_relu(loop_conv(patch, P["K1"], P["b1"])), 2)
    x = loop_maxpool(loop_relu(loop_conv(x, P["K2"], P["b2"])), 2).reshape(-1)
    W = P["W"]
    out = []
    for i in range(W.shape[0]):
        acc = P["bf"][i]
        for j in range(W.shape[1]):
            acc += W[i, j] * x[j]
        out.append(acc if acc > 0 else 0.0)
    return np.array(out)


def loop_bag_probability(patches, P, mode="attention"):
    H = np.stack([loop_features(p, P) for p in patches])
    if mode == "attention":
        z = loop_aggregate(H, loop_attention(H, P["V"], P["w"][:, 0]))
    elif mode == "max":
        z = loop_pool_max(H)
    else:
        z = loop_pool_mean(H)
    logit = P["hb"][0]
    for l in range(len(z)):
        logit += P["hw"][0, l] * z[l]
    return 1.0 / (1.0 + math.exp(-logit))
