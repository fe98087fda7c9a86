"""Plain numpy reference forward passes, written without the autodiff tape."""
import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(x):
    z = np.exp(x - x.max())
    return z / z.sum()


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def encode(ids, E, F):
    return sum(F[t] * E[i] for t, i in enumerate(ids) if i != 0)


def fold(encodings, K, G, V, W):
    h = unit(K)
    for e in encodings:
        gate = sigmoid(h @ e + K @ e)
        cand = np.maximum(0.0, h @ G.T + K @ V.T + W @ e)
        h = unit(h + gate[:, None] * cand)
    return h


def read(q, h):
    p = softmax(h @ q)
    return p, p @ h


def head(q, z, H, L):
    return softmax(L @ np.maximum(0.0, q + H @ z))


def history(block, b):
    return [block.ids[b, t] for t in range(block.ids.shape[1]) if block.mask[b, t]]


def entnet_proba(P, batch):
    out = []
    for b in range(len(batch.labels)):
        es = [encode(ids, P["E"], P["F"]) for ids in history(batch.history["all"], b)]
        h = fold(es, P["K"], P["G"], P["V"], P["W"])
        q = encode(batch.query_ids[b], P["E"], P["F"])
        out.append(head(q, read(q, h)[1], P["H"], P["L"]))
    return np.array(out)


def sentnet_proba(P, batch, sources):
    out = []
    for b in range(len(batch.labels)):
        q = encode(batch.query_ids[b], P["E"], P["F"])
        zs = []
        for s in sources:
            sfx = "." + s.name.lower()
            es = [encode(ids, P["E"], P["F"]) for ids in history(batch.history[s], b)]
            h = fold(es, *(P[n + sfx] for n in "KGVW"))
            zs.append(read(q, h)[1])
        out.append(head(q, np.concatenate(zs), P["H"], P["L"]))
    return np.array(out)
