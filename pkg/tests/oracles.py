"""Independent reference implementations: plain loops and math, no package code."""

import math


def cofactor_det(m):
    """Determinant by Laplace expansion along the first row."""
    n = len(m)
    if n == 1:
        return float(m[0][0])
    if n == 2:
        return float(m[0][0] * m[1][1] - m[0][1] * m[1][0])
    total = 0.0
    for j in range(n):
        minor = [[m[r][c] for c in range(n) if c != j] for r in range(1, n)]
        total += (-1) ** j * m[0][j] * cofactor_det(minor)
    return total


def dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def kernel(kind, x, z, sigma=1.0, offset=1.0, degree=2):
    if kind == "linear":
        return dot(x, z)
    if kind == "poly":
        return (dot(x, z) + offset) ** degree
    sq = sum((float(a) - float(b)) ** 2 for a, b in zip(x, z))
    return math.exp(-sq / (2.0 * sigma * sigma))


def kvol(vs, kind="rbf", **kw):
    k = [[kernel(kind, a, b, **kw) for b in vs] for a in vs]
    return math.sqrt(max(cofactor_det(k), 0.0))


def _nll(pos, alls, tau):
    # -log(exp(-pos/tau) / sum exp(-v/tau)), stabilized by the smallest volume
    lo = min(alls)
    denom = sum(math.exp(-(v - lo) / tau) for v in alls)
    return (pos - lo) / tau + math.log(denom)


def d2a_loop(text, support, vision, tau, kind="rbf", anchor="text", **kw):
    """Negatives swap the anchor row, the rest of the tuple stays at row i."""
    b = len(text)
    total = 0.0
    for i in range(b):
        vols = []
        for j in range(b):
            if anchor == "text":
                vols.append(kvol([text[j], support[i], vision[i]], kind, **kw))
            else:
                vols.append(kvol([text[i], support[i], vision[j]], kind, **kw))
        total += _nll(vols[i], vols, tau)
    return total / b


def a2d_loop(text, support, vision, tau, kind="rbf", anchor="text", **kw):
    """The anchor stays at row i, the other two members take row j."""
    b = len(text)
    total = 0.0
    for i in range(b):
        vols = []
        for j in range(b):
            if anchor == "text":
                vols.append(kvol([text[i], support[j], vision[j]], kind, **kw))
            else:
                vols.append(kvol([text[j], support[j], vision[i]], kind, **kw))
        total += _nll(vols[i], vols, tau)
    return total / b


def _cos(a, b):
    return dot(a, b) / math.sqrt(dot(a, a) * dot(b, b))


def infonce_loop(text, support, vision, tau, anchor="text"):
    anc, others = (text, [support, vision]) if anchor == "text" else (vision, [text, support])
    b = len(anc)
    out = 0.0
    for other in others:
        rows = cols = 0.0
        for i in range(b):
            r = [_cos(anc[i], other[j]) / tau for j in range(b)]
            c = [_cos(anc[j], other[i]) / tau for j in range(b)]
            rows += math.log(sum(math.exp(x) for x in r)) - r[i]
            cols += math.log(sum(math.exp(x) for x in c)) - c[i]
        out += 0.5 * (rows + cols) / b
    return out / len(others)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def gate_loop(text, tokens, W1, W2):
    """beta = sigmoid(W2 sigmoid(W1 [text; mean(tokens)])), tokens scaled channelwise."""
    t, d = len(tokens), len(text)
    avg = [sum(tokens[r][c] for r in range(t)) / t for c in range(d)]
    inp = list(text) + avg
    hidden = [sigmoid(sum(W1[h][c] * inp[c] for c in range(2 * d))) for h in range(len(W1))]
    beta = [sigmoid(sum(W2[c][h] * hidden[h] for h in range(len(hidden)))) for c in range(d)]
    return beta, [[tokens[r][c] * beta[c] for c in range(d)] for r in range(t)]


def attention_loop(tokens, Wq, Wk, Wv, Wo):
    """Multi-head attention; Wq/Wk/Wv are (H, D, d), heads concatenated then times Wo (D, D)."""
    heads, dim, d = len(Wq), len(Wq[0]), len(Wq[0][0])
    n = len(tokens)

    def proj(W, x):
        return [sum(x[c] * W[c][e] for c in range(dim)) for e in range(d)]

    merged = [[0.0] * (heads * d) for _ in range(n)]
    rows = []
    for h in range(heads):
        q = [proj(Wq[h], x) for x in tokens]
        k = [proj(Wk[h], x) for x in tokens]
        v = [proj(Wv[h], x) for x in tokens]
        for i in range(n):
            s = [dot(q[i], k[j]) / math.sqrt(d) for j in range(n)]
            top = max(s)
            w = [math.exp(x - top) for x in s]
            z = sum(w)
            a = [x / z for x in w]
            rows.append(a)
            for e in range(d):
                merged[i][h * d + e] = sum(a[j] * v[j][e] for j in range(n))
    out = [[sum(merged[i][c] * Wo[c][e] for c in range(dim)) for e in range(dim)] for i in range(n)]
    return out, rows
