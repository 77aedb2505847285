"""Independent reference implementations in plain Python (lists, math, mpmath).

Nothing here calls into the package's kernels; only weights are read from it.
"""

import math

import mpmath


def dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def matvec(m, v):
    return [dot(row, v) for row in m]


def cos_hp(a, b):
    with mpmath.workdps(50):
        a = [mpmath.mpf(float(x)) for x in a]
        b = [mpmath.mpf(float(x)) for x in b]
        ab = mpmath.fsum(x * y for x, y in zip(a, b))
        na = mpmath.sqrt(mpmath.fsum(x * x for x in a))
        nb = mpmath.sqrt(mpmath.fsum(x * x for x in b))
        return float(ab / (na * nb))


def cos_plain(a, b):
    return dot(a, b) / (math.sqrt(dot(a, a)) * math.sqrt(dot(b, b)))


def softmax_naive(xs):
    e = [math.exp(x) for x in xs]
    s = sum(e)
    return [x / s for x in e]


def attention_naive(q, keys, values, scale):
    scores = [dot(q, k) * scale for k in keys]
    m = max(scores)
    w = [math.exp(s - m) for s in scores]
    tot = sum(w)
    out = [0.0] * len(values[0])
    for wi, v in zip(w, values):
        for c in range(len(v)):
            out[c] += wi / tot * v[c]
    return out


def rope_naive(x, pos, base=10000.0):
    d = len(x)
    out = list(x)
    for i in range(d // 2):
        ang = pos * base ** (-(2 * i) / d)
        c, s = math.cos(ang), math.sin(ang)
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c
    return out


def gcm_rule(anchor_latents, anchor_steps, candidate):
    """Brute-force diversity-aware replacement.

    Returns (replace, evicted_step). Single-anchor sets use redundancy -1.
    """
    k = len(anchor_latents)
    imp = 1.0 - max(cos_hp(candidate, a) for a in anchor_latents)
    if k == 1:
        red = [-1.0]
    else:
        red = []
        for i in range(k):
            best = -math.inf
            for j in range(k):
                if j != i:
                    best = max(best, cos_hp(anchor_latents[i], anchor_latents[j]))
            red.append(best)
    top = max(red)
    target = min((anchor_steps[i] for i in range(k) if red[i] == top))
    if imp > top:
        return True, target
    return False, None


def full_attention_stream(block, condition, horizon):
    """Frames of a no-eviction stream recomputed from scratch at every step, absolute positions."""
    wq, wk, wv, wo, wc = ([list(map(float, r)) for r in m] for m in
                          (block.w_q, block.w_k, block.w_v, block.w_o, block.w_c))
    c = list(map(float, condition.data))
    cshift = matvec(wc, c)
    base = matvec(wo, cshift)
    frames = [[[b + o for b, o in zip(base, off)] for off in block.offsets.tolist()]]
    scale = 1.0 / math.sqrt(block.dim)
    for t in range(1, horizon):
        keys, values = [], []
        for s in range(t):
            for tok in frames[s]:
                sh = [a + b for a, b in zip(tok, cshift)]
                keys.append(rope_naive(matvec(wk, sh), s))
                values.append(matvec(wv, sh))
        new = []
        for tok in frames[t - 1]:
            sh = [a + b for a, b in zip(tok, cshift)]
            q = rope_naive(matvec(wq, sh), t - 1)
            attn = attention_naive(q, keys, values, scale)
            o = matvec(wo, attn)
            new.append([math.tanh(a + b) for a, b in zip(tok, o)])
        frames.append(new)
    return frames


def splitmix64_scalar(seed, n):
    mask = (1 << 64) - 1
    state = seed & mask
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out
