"""Slow, obviously-correct reference implementations used by the tests.

Everything here works one scalar or one vector at a time with Python loops so
it shares no vectorisation tricks with the library code.
"""

import math

import numpy as np


def softmax_row(values, allowed):
    m = max(v for v, a in zip(values, allowed) if a)
    exps = [math.exp(v - m) if a else 0.0 for v, a in zip(values, allowed)]
    total = sum(exps)
    return [e / total for e in exps]


def light_vector(t, T, M1=4, M2=2):
    out = []
    for period in (T, M1, M2):
        out += [math.cos(2 * math.pi * t / period), math.sin(2 * math.pi * t / period)]
    return np.array(out)


def sinusoid_vector(t, d, T):
    out = np.zeros(d)
    for i in range(d // 2):
        out[2 * i] = math.sin(t / T ** (2 * i / d))
        out[2 * i + 1] = math.cos(t / T ** (2 * i / d))
    return out


def head_attention(variant, x, head, *, p=None, rel=None, mask=None):
    """One head, pair by pair.

    ``x`` is ``[d_model, L]``; ``head`` carries 2-D ``q, k, v`` and the variant's
    position parameters; ``p`` is an absolute position matrix, ``rel`` a
    function ``delta -> p_delta``.
    """
    d_model, L = x.shape
    Q, K, V = head.q.data, head.k.data, head.v.data
    dk = Q.shape[0]
    xs = x + p if variant == "absolute" else x
    out = np.zeros((V.shape[0], L))
    for i in range(L):
        logits, allowed = [], []
        for j in range(L):
            ok = True if mask is None else bool(mask[i][j])
            allowed.append(ok)
            qi = Q @ xs[:, i]
            kj = K @ xs[:, j]
            s = float(np.dot(kj, qi)) / math.sqrt(dk)
            if variant == "relative_dai":
                kp = head.k_pos.data @ rel(i - j)
                s += (float(np.dot(kp, head.u.data)) + float(np.dot(kp, head.v_pos.data))) / math.sqrt(dk)
            elif variant == "concat_abs":
                s += float(np.dot(head.k_pos.data @ p[:, j], head.q_pos.data @ p[:, i])) / math.sqrt(6)
            elif variant == "light":
                s += float(np.dot(head.k_pos.data @ rel(i - j), head.u.data)) / math.sqrt(6)
            logits.append(s)
        weights = softmax_row(logits, allowed)
        for j in range(L):
            out[:, i] += weights[j] * (V @ xs[:, j])
    return out


def multi_head_attention(variant, x, weights, n_heads, **kw):
    heads = [head_attention(variant, x, weights.head(n), **kw) for n in range(n_heads)]
    return weights.out.data @ np.concatenate(heads, axis=0)


def conv2d(x, kernel, stride, bias=None):
    """Cross-correlation with 'same' padding, ``before = (k - 1) // 2`` on each axis."""
    C_in, Fd, L = x.shape
    C_out, _, kf, kt = kernel.shape
    sf, st = stride
    Fo, Lo = -(-Fd // sf), -(-L // st)
    pf, pt = (kf - 1) // 2, (kt - 1) // 2
    out = np.zeros((C_out, Fo, Lo))
    for co in range(C_out):
        for fo in range(Fo):
            for to in range(Lo):
                acc = 0.0 if bias is None else float(bias[co])
                for ci in range(C_in):
                    for a in range(kf):
                        for b in range(kt):
                            f = fo * sf + a - pf
                            t = to * st + b - pt
                            if 0 <= f < Fd and 0 <= t < L:
                                acc += kernel[co, ci, a, b] * x[ci, f, t]
                out[co, fo, to] = acc
    return out


def layer_norm_column(col, gamma, beta, eps):
    n = len(col)
    mean = sum(col) / n
    var = sum((c - mean) ** 2 for c in col) / n
    return [(c - mean) / math.sqrt(var + eps) * g + b for c, g, b in zip(col, gamma, beta)]


def finite_difference(f, x, eps=1e-5):
    """Central differences of scalar ``f(x)`` for a numpy array ``x`` (copied)."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def adam_trace(x0, grad_fn, lr, steps, b1=0.9, b2=0.98, eps=1e-9):
    """Scalar Adam written out step by step."""
    x, m, v = x0, 0.0, 0.0
    xs = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        xs.append(x)
    return xs


def pairwise_distinct(columns, tol=1e-9):
    n = len(columns)
    for a in range(n):
        for b in range(a + 1, n):
            if math.sqrt(sum((columns[a][k] - columns[b][k]) ** 2 for k in range(len(columns[a])))) <= tol:
                return False
    return True
