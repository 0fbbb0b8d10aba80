"""Independent reference computations used only by the tests.

Straight-line Python loops with no numpy vectorisation, so they share no
code path with the package.
"""

import math


def softmax_row(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def dense_loop(a, W, b):
    n_in, n_out = len(W), len(W[0])
    return [sum(a[i] * W[i][j] for i in range(n_in)) + b[j] for j in range(n_out)]


def conv_loop(a, W, b):
    """``a``: [channel][time]; ``W``: [filter][channel][tap]. Valid padding, stride 1."""
    n_f, n_c, k = len(W), len(W[0]), len(W[0][0])
    t_out = len(a[0]) - k + 1
    return [
        [
            sum(a[c][t + j] * W[f][c][j] for c in range(n_c) for j in range(k)) + b[f]
            for t in range(t_out)
        ]
        for f in range(n_f)
    ]


def forward_loop(spec, params, x):
    """Scalar forward pass of one sample through a spec from nn_core."""
    a = list(x)
    seq = None
    for layer, p in zip(spec.layers, params):
        W, b = p["W"].tolist(), p["b"].tolist()
        if layer.kind == "conv1d":
            if seq is None:
                length = len(a) // spec.channels
                seq = [a[c * length : (c + 1) * length] for c in range(spec.channels)]
            z = conv_loop(seq, W, b)
            seq = [[max(v, 0.0) for v in row] for row in z] if layer.activation == "relu" else z
            a = [v for row in seq for v in row]
            continue
        seq = None
        z = dense_loop(a, W, b)
        if layer.activation == "relu":
            a = [max(v, 0.0) for v in z]
        elif layer.activation == "softmax":
            a = softmax_row(z)
        else:
            a = z
    return a


def crossentropy_loop(scores, targets, eps=1e-12):
    total = 0.0
    for s_row, t_row in zip(scores, targets):
        total += -sum(t * math.log(max(s, eps)) for s, t in zip(s_row, t_row))
    return total / len(scores)


def central_difference(f, params, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``params``
    (list of {"W", "b"} arrays, perturbed in place and restored)."""
    grads = []
    for p in params:
        g = {}
        for key, arr in p.items():
            out = arr.copy()
            flat = arr.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = f()
                flat[idx] = orig - h
                down = f()
                flat[idx] = orig
                out.reshape(-1)[idx] = (up - down) / (2 * h)
            g[key] = out
        grads.append(g)
    return grads


def brute_force_global(submissions, beta, n_rows, n_labels):
    """Label-wise beta-weighted average by explicit triple loop.

    ``submissions``: {user: (labels, scores as nested lists)};
    ``beta``: {(user, label): weight}.
    """
    table = [[0.0] * n_labels for _ in range(n_rows)]
    for label in range(n_labels):
        for row in range(n_rows):
            num = 0.0
            den = 0.0
            for user in sorted(submissions):
                labels, scores = submissions[user]
                if label not in labels:
                    continue
                w = beta[(user, label)]
                num += w * scores[row][labels.index(label)]
                den += w
            table[row][label] = num / den
    return table
