"""Independent scalar reference implementations used as test oracles."""
import math


def scalar_bilinear(grid, out_h, out_w):
    """Reference sampler, one output value at a time (half-pixel centers, edge clamp)."""
    h, w = len(grid), len(grid[0])
    out = [[0.0] * out_w for _ in range(out_h)]
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = grid[y0][x0] * (1 - fx) + grid[y0][x1] * fx
            bot = grid[y1][x0] * (1 - fx) + grid[y1][x1] * fx
            out[i][j] = top * (1 - fy) + bot * fy
    return out


def _matvec(row, w):
    return [sum(row[i] * w[i][j] for i in range(len(row))) for j in range(len(w[0]))]


def _layer_norm_row(row, g, b, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(row, g, b)]


def _gelu(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def scalar_encoder_layer(h, p, heads):
    """Pre-norm transformer block evaluated one scalar at a time.

    ``h`` is a list of token rows, ``p`` maps names (wq, ln1.g, ...) to nested lists.
    Returns (h_out, q, k, v, attn) with attn[head][i][j].
    """
    n, d = len(h), len(h[0])
    dh = d // heads
    x = [_layer_norm_row(r, p["ln1.g"], p["ln1.b"]) for r in h]
    q = [_matvec(r, p["wq"]) for r in x]
    k = [_matvec(r, p["wk"]) for r in x]
    v = [_matvec(r, p["wv"]) for r in x]
    attn = []
    mixed = [[0.0] * d for _ in range(n)]
    for a in range(heads):
        cols = range(a * dh, (a + 1) * dh)
        weights = []
        for i in range(n):
            s = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh) for j in range(n)]
            top = max(s)
            e = [math.exp(t - top) for t in s]
            z = sum(e)
            weights.append([t / z for t in e])
            for c in cols:
                mixed[i][c] = sum(weights[i][j] * v[j][c] for j in range(n))
        attn.append(weights)
    mid = [[a + b + c for a, b, c in zip(_matvec(mixed[i], p["proj.w"]), p["proj.b"], h[i])] for i in range(n)]
    out = []
    for r in mid:
        y = _layer_norm_row(r, p["ln2.g"], p["ln2.b"])
        hid = [_gelu(a + b) for a, b in zip(_matvec(y, p["fc1.w"]), p["fc1.b"])]
        out.append([a + b + c for a, b, c in zip(_matvec(hid, p["fc2.w"]), p["fc2.b"], r)])
    return out, q, k, v, attn
