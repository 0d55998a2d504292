"""Pure-numpy pooling kernels; same signatures and bit-identical results as
the compiled ``_ckernels`` module."""
import numpy as np


def _offset_view(x, di, dj, sh, sw, Ho, Wo):
    return x[:, di:di + (Ho - 1) * sh + 1:sh, dj:dj + (Wo - 1) * sw + 1:sw]


def l2_pool_fwd(x, fh, fw, sh, sw, normalized):
    B, H, W = x.shape
    Ho, Wo = (H - fh) // sh + 1, (W - fw) // sw + 1
    acc = np.zeros((B, Ho, Wo))
    for di in range(fh):
        for dj in range(fw):
            v = _offset_view(x, di, dj, sh, sw, Ho, Wo)
            acc = acc + v * v
    if normalized:
        return np.sqrt(acc / float(fh * fw))
    return np.sqrt(acc)


def l2_pool_bwd(x, g, fh, fw, sh, sw, normalized, literal, eps):
    B, H, W = x.shape
    Ho, Wo = g.shape[1], g.shape[2]
    n = float(fh * fw)
    acc = np.zeros((B, Ho, Wo))
    for di in range(fh):
        for dj in range(fw):
            v = _offset_view(x, di, dj, sh, sw, Ho, Wo)
            acc = acc + v * v
    if literal:
        c = (n * g) / (2.0 * np.maximum(np.sqrt(acc), eps))
    elif normalized:
        c = g / (n * np.maximum(np.sqrt(acc / n), eps))
    else:
        c = g / np.maximum(np.sqrt(acc), eps)
    gx = np.zeros((B, H, W))
    for di in range(fh):
        for dj in range(fw):
            target = _offset_view(gx, di, dj, sh, sw, Ho, Wo)
            if literal:
                target += c
            else:
                target += c * _offset_view(x, di, dj, sh, sw, Ho, Wo)
    return gx


def max_pool_fwd(x, fh, fw, sh, sw):
    B, H, W = x.shape
    Ho, Wo = (H - fh) // sh + 1, (W - fw) // sw + 1
    rows = (np.arange(Ho) * sh)[:, None]
    cols = (np.arange(Wo) * sw)[None, :]
    best = _offset_view(x, 0, 0, sh, sw, Ho, Wo).copy()
    idx = np.broadcast_to(rows * W + cols, (B, Ho, Wo)).astype(np.int64)
    for di in range(fh):
        for dj in range(fw):
            v = _offset_view(x, di, dj, sh, sw, Ho, Wo)
            upd = v > best
            best = np.where(upd, v, best)
            idx = np.where(upd, (rows + di) * W + cols + dj, idx)
    return best, idx


def max_pool_bwd(idx, g, H, W):
    B = g.shape[0]
    gx = np.zeros((B, H * W))
    for b in range(B):
        np.add.at(gx[b], idx[b].reshape(-1), g[b].reshape(-1))
    return gx.reshape(B, H, W)


def rect_pool_fwd(x, rects, is_max):
    C, H, W = x.shape
    M = rects.shape[0]
    out = np.empty((M, C))
    idx = np.zeros((M, C), dtype=np.int64)
    for m in range(M):
        y0, y1, x0, x1 = (int(r) for r in rects[m])
        block = x[:, y0:y1, x0:x1].reshape(C, -1)
        if is_max:
            k = np.argmax(block, axis=1)
            out[m] = block[np.arange(C), k]
            bw = x1 - x0
            idx[m] = (y0 + k // bw) * W + x0 + k % bw
        else:
            acc = np.zeros(C)
            sq = block * block
            for k in range(sq.shape[1]):
                acc = acc + sq[:, k]
            out[m] = np.sqrt(acc)
    return out, idx


def rect_pool_bwd(x, rects, out, idx, g, is_max, eps):
    C, H, W = x.shape
    gx = np.zeros((C, H, W))
    flat = gx.reshape(C, -1)
    chans = np.arange(C)
    for m in range(rects.shape[0]):
        if is_max:
            # distinct channels: no duplicate indices within one rect
            flat[chans, idx[m]] += g[m]
        else:
            y0, y1, x0, x1 = (int(r) for r in rects[m])
            cf = g[m] / np.maximum(out[m], eps)
            gx[:, y0:y1, x0:x1] += cf[:, None, None] * x[:, y0:y1, x0:x1]
    return gx
