"""Independent brute-force reimplementations used as test oracles.

Everything here is deliberately written in plain numpy / plain Python with
no imports from the package's computation paths, so that agreement between
an oracle and the library is meaningful.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# bilinear sampling and patch extraction


def bilinear_reference(grid: np.ndarray, x: float, y: float) -> np.ndarray:
    """Textbook bilinear blend at one normalized point, border-replicated."""
    H, W, _ = grid.shape
    u = min(max(x * W - 0.5, 0.0), W - 1.0)
    v = min(max(y * H - 0.5, 0.0), H - 1.0)
    c0 = min(int(np.floor(u)), W - 2) if W > 1 else 0
    r0 = min(int(np.floor(v)), H - 2) if H > 1 else 0
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c0 + 1, W - 1), min(r0 + 1, H - 1)
    fu, fv = u - c0, v - r0
    return ((1 - fv) * ((1 - fu) * grid[r0, c0] + fu * grid[r0, c1])
            + fv * ((1 - fu) * grid[r1, c0] + fu * grid[r1, c1]))


def patch_embedding_reference(grid: np.ndarray, ax, ay, bx, by, m: int,
                              w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sample an m x m lattice in the box, flatten row-major, apply W/b."""
    feats = []
    for i in range(m):
        for j in range(m):
            x = ax + (j + 0.5) * (bx - ax) / m
            y = ay + (i + 0.5) * (by - ay) / m
            feats.append(bilinear_reference(grid, x, y))
    return np.concatenate(feats) @ w + b


# ---------------------------------------------------------------------------
# pairwise similarities and the contrastive objective


def pair_similarities_reference(zi: np.ndarray, zt: np.ndarray,
                                pad: np.ndarray) -> tuple[float, float]:
    """(image-to-text, text-to-image) similarity of one pair.

    zi: [N, d] patch embeddings, zt: [K, d] token embeddings, pad: [K] bools.
    Embeddings are unit-normalized here, independently of the library.
    """
    def norm(v):
        n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        return v / np.maximum(n, 1e-12)

    zi = norm(np.asarray(zi, dtype=np.float64))
    zt = norm(np.asarray(zt, dtype=np.float64))
    keep = ~np.asarray(pad, dtype=bool)
    if not keep.any():
        raise ValueError("all tokens padded")
    zt_k = zt[keep]
    sims = zi @ zt_k.T  # [N, K']
    s_i2t = sims.max(axis=1).mean()
    s_t2i = sims.max(axis=0).mean()
    return float(s_i2t), float(s_t2i)


def batch_similarity_reference(zis: list[np.ndarray], zts: list[np.ndarray],
                               pads: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    b = len(zis)
    s_i = np.zeros((b, b))
    s_t = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            s_i[i, j], s_t[i, j] = pair_similarities_reference(zis[i], zts[j], pads[j])
    return s_i, s_t


def contrastive_loss_reference(s_i: np.ndarray, s_t: np.ndarray, tau: float,
                               paper_norm: bool = True) -> float:
    """Direct evaluation of the printed loss, raw exp ratio form."""
    b = s_i.shape[0]
    scale = 1.0 / b if paper_norm else 1.0 / b
    total = 0.0
    for i in range(b):
        li = -scale * np.log(np.exp(s_i[i, i] / tau) / np.exp(s_i[i, :] / tau).sum())
        lt = -scale * np.log(np.exp(s_t[i, i] / tau) / np.exp(s_t[:, i] / tau).sum())
        total += 0.5 * (li + lt)
    return float(total)


# ---------------------------------------------------------------------------
# ranking / selection oracles


def retrieval_recall_reference(scores: np.ndarray, ks: tuple[int, ...]) -> dict[int, float]:
    """scores[q, c]: query-candidate matrix; truth is the diagonal.

    Stable descending sort with ties broken by lower candidate id.
    """
    n = scores.shape[0]
    out = {k: 0.0 for k in ks}
    for q in range(n):
        order = sorted(range(n), key=lambda c: (-scores[q, c], c))
        rank = order.index(q)
        for k in ks:
            if rank < k:
                out[k] += 1.0
    return {k: 100.0 * v / n for k, v in out.items()}


def topk_union_reference(sim: np.ndarray, per_col_k: int, final_n: int,
                         owner: list[int] | None = None) -> list[tuple[int, float]]:
    """Per column of sim [M, N]: take the per_col_k best rows (score desc,
    row index asc); union rows (mapped through `owner` when given) keeping
    the max score; return the final_n best (score desc, id asc)."""
    M, N = sim.shape
    best: dict[int, float] = {}
    for n in range(N):
        col = sorted(range(M), key=lambda m: (-sim[m, n], m))[:per_col_k]
        for m in col:
            key = owner[m] if owner is not None else m
            score = sim[m, n]
            if key not in best or score > best[key]:
                best[key] = score
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:final_n]


# ---------------------------------------------------------------------------
# plain-numpy encoder forward (no autodiff), step-by-step


def layer_norm_reference(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def softmax_reference(x):
    m = x.max(axis=-1, keepdims=True)
    z = np.exp(x - m)
    return z / z.sum(axis=-1, keepdims=True)


def block_reference(x, p, name, num_heads, pad=None):
    """Pre-norm transformer block on [n, d], mirroring the published layout."""
    n, d = x.shape
    dh = d // num_heads
    h = layer_norm_reference(x, p[f"{name}.ln1.g"], p[f"{name}.ln1.b"])
    q = (h @ p[f"{name}.q.W"] + p[f"{name}.q.b"]).reshape(n, num_heads, dh)
    k = (h @ p[f"{name}.k.W"] + p[f"{name}.k.b"]).reshape(n, num_heads, dh)
    v = (h @ p[f"{name}.v.W"] + p[f"{name}.v.b"]).reshape(n, num_heads, dh)
    outs = []
    for hd in range(num_heads):
        scores = q[:, hd] @ k[:, hd].T / np.sqrt(dh)
        if pad is not None:
            scores = scores + np.where(pad, -1e9, 0.0)[None, :]
        outs.append(softmax_reference(scores) @ v[:, hd])
    att = np.stack(outs, axis=1).reshape(n, d)
    x = x + att @ p[f"{name}.o.W"] + p[f"{name}.o.b"]
    h2 = layer_norm_reference(x, p[f"{name}.ln2.g"], p[f"{name}.ln2.b"])
    ff = np.maximum(h2 @ p[f"{name}.ff1.W"] + p[f"{name}.ff1.b"], 0.0)
    return x + ff @ p[f"{name}.ff2.W"] + p[f"{name}.ff2.b"]


def merge_reference(grid, s):
    H, W, C = grid.shape
    t = grid.reshape(H // s, s, W // s, s, C).transpose(0, 2, 1, 3, 4)
    return t.reshape(H // s, W // s, s * s * C)


def plain_pyramid_reference(image, p, cfg):
    """Strided pyramid encoder (no adaptive patches), returning [N, d]."""
    grid = (image - cfg.input_mean) * cfg.input_gain
    tap_seq = None
    for stage in range(1, cfg.num_stages + 1):
        s = cfg.patch_sizes[stage - 1]
        name = f"img.stage{stage}"
        merged = merge_reference(grid, s) @ p[f"{name}.merge.W"] + p[f"{name}.merge.b"]
        gh, gw, d = merged.shape
        seq = merged.reshape(gh * gw, d) + p[f"{name}.pos"]
        seq = block_reference(seq, p, f"{name}.blk", cfg.num_heads)
        seq = layer_norm_reference(seq, p[f"{name}.out_ln.g"], p[f"{name}.out_ln.b"])
        if stage == cfg.tap_stage:
            tap_seq = seq
        grid = seq.reshape(gh, gw, d)
    return tap_seq @ p["img.out.W"] + p["img.out.b"]


def text_encode_reference(ids, p, cfg, pad_id=0):
    ids = np.asarray(ids)
    pad = ids == pad_id
    x = p["txt.emb"][ids] + p["txt.pos"][: len(ids)]
    x = block_reference(x, p, "txt.blk", cfg.num_heads, pad=pad)
    return x @ p["txt.out.W"] + p["txt.out.b"], pad


# ---------------------------------------------------------------------------
# text metrics


def ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu_reference(cands: list[list], refs: list[list], max_n: int = 4) -> list[float]:
    """Corpus BLEU with brevity penalty; add-one smoothing for n >= 2 only
    when that order's clipped match count is zero."""
    import math
    from collections import Counter

    precisions = []
    for n in range(1, max_n + 1):
        match, total = 0, 0
        for c, r in zip(cands, refs):
            cc, rc = Counter(ngrams(c, n)), Counter(ngrams(r, n))
            match += sum(min(v, rc[g]) for g, v in cc.items())
            total += max(len(c) - n + 1, 0)
        if total == 0:
            precisions.append(0.0)
        elif match == 0 and n >= 2:
            precisions.append((match + 1) / (total + 1))
        else:
            precisions.append(match / total)
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    bp = 1.0 if c_len >= r_len else (math.exp(1 - r_len / c_len) if c_len > 0 else 0.0)
    out = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if any(p == 0.0 for p in ps):
            out.append(0.0)
        else:
            out.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return out


def lcs_length(a: list, b: list) -> int:
    dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                dp[i][j] = dp[i - 1][j - 1] + 1
            else:
                dp[i][j] = max(dp[i - 1][j], dp[i][j - 1])
    return dp[-1][-1]


def rouge_l_reference(cand: list, ref: list) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)
