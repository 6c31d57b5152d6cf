"""Attention blocks: the shared multi-head primitive, intra-group self-attention
over fixed-size subgroups with a look-ahead key window, cross-attention from
tokens to the center bank, overlapping-tile local attention, and the token
aggregation block that ties them together.

All forward functions take and return autograd Nodes (arrays are wrapped
on the fly), so the same code path serves inference and training.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ops
from .token_agg import (
    TokenCenters,
    TokenGrouping,
    StateError,
    assign_groups,
    build_grouping,
    cosine_similarity_matrix,
    ema_update,
    initial_centers,
    refine_centers,
)


@dataclass
class AttentionWeights:
    """q/k/v/output projection matrices (dim x dim) plus the head count."""

    w_q: ag.Node
    w_k: ag.Node
    w_v: ag.Node
    w_out: ag.Node
    heads: int

    def __post_init__(self):
        d = ag.as_node(self.w_q).value.shape[-1]
        if d % self.heads != 0:
            raise ops.DimensionError(f"dim {d} not divisible by heads {self.heads}")


@dataclass
class FfnWeights:
    """ConvFFN: norm -> 1x1 expand -> depthwise 3x3 -> GELU -> 1x1 project."""

    norm_gamma: ag.Node
    norm_beta: ag.Node
    expand_w: ag.Node
    expand_b: ag.Node
    dw_w: ag.Node
    dw_b: ag.Node
    proj_w: ag.Node
    proj_b: ag.Node


@dataclass
class TabWeights:
    norm_gamma: ag.Node
    norm_beta: ag.Node
    iasa: AttentionWeights
    irca: AttentionWeights
    fuse_w: ag.Node
    fuse_b: ag.Node
    ffn: FfnWeights


@dataclass
class LrsaWeights:
    norm_gamma: ag.Node
    norm_beta: ag.Node
    attn: AttentionWeights
    ffn: FfnWeights


def map_to_tokens(x) -> ag.Node:
    """(d,h,w) feature map -> (h*w, d) token rows (canonical C layout)."""
    x = ag.as_node(x)
    d, h, w = x.value.shape
    return ag.contiguous(ag.reshape(ag.transpose(x, (1, 2, 0)), (h * w, d)))


def tokens_to_map(t, h: int, w: int) -> ag.Node:
    """(h*w, d) token rows -> (d,h,w) feature map (canonical C layout)."""
    t = ag.as_node(t)
    d = t.value.shape[-1]
    return ag.contiguous(ag.transpose(ag.reshape(t, (h, w, d)), (2, 0, 1)))


def _split_heads(x: ag.Node, heads: int) -> ag.Node:
    """(.., L, d) -> (.., heads, L, d/heads)."""
    *batch, length, d = x.value.shape
    nb = len(batch)
    x = ag.reshape(x, (*batch, length, heads, d // heads))
    axes = tuple(range(nb)) + (nb + 1, nb, nb + 2)
    return ag.transpose(x, axes)


def _merge_heads(x: ag.Node) -> ag.Node:
    """(.., heads, L, hd) -> (.., L, heads*hd)."""
    *batch, heads, length, hd = x.value.shape
    nb = len(batch)
    axes = tuple(range(nb)) + (nb + 1, nb, nb + 2)
    return ag.reshape(ag.transpose(x, axes), (*batch, length, heads * hd))


def multi_head_attention(q, k, v, heads: int, mask=None, w_out=None) -> ag.Node:
    """softmax(QK^T / sqrt(head_dim)) V per head, heads concatenated.

    q: (.., L_q, d); k, v: (.., L_k, d) with broadcastable batch dims.
    mask: optional bool (.., L_q, L_k); False positions get -inf logits.
    w_out: optional (d, d) output projection.
    """
    q, k, v = ag.as_node(q), ag.as_node(k), ag.as_node(v)
    d = q.value.shape[-1]
    if d % heads != 0:
        raise ops.DimensionError(f"dim {d} not divisible by heads {heads}")
    if k.value.shape[-1] != d or v.value.shape[-1] != d:
        raise ops.DimensionError("q/k/v feature dims differ")
    if k.value.shape[-2] != v.value.shape[-2]:
        raise ops.DimensionError("k and v lengths differ")
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    kt_axes = tuple(range(kh.value.ndim - 2)) + (kh.value.ndim - 1, kh.value.ndim - 2)
    scores = ag.scale(ag.matmul(qh, ag.transpose(kh, kt_axes)), 1.0 / math.sqrt(d // heads))
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        scores = ag.masked_fill(scores, keep[..., None, :, :] if keep.ndim == q.value.ndim else keep)
    attn = ag.softmax(scores, axis=-1)
    out = _merge_heads(ag.matmul(attn, vh))
    if w_out is not None:
        out = ag.matmul(out, w_out)
    return out


def iasa(x, g: TokenGrouping, w: AttentionWeights) -> ag.Node:
    """Self-attention within subgroups, keys/values extended to the next subgroup.

    The last subgroup wraps around to the first; pad key slots are masked.
    Output rows are pushed back to original token order.
    """
    x = ag.as_node(x)
    n, d = x.value.shape
    q = ag.matmul(x, w.w_q)
    k = ag.matmul(x, w.w_k)
    v = ag.matmul(x, w.w_v)
    n_sub, gs = g.n_subgroups, g.subgroup_size
    qg = ag.reshape(ag.take(q, g.perm, axis=0), (n_sub, gs, d))
    kg = ag.reshape(ag.take(k, g.perm, axis=0), (n_sub, gs, d))
    vg = ag.reshape(ag.take(v, g.perm, axis=0), (n_sub, gs, d))
    nxt = (np.arange(n_sub, dtype=np.int64) + 1) % n_sub
    kk = ag.concat([kg, ag.take(kg, nxt, axis=0)], axis=1)
    vv = ag.concat([vg, ag.take(vg, nxt, axis=0)], axis=1)
    if g.pad_mask.any():
        real = ~g.pad_mask.reshape(n_sub, gs)
        keep = np.concatenate([real, real[nxt]], axis=1)[:, None, :]  # (n_sub, 1, 2*gs)
    else:
        keep = None
    out = multi_head_attention(qg, kk, vv, w.heads, mask=keep, w_out=w.w_out)
    flat = ag.reshape(out, (n_sub * gs, d))
    return ag.take(flat, g.inv_perm, axis=0)


def iasa_looped(x, g: TokenGrouping, w: AttentionWeights) -> np.ndarray:
    """Same attention as iasa(), scheduled as a sequential per-window loop.

    This is the schedule you are stuck with when groups stay variable-length
    instead of being sliced into one rectangular batch; kept as the benchmark
    baseline and as an independent route for cross-checking iasa().
    """
    x = ops.as_tensor(x)
    wq, wk, wv, wo = (ag.as_node(t).value for t in (w.w_q, w.w_k, w.w_v, w.w_out))
    n, d = x.shape
    heads = w.heads
    hd = d // heads
    scale = np.float32(1.0 / math.sqrt(hd))
    q = x @ wq
    k = x @ wk
    v = x @ wv
    n_sub, gs = g.n_subgroups, g.subgroup_size
    real = ~g.pad_mask
    out_flat = np.empty((n_sub * gs, d), dtype=np.float32)
    for j in range(n_sub):
        rows = g.perm[j * gs : (j + 1) * gs]
        jn = (j + 1) % n_sub
        nrows = g.perm[jn * gs : (jn + 1) * gs]
        kk = np.concatenate([k[rows], k[nrows]])
        vv = np.concatenate([v[rows], v[nrows]])
        keep = np.concatenate([real[j * gs : (j + 1) * gs], real[jn * gs : (jn + 1) * gs]])
        qj = q[rows]
        for hh in range(heads):
            sl = slice(hh * hd, (hh + 1) * hd)
            logits = (qj[:, sl] @ kk[:, sl].T) * scale
            logits = np.where(keep[None, :], logits, np.float32(-np.inf))
            weights = ops.softmax(logits, axis=-1)
            out_flat[j * gs : (j + 1) * gs, sl] = weights @ vv[:, sl]
    return out_flat[g.inv_perm] @ wo


def irca(x, g: TokenGrouping, centers, w: AttentionWeights) -> ag.Node:
    """Cross-attention: subgroup tokens query the center bank (keys/values).

    Centers enter as constants, so no gradient reaches them; they are only
    ever moved by the EMA update.
    """
    if isinstance(centers, TokenCenters):
        if not centers.initialized:
            raise StateError("token centers are not initialized")
        centers = centers.centers
    x = ag.as_node(x)
    n, d = x.value.shape
    c = centers if isinstance(centers, ag.Node) else ag.barrier(centers)
    q = ag.matmul(x, w.w_q)
    k = ag.reshape(ag.matmul(c, w.w_k), (1, -1, d))
    v = ag.reshape(ag.matmul(c, w.w_v), (1, -1, d))
    n_sub, gs = g.n_subgroups, g.subgroup_size
    qg = ag.reshape(ag.take(q, g.perm, axis=0), (n_sub, gs, d))
    out = multi_head_attention(qg, k, v, w.heads, w_out=w.w_out)
    flat = ag.reshape(out, (n_sub * gs, d))
    return ag.take(flat, g.inv_perm, axis=0)


def lrsa_tiles(h: int, w: int, patch: int, overlap: int):
    """Yield (query rows, query cols, window rows, window cols) spans per tile."""
    for r0 in range(0, h, patch):
        r1 = min(r0 + patch, h)
        for c0 in range(0, w, patch):
            c1 = min(c0 + patch, w)
            yield (
                (r0, r1),
                (c0, c1),
                (max(0, r0 - overlap), min(h, r1 + overlap)),
                (max(0, c0 - overlap), min(w, c1 + overlap)),
            )


def lrsa(x, w: AttentionWeights, patch: int, overlap: int) -> ag.Node:
    """Local attention on (d,h,w): queries from disjoint patch tiles, keys and
    values from the tile expanded by `overlap` pixels (clamped at borders)."""
    if patch <= 0:
        raise ValueError(f"lrsa patch must be positive, got {patch}")
    if overlap < 0 or overlap >= patch:
        raise ValueError(f"lrsa needs patch > overlap >= 0, got {patch}, {overlap}")
    x = ag.as_node(x)
    d, h, ww = x.value.shape
    tokens = map_to_tokens(x)
    q = ag.matmul(tokens, w.w_q)
    k = ag.matmul(tokens, w.w_k)
    v = ag.matmul(tokens, w.w_v)
    flat = np.arange(h * ww, dtype=np.int64).reshape(h, ww)
    outs = []
    q_order = []
    for (r0, r1), (c0, c1), (wr0, wr1), (wc0, wc1) in lrsa_tiles(h, ww, patch, overlap):
        q_idx = flat[r0:r1, c0:c1].reshape(-1)
        kv_idx = flat[wr0:wr1, wc0:wc1].reshape(-1)
        out = multi_head_attention(
            ag.take(q, q_idx, axis=0),
            ag.take(k, kv_idx, axis=0),
            ag.take(v, kv_idx, axis=0),
            w.heads,
        )
        outs.append(out)
        q_order.append(q_idx)
    stacked = ag.concat(outs, axis=0)
    inv = np.argsort(np.concatenate(q_order), kind="stable")
    reassembled = ag.matmul(ag.take(stacked, inv, axis=0), w.w_out)
    return tokens_to_map(reassembled, h, ww)


def conv_ffn(x, w: FfnWeights) -> ag.Node:
    """Channel-mixing FFN on a (d,h,w) map with a residual shortcut."""
    x = ag.as_node(x)
    d, h, ww = x.value.shape
    t = map_to_tokens(x)
    t = ag.layer_norm(t, w.norm_gamma, w.norm_beta)
    e = ag.add(ag.matmul(t, w.expand_w), w.expand_b)
    emap = tokens_to_map(e, h, ww)
    a = ag.gelu(ag.depthwise_conv2d(emap, w.dw_w, w.dw_b))
    back = ag.add(ag.matmul(map_to_tokens(a), w.proj_w), w.proj_b)
    return ag.add(x, tokens_to_map(back, h, ww))


def resolve_centers(bank: TokenCenters, ln_map_value: np.ndarray) -> np.ndarray:
    """Stored centers, or a deterministic regular-region init from the
    current input when no checkpoint ever initialized the bank."""
    if bank.initialized:
        return bank.centers
    return initial_centers(ln_map_value, bank.centers.shape[0])


def tab_forward_batch(
    maps: list,
    w: TabWeights,
    bank: TokenCenters,
    subgroup_size: int,
    refine_steps: int,
    training: bool,
) -> list[ag.Node]:
    """Token aggregation block over a batch of (d,h,w) maps.

    Training refines the shared centers on the concatenated batch tokens and
    folds them in by EMA before regrouping (one buffer write per step);
    inference only reads the stored centers. Per image: group, run intra and
    inter attention, fuse by addition + 1x1 conv, residual, then ConvFFN.
    """
    maps = [ag.as_node(m) for m in maps]
    shapes = [m.value.shape for m in maps]
    ln_tokens = [
        ag.layer_norm(map_to_tokens(m), w.norm_gamma, w.norm_beta) for m in maps
    ]
    ln_maps = [tokens_to_map(t, s[1], s[2]) for t, s in zip(ln_tokens, shapes)]

    if training:
        if not bank.initialized:
            bank.centers = initial_centers(ln_maps[0].value, bank.centers.shape[0])
            bank.initialized = True
        all_tokens = np.concatenate([t.value for t in ln_tokens], axis=0)
        refined = refine_centers(all_tokens, bank.centers, refine_steps)
        ema_update(bank, refined)
        centers_per_image = [bank.centers] * len(maps)
    else:
        centers_per_image = [resolve_centers(bank, lm.value) for lm in ln_maps]

    outs = []
    for m, t, centers in zip(maps, ln_tokens, centers_per_image):
        if centers.shape[0] > t.value.shape[0]:
            warnings.warn(
                f"more centers ({centers.shape[0]}) than tokens ({t.value.shape[0]})",
                stacklevel=2,
            )
        labels = assign_groups(cosine_similarity_matrix(t.value, centers))
        g = build_grouping(labels, subgroup_size)
        o1 = iasa(t, g, w.iasa)
        o2 = irca(t, g, centers, w.irca)
        fused = ag.add(ag.matmul(ag.add(o1, o2), w.fuse_w), w.fuse_b)
        h = ag.add(map_to_tokens(m), fused)
        hmap = tokens_to_map(h, m.value.shape[1], m.value.shape[2])
        outs.append(conv_ffn(hmap, w.ffn))
    return outs


def tab_forward(x, w: TabWeights, bank: TokenCenters, subgroup_size: int,
                refine_steps: int, training: bool) -> ag.Node:
    """Single-image tab_forward_batch."""
    return tab_forward_batch([x], w, bank, subgroup_size, refine_steps, training)[0]


def tab_grouping(x_map_value: np.ndarray, w: TabWeights, bank: TokenCenters,
                 subgroup_size: int) -> TokenGrouping:
    """Inference-path grouping of a (d,h,w) map, as the TAB would compute it."""
    d, h, ww = x_map_value.shape
    tokens = np.ascontiguousarray(ops.as_tensor(x_map_value).reshape(d, -1).T)
    ln = ops.layer_norm(
        tokens, ag.as_node(w.norm_gamma).value, ag.as_node(w.norm_beta).value
    )
    centers = resolve_centers(bank, np.ascontiguousarray(ln.T).reshape(d, h, ww))
    labels = assign_groups(cosine_similarity_matrix(ln, centers))
    return build_grouping(labels, subgroup_size)
