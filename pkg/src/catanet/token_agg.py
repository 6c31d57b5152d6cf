"""Content-aware token aggregation.

Tokens are grouped by cosine similarity to a shared bank of center
vectors. Centers live in an EMA-updated buffer: during training they are
refined by a few hard-assignment/mean iterations and folded into the
buffer with decay `ema_decay`; at inference the stored centers are used
as-is, so grouping is a single similarity pass.

Groups are variable-sized, so for rectangular batched attention the
label-sorted token sequence is sliced into fixed-size subgroups, padding
the tail by repeating the last real token (pad slots are masked out as
attention keys and discarded on pushback).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ops import as_tensor


class StateError(RuntimeError):
    """Operation needs state (e.g. initialized centers) that is not there yet."""


@dataclass
class TokenCenters:
    """Shared center bank with EMA bookkeeping. One per aggregation block."""

    centers: np.ndarray  # (n_centers, dim) float32
    decay: float = 0.999
    initialized: bool = False
    last_refined: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def empty(cls, n_centers: int, dim: int, decay: float = 0.999) -> "TokenCenters":
        if n_centers < 1 or not (0.0 < decay < 1.0):
            raise ValueError(f"bad center bank config: n_centers={n_centers}, decay={decay}")
        return cls(centers=np.zeros((n_centers, dim), dtype=np.float32), decay=decay)


@dataclass
class TokenGrouping:
    """Label-sorted permutation of tokens plus the fixed-size subgroup layout.

    perm[slot] is the token placed in that slot (pads repeat the last real
    token); inv_perm[token] is the unique non-pad slot holding it.
    """

    labels: np.ndarray  # (n,) int64
    perm: np.ndarray  # (n_padded,) int64
    inv_perm: np.ndarray  # (n,) int64
    pad_mask: np.ndarray  # (n_padded,) bool, True on pad slots
    subgroup_size: int

    @property
    def n_tokens(self) -> int:
        return self.labels.shape[0]

    @property
    def n_subgroups(self) -> int:
        return self.perm.shape[0] // self.subgroup_size


def cosine_similarity_matrix(x, c) -> np.ndarray:
    """Pairwise cosine similarity between tokens x (n,d) and centers c (m,d)."""
    x = as_tensor(x)
    c = as_tensor(c)
    num = x @ c.T
    den = np.linalg.norm(x, axis=1)[:, None] * np.linalg.norm(c, axis=1)[None, :]
    return num / (den + x.dtype.type(1e-8))


def assign_groups(sim: np.ndarray) -> np.ndarray:
    """Label each token with the lowest-index center of maximal similarity."""
    return np.argmax(sim, axis=1).astype(np.int64)


def refine_centers(x, c, steps: int) -> np.ndarray:
    """Hard-assignment k-means style refinement; empty groups keep their center."""
    x = as_tensor(x)
    c = as_tensor(c).copy()
    m = c.shape[0]
    for _ in range(steps):
        labels = assign_groups(cosine_similarity_matrix(x, c))
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=m).astype(c.dtype)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
    return c


def ema_update(bank: TokenCenters, refined: np.ndarray) -> TokenCenters:
    """Fold refined centers into the bank: c <- decay*c + (1-decay)*refined."""
    refined = as_tensor(refined)
    if refined.shape != bank.centers.shape:
        raise ValueError(f"refined shape {refined.shape} != centers {bank.centers.shape}")
    lam = float(bank.decay)
    # combine at double precision so the stored decay applies exactly,
    # then round once into float32 storage
    mixed = lam * bank.centers.astype(np.float64) + (1.0 - lam) * refined.astype(np.float64)
    bank.centers = mixed.astype(np.float32)
    bank.last_refined = refined
    return bank


def build_grouping(labels, subgroup_size: int) -> TokenGrouping:
    """Stable-sort tokens by (label, index) and slice into fixed-size subgroups."""
    labels = np.asarray(labels, dtype=np.int64)
    if subgroup_size < 1:
        raise ValueError(f"subgroup_size must be >= 1, got {subgroup_size}")
    n = labels.shape[0]
    order = np.argsort(labels, kind="stable")
    n_padded = -(-n // subgroup_size) * subgroup_size
    n_pad = n_padded - n
    perm = np.concatenate([order, np.full(n_pad, order[-1], dtype=np.int64)])
    pad_mask = np.zeros(n_padded, dtype=bool)
    pad_mask[n:] = True
    inv_perm = np.empty(n, dtype=np.int64)
    inv_perm[order] = np.arange(n, dtype=np.int64)
    return TokenGrouping(labels, perm, inv_perm, pad_mask, subgroup_size)


def gather_subgroups(x, g: TokenGrouping) -> np.ndarray:
    """Rearrange tokens (n,d) into the (n_subgroups, subgroup_size, d) layout."""
    x = as_tensor(x)
    if x.shape[0] != g.n_tokens:
        raise ValueError(f"grouping built for {g.n_tokens} tokens, got {x.shape[0]}")
    return x[g.perm].reshape(g.n_subgroups, g.subgroup_size, x.shape[1])


def pushback(o, g: TokenGrouping) -> np.ndarray:
    """Scatter subgroup-ordered outputs back to original token positions."""
    o = as_tensor(o)
    if o.shape[:2] != (g.n_subgroups, g.subgroup_size):
        raise ValueError(f"output layout {o.shape[:2]} != ({g.n_subgroups}, {g.subgroup_size})")
    flat = o.reshape(g.perm.shape[0], o.shape[2])
    return np.ascontiguousarray(flat[g.inv_perm])


def group_tokens(x, bank: TokenCenters, subgroup_size: int) -> TokenGrouping:
    """Inference-path grouping: one similarity pass against the stored centers."""
    x = as_tensor(x)
    if not bank.initialized:
        raise StateError("token centers are not initialized")
    if bank.centers.shape[0] > x.shape[0]:
        warnings.warn(
            f"more centers ({bank.centers.shape[0]}) than tokens ({x.shape[0]})",
            stacklevel=2,
        )
    labels = assign_groups(cosine_similarity_matrix(x, bank.centers))
    return build_grouping(labels, subgroup_size)


def _region_slices(n: int, parts: int) -> list[slice]:
    """Split n indices into `parts` contiguous, non-empty slices (edges repeat if parts > n)."""
    out = []
    for i in range(parts):
        a = (i * n) // parts
        b = ((i + 1) * n) // parts
        if b <= a:
            a = min(a, n - 1)
            b = a + 1
        out.append(slice(a, b))
    return out


def region_grid(n_centers: int) -> tuple[int, int]:
    """Near-square (rows, cols) factorization of the center count."""
    gh = max(1, int(math.sqrt(n_centers)))
    while n_centers % gh:
        gh -= 1
    return gh, n_centers // gh


def initial_centers(feature_map, n_centers: int) -> np.ndarray:
    """Initial centers: mean token of each cell in a regular grid over (d,h,w)."""
    fm = as_tensor(feature_map)
    d, h, w = fm.shape
    gh, gw = region_grid(n_centers)
    centers = np.empty((n_centers, d), dtype=fm.dtype)
    idx = 0
    for rs in _region_slices(h, gh):
        for cs in _region_slices(w, gw):
            centers[idx] = fm[:, rs, cs].mean(axis=(1, 2))
            idx += 1
    return centers
