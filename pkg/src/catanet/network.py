"""Full super-resolution network.

A 3x3 conv lifts the RGB input to `dim` channels, a stack of residual
groups (token aggregation block -> local-region attention block -> 3x3
conv, with an outer residual) refines it, and a 3x3 conv + pixel shuffle
reconstructs the residual that is added to the bicubic-upsampled input.

Weights live in a flat name -> Node registry (the checkpoint surface);
structured views over the same Nodes drive the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from . import ops
from .attention import (
    AttentionWeights,
    FfnWeights,
    LrsaWeights,
    TabWeights,
    conv_ffn,
    lrsa,
    lrsa_tiles,
    map_to_tokens,
    tab_forward_batch,
    tokens_to_map,
)
from .token_agg import TokenCenters

PRESETS = {
    "L": dict(dim=64, n_groups=4),
    "M": dict(dim=48, n_groups=3),
    "S": dict(dim=40, n_groups=3),
}


@dataclass
class ModelConfig:
    """Architecture hyperparameters; every field is CLI-settable."""

    dim: int = 64
    n_groups: int = 4
    n_centers: int = 64
    subgroup_size: int = 128
    refine_steps: int = 4
    ema_decay: float = 0.999
    heads: int = 4
    lrsa_patch: int = 16
    lrsa_overlap: int = 4
    ffn_expand: float = 2.0
    scale: int = 4

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if not (0.0 < self.ema_decay < 1.0):
            raise ValueError(f"ema_decay must be in (0,1), got {self.ema_decay}")
        for name in ("dim", "n_groups", "n_centers", "subgroup_size", "heads", "lrsa_patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be >= 0")
        if not (self.lrsa_patch > self.lrsa_overlap >= 0):
            raise ValueError("need lrsa_patch > lrsa_overlap >= 0")
        if self.ffn_expand <= 0:
            raise ValueError("ffn_expand must be positive")

    @property
    def hidden_dim(self) -> int:
        return int(self.dim * self.ffn_expand)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}, pick one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RgWeights:
    tab: TabWeights
    lrsa: LrsaWeights
    tail_w: ag.Node
    tail_b: ag.Node


class CATANet:
    """Model container: flat parameter registry, per-group center banks, config."""

    def __init__(self, config: ModelConfig, seed: int = 0, init: str = "random"):
        self.config = config
        self.params: dict[str, ag.Node] = {}
        self.banks: list[TokenCenters] = []
        rng = np.random.default_rng(seed)

        def linear(name, rows, cols):
            if init == "random":
                w = rng.normal(0.0, 0.02, (rows, cols)).astype(np.float32)
            else:
                w = np.zeros((rows, cols), dtype=np.float32)
            return self._register(name, w)

        def conv(name, c_out, c_in, k):
            if init == "random":
                std = math.sqrt(2.0 / (c_in * k * k))
                w = rng.normal(0.0, std, (c_out, c_in, k, k)).astype(np.float32)
            else:
                w = np.zeros((c_out, c_in, k, k), dtype=np.float32)
            return self._register(name, w)

        def zeros(name, *shape):
            return self._register(name, np.zeros(shape, dtype=np.float32))

        def ones(name, *shape):
            return self._register(name, np.ones(shape, dtype=np.float32))

        def attn(prefix):
            d = config.dim
            return AttentionWeights(
                w_q=linear(f"{prefix}.q", d, d),
                w_k=linear(f"{prefix}.k", d, d),
                w_v=linear(f"{prefix}.v", d, d),
                w_out=linear(f"{prefix}.out", d, d),
                heads=config.heads,
            )

        def ffn(prefix):
            d, e = config.dim, config.hidden_dim
            return FfnWeights(
                norm_gamma=ones(f"{prefix}.norm.gamma", d),
                norm_beta=zeros(f"{prefix}.norm.beta", d),
                expand_w=linear(f"{prefix}.expand.weight", d, e),
                expand_b=zeros(f"{prefix}.expand.bias", e),
                dw_w=self._register_dw(f"{prefix}.dw.weight", e, rng, init),
                dw_b=zeros(f"{prefix}.dw.bias", e),
                proj_w=linear(f"{prefix}.proj.weight", e, d),
                proj_b=zeros(f"{prefix}.proj.bias", d),
            )

        d = config.dim
        self.shallow_w = conv("shallow.weight", d, 3, 3)
        self.shallow_b = zeros("shallow.bias", d)
        self.rgs: list[RgWeights] = []
        for i in range(config.n_groups):
            p = f"rg{i}"
            tab = TabWeights(
                norm_gamma=ones(f"{p}.tab.norm.gamma", d),
                norm_beta=zeros(f"{p}.tab.norm.beta", d),
                iasa=attn(f"{p}.tab.iasa"),
                irca=attn(f"{p}.tab.irca"),
                fuse_w=linear(f"{p}.tab.fuse.weight", d, d),
                fuse_b=zeros(f"{p}.tab.fuse.bias", d),
                ffn=ffn(f"{p}.tab.ffn"),
            )
            lrsa_w = LrsaWeights(
                norm_gamma=ones(f"{p}.lrsa.norm.gamma", d),
                norm_beta=zeros(f"{p}.lrsa.norm.beta", d),
                attn=attn(f"{p}.lrsa.attn"),
                ffn=ffn(f"{p}.lrsa.ffn"),
            )
            self.rgs.append(
                RgWeights(
                    tab=tab,
                    lrsa=lrsa_w,
                    tail_w=conv(f"{p}.tail.weight", d, d, 3),
                    tail_b=zeros(f"{p}.tail.bias", d),
                )
            )
            self.banks.append(
                TokenCenters.empty(config.n_centers, d, decay=config.ema_decay)
            )
        out_ch = 3 * config.scale * config.scale
        self.recon_w = conv("recon.weight", out_ch, d, 3)
        self.recon_b = zeros("recon.bias", out_ch)

    def _register(self, name, value) -> ag.Node:
        node = ag.parameter(value, name)
        self.params[name] = node
        return node

    def _register_dw(self, name, channels, rng, init) -> ag.Node:
        if init == "random":
            w = rng.normal(0.0, math.sqrt(2.0 / 9.0), (channels, 3, 3)).astype(np.float32)
        else:
            w = np.zeros((channels, 3, 3), dtype=np.float32)
        return self._register(name, w)

    def buffer_names(self) -> list[str]:
        return [f"rg{i}.tab.centers" for i in range(len(self.banks))]


def shallow_extract(img, model: CATANet) -> ag.Node:
    """3x3 conv lifting an RGB image (3,h,w) into feature space."""
    img = ag.as_node(img)
    if img.value.ndim != 3 or img.value.shape[0] != 3:
        raise ops.DimensionError(f"expected (3,h,w) input, got {img.value.shape}")
    return ag.conv2d(img, model.shallow_w, model.shallow_b)


def residual_group_batch(xs: list, rg: RgWeights, bank: TokenCenters,
                         config: ModelConfig, training: bool) -> list[ag.Node]:
    outs = tab_forward_batch(
        xs, rg.tab, bank, config.subgroup_size, config.refine_steps, training
    )
    result = []
    for x_in, t in zip(xs, outs):
        d, h, w = t.value.shape
        ln = ag.layer_norm(map_to_tokens(t), rg.lrsa.norm_gamma, rg.lrsa.norm_beta)
        attn_out = lrsa(tokens_to_map(ln, h, w), rg.lrsa.attn,
                        config.lrsa_patch, config.lrsa_overlap)
        t2 = conv_ffn(ag.add(t, attn_out), rg.lrsa.ffn)
        tail = ag.conv2d(t2, rg.tail_w, rg.tail_b)
        result.append(ag.add(ag.as_node(x_in), tail))
    return result


def residual_group(x, rg: RgWeights, bank: TokenCenters, config: ModelConfig,
                   training: bool = False) -> ag.Node:
    return residual_group_batch([x], rg, bank, config, training)[0]


def forward_batch(imgs: list, model: CATANet, training: bool = False) -> list[ag.Node]:
    """Run the whole network on a batch of (3,h,w) images in [0,1].

    In training mode center banks take one EMA step per call (refined on the
    concatenated batch tokens); inference never touches them.
    """
    cfg = model.config
    feats = [shallow_extract(img, model) for img in imgs]
    xs = feats
    for rg, bank in zip(model.rgs, model.banks):
        xs = residual_group_batch(xs, rg, bank, cfg, training)
    outs = []
    for img, x0, xk in zip(imgs, feats, xs):
        deep = ag.add(xk, x0)  # global feature residual into reconstruction
        res = ag.pixel_shuffle(ag.conv2d(deep, model.recon_w, model.recon_b), cfg.scale)
        base = ag.bicubic_resize(ag.as_node(img), float(cfg.scale))
        outs.append(ag.add(res, base))
    return outs


def forward(img, model: CATANet, training: bool = False) -> ag.Node:
    """Single image (3,h,w) -> (3, h*scale, w*scale). Values are not clamped."""
    return forward_batch([img], model, training)[0]


def param_count(model: CATANet) -> int:
    """Learned scalars (weights, biases, norm parameters). Centers excluded."""
    return sum(p.value.size for p in model.params.values())


def buffer_count(model: CATANet) -> int:
    """Scalars held in non-learned buffers (the token center banks)."""
    return sum(b.centers.size for b in model.banks)


def multi_adds(config: ModelConfig, input_h: int, input_w: int) -> int:
    """Analytic multiply-accumulate count for one forward at the given size.

    Convs count h*w*c_in*c_out*k*k; attention counts the QK^T and
    attention-times-V products (padded token count, i.e. what actually runs);
    normalizations and elementwise work are ignored by convention.
    """
    h, w = input_h, input_w
    n = h * w
    d = config.dim
    e = config.hidden_dim
    gs = config.subgroup_size
    m = config.n_centers
    n_pad = -(-n // gs) * gs

    ffn = n * d * e + 9 * n * e + n * e * d
    tab = 4 * n * d * d + 2 * n_pad * (2 * gs) * d          # iasa: proj + attention
    tab += 2 * n * d * d + 2 * m * d * d + 2 * n_pad * m * d  # irca
    tab += n * d * d                                        # 1x1 fuse
    lrsa_cost = 4 * n * d * d
    for (r0, r1), (c0, c1), (wr0, wr1), (wc0, wc1) in lrsa_tiles(
        h, w, config.lrsa_patch, config.lrsa_overlap
    ):
        lq = (r1 - r0) * (c1 - c0)
        lkv = (wr1 - wr0) * (wc1 - wc0)
        lrsa_cost += 2 * lq * lkv * d
    rg = tab + ffn + lrsa_cost + ffn + 9 * n * d * d
    total = 9 * n * 3 * d                                   # shallow
    total += config.n_groups * rg
    total += 9 * n * d * (3 * config.scale**2)              # reconstruction
    return int(total)
