"""Multi-head self-attention with local masks and gated local/global fusion.

Four variants share the same projection machinery:

  baseline   every head computes an unmasked (global) attention map
  local      every head uses the same local mask (diagnostic variant)
  share_att  half the heads are global, half use per-head local masks
  gate_att   every head computes both maps; a learned elementwise gate
             fuses the two attention maps before the value multiply
  gate_op    every head computes both maps; the gate fuses the two
             contextualized representations after the value multiply

The backward pass comes from the tensor graph and is checked against the
central finite-difference oracle in the tests.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, add, add_scalar, concat_cols, div, masked_row_softmax,
                     matmul, mul, neg, row_sums, scale, sigmoid, sub, transpose)

MODES = ("baseline", "local", "share_att", "gate_att", "gate_op")


def uniform_init(rng, rows, cols):
    s = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-s, s, size=(rows, cols)), requires_grad=True)


@dataclass
class MhsaParams:
    w_q: list  # per head, D x D_M
    w_k: list
    w_v: list
    w_o: Tensor  # D x D

    @property
    def heads(self):
        return len(self.w_q)

    @property
    def head_dim(self):
        return self.w_q[0].shape[1]


@dataclass
class GateAttParams:
    """T x T gate layers shared across heads; bind the layer to a fixed T."""
    w_gate_global: Tensor
    w_gate_local: Tensor


@dataclass
class GateOpParams:
    """D x D output projections and gate layers for representation fusion."""
    w_out_global: Tensor
    w_out_local: Tensor
    w_gate_global: Tensor
    w_gate_local: Tensor


@dataclass
class VariantConfig:
    mode: str
    local_masks: list | None = None  # share_att: one mask per local head
    mask: object | None = None       # gate_att / gate_op: shared mask
    renormalize: bool = False        # gate_att: renormalize fused rows


def init_mhsa(d, m, rng):
    if d % m != 0:
        raise ValueError(f"model dim {d} not divisible by {m} heads")
    dm = d // m
    return MhsaParams(
        w_q=[uniform_init(rng, d, dm) for _ in range(m)],
        w_k=[uniform_init(rng, d, dm) for _ in range(m)],
        w_v=[uniform_init(rng, d, dm) for _ in range(m)],
        w_o=uniform_init(rng, d, d),
    )


def init_gate_att(t, rng):
    return GateAttParams(uniform_init(rng, t, t), uniform_init(rng, t, t))


def init_gate_op(d, rng):
    return GateOpParams(uniform_init(rng, d, d), uniform_init(rng, d, d),
                        uniform_init(rng, d, d), uniform_init(rng, d, d))


def check_variant(cfg, m, t):
    if cfg.mode not in MODES:
        raise ValueError(f"unknown attention mode {cfg.mode!r}")
    if cfg.mode == "share_att":
        if m % 2 != 0:
            raise ValueError("share_att needs an even head count")
        if not cfg.local_masks or len(cfg.local_masks) != m // 2:
            n = 0 if not cfg.local_masks else len(cfg.local_masks)
            raise ValueError(f"share_att needs {m // 2} local masks, got {n}")
        for mk in cfg.local_masks:
            if mk.size != t:
                raise ValueError(f"mask size {mk.size} != sequence length {t}")
    elif cfg.mode in ("local", "gate_att", "gate_op"):
        if cfg.mask is None:
            raise ValueError(f"{cfg.mode} needs a local mask")
        if cfg.mask.size != t:
            raise ValueError(f"mask size {cfg.mask.size} != sequence length {t}")


def combine_keep(mask, t, valid_len):
    """Intersect a family mask with the padding mask for valid_len frames.

    Padded rows keep only themselves so no softmax row is fully forbidden,
    and valid rows never attend padded columns.
    """
    base = None if mask is None else mask.keep
    if valid_len is None or valid_len >= t:
        return base
    if valid_len < 1:
        raise ValueError("valid_len must be >= 1")
    keep = np.ones((t, t), dtype=bool) if base is None else base.copy()
    keep[:, valid_len:] = False
    keep[valid_len:, :] = False
    pad = np.arange(valid_len, t)
    keep[pad, pad] = True
    return keep


def project_qkv(x, params, m):
    """Per-head query/key/value projections of the input frames."""
    return (matmul(x, params.w_q[m]),
            matmul(x, params.w_k[m]),
            matmul(x, params.w_v[m]))


def attention_map(q, k, keep=None):
    """Row-stochastic T x T map from scaled dot products, optionally masked."""
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch: {q.shape} vs {k.shape}")
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return masked_row_softmax(logits, keep)


def head_output(a, v):
    """Contextualized head representation A @ V."""
    return matmul(a, v)


def pair_gate(score_a, score_b):
    """Two-way softmax over a stacked pair: returns (R_a, 1 - R_a)."""
    r_a = sigmoid(sub(score_a, score_b))
    r_b = add_scalar(neg(r_a), 1.0)
    return r_a, r_b


def mhsa_forward(x, params, cfg, valid_len=None):
    """Forward for baseline / share_att; returns (Y, per-head maps)."""
    if cfg.mode not in ("baseline", "local", "share_att"):
        raise ValueError(f"mhsa_forward does not handle mode {cfg.mode!r}")
    t = x.shape[0]
    check_variant(cfg, params.heads, t)
    m = params.heads
    outs, maps = [], []
    for h in range(m):
        mask_h = None
        if cfg.mode == "local":
            mask_h = cfg.mask
        elif cfg.mode == "share_att" and h >= m // 2:
            mask_h = cfg.local_masks[h - m // 2]
        q, k, v = project_qkv(x, params, h)
        a = attention_map(q, k, combine_keep(mask_h, t, valid_len))
        outs.append(head_output(a, v))
        maps.append(a.data)
    y = matmul(concat_cols(outs), params.w_o)
    return y, maps


def gate_attention_maps(a_g, a_l, gparams, renormalize=False):
    """Fuse global and local attention maps with an elementwise learned gate.

    The fused map is non-negative but its rows do not sum to one in general;
    `renormalize` divides each row by its sum when a strictly stochastic map
    is wanted.
    """
    if a_g.shape != a_l.shape:
        raise ValueError("attention map shape mismatch")
    r_g, r_l = pair_gate(matmul(a_g, gparams.w_gate_global),
                         matmul(a_l, gparams.w_gate_local))
    fused = add(mul(r_g, a_g), mul(r_l, a_l))
    if renormalize:
        fused = div(fused, row_sums(fused))
    return fused


def gate_outputs(a_g_heads, a_l_heads, v_heads, gparams):
    """Fuse global and local contextualized representations per frame.

    Concatenates per-head A @ V for both routes, projects each, and blends
    with an elementwise two-way gate over the T x D representations.
    """
    o_g = concat_cols([head_output(a, v) for a, v in zip(a_g_heads, v_heads)])
    o_l = concat_cols([head_output(a, v) for a, v in zip(a_l_heads, v_heads)])
    y_g = matmul(o_g, gparams.w_out_global)
    y_l = matmul(o_l, gparams.w_out_local)
    r_g, r_l = pair_gate(matmul(o_g, gparams.w_gate_global),
                         matmul(o_l, gparams.w_gate_local))
    return add(mul(r_g, y_g), mul(r_l, y_l))


def attention_forward(x, params, cfg, gate_att=None, gate_op=None, valid_len=None):
    """Unified forward over all four variants.

    Returns (Y, maps) where maps is a dict with per-head ndarray attention
    maps under 'final' and, for gating variants, also 'global' and 'local'.
    """
    t = x.shape[0]
    if cfg.mode in ("baseline", "local", "share_att"):
        y, per_head = mhsa_forward(x, params, cfg, valid_len)
        return y, {"final": per_head}

    check_variant(cfg, params.heads, t)
    keep_g = combine_keep(None, t, valid_len)
    keep_l = combine_keep(cfg.mask, t, valid_len)
    a_g_heads, a_l_heads, v_heads = [], [], []
    for h in range(params.heads):
        q, k, v = project_qkv(x, params, h)
        a_g_heads.append(attention_map(q, k, keep_g))
        a_l_heads.append(attention_map(q, k, keep_l))
        v_heads.append(v)
    maps = {"global": [a.data for a in a_g_heads],
            "local": [a.data for a in a_l_heads]}

    if cfg.mode == "gate_att":
        if gate_att is None:
            raise ValueError("gate_att mode needs GateAttParams")
        fused = [gate_attention_maps(ag, al, gate_att, cfg.renormalize)
                 for ag, al in zip(a_g_heads, a_l_heads)]
        outs = [head_output(a, v) for a, v in zip(fused, v_heads)]
        y = matmul(concat_cols(outs), params.w_o)
        maps["final"] = [a.data for a in fused]
        return y, maps

    if gate_op is None:
        raise ValueError("gate_op mode needs GateOpParams")
    y = gate_outputs(a_g_heads, a_l_heads, v_heads, gate_op)
    maps["final"] = maps["global"]
    return y, maps
