"""Diagnostics: attention profiles, inter-frame similarity, gradient locality.

The gradient matrix G holds, per (output frame i, input frame j), the
Frobenius norm of the Jacobian block dY[i]/dX[j] of one encoder tower; the
locality statistic compares average gradient mass inside vs outside each
frame's neighborhood.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradientMatrix:
    g: np.ndarray  # T x T, entries >= 0


def attention_profile(maps):
    """Attention received per frame: mean over heads, then over query rows."""
    stacked = np.stack([np.asarray(m) for m in maps])
    if stacked.ndim != 3 or stacked.shape[1] != stacked.shape[2]:
        raise ValueError("attention_profile expects square T x T maps")
    return stacked.mean(axis=0).mean(axis=0)


def cosine_similarity_matrix(x):
    """Pairwise cosine similarity of feature rows; zero rows map to 0."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def gradient_matrix(encode_fn, x):
    """Exact G via one backward pass per output coordinate.

    encode_fn maps a T x D input Tensor to a T x D output Tensor (e.g. one
    tower of the classifier); enable desk-scale sizes only.
    """
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    y = encode_fn(xt)
    t_out, d_out = y.shape
    g2 = np.zeros((t_out, xt.shape[0]))
    onehot = np.zeros_like(y.data)
    for i in range(t_out):
        for d in range(d_out):
            xt.grad = None
            onehot[i, d] = 1.0
            y.backward(onehot)
            onehot[i, d] = 0.0
            g2[i] += (xt.grad ** 2).sum(axis=1)
    return GradientMatrix(g=np.sqrt(g2))


def locality_statistic(gm, neighborhoods):
    """Per-frame ratio of local to total average gradient norm, in [0, 1]."""
    g = gm.g if isinstance(gm, GradientMatrix) else np.asarray(gm)
    t = g.shape[0]
    if len(neighborhoods) != t:
        raise ValueError("need one neighborhood per frame")
    s = np.empty(t)
    for i, n_i in enumerate(neighborhoods):
        inside = sorted(n_i)
        outside = sorted(set(range(t)) - set(n_i))
        if not inside or not outside:
            raise ValueError(f"neighborhood of frame {i} must be a nonempty "
                             "proper subset of frames")
        a = g[i, inside].mean()
        b = g[i, outside].mean()
        s[i] = 0.5 if a + b == 0 else a / (a + b)
    return s


# ---------------------------------------------------------------------------
# artifact export
# ---------------------------------------------------------------------------

def write_csv(path, rows, header=None):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if header:
            w.writerow(header)
        w.writerows(rows)


def write_pgm(path, matrix, vmin=None, vmax=None):
    """Binary PGM, rows scaled linearly to 0..255; scale goes to a sidecar."""
    m = np.asarray(matrix, dtype=np.float64)
    lo = float(m.min()) if vmin is None else float(vmin)
    hi = float(m.max()) if vmax is None else float(vmax)
    span = hi - lo if hi > lo else 1.0
    pix = np.clip(np.rint((m - lo) / span * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        f.write(pix.tobytes())
    with open(path + ".json", "w") as f:
        json.dump({"min": lo, "max": hi}, f)


def write_mask_pgm(path, mask):
    """Mask dump: 255 where attention is allowed, 0 where forbidden."""
    write_pgm(path, mask.keep.astype(np.float64), vmin=0.0, vmax=1.0)
