"""Local-attention keep-masks: block-diagonal, Toeplitz, dilated Toeplitz.

A mask is a T x T boolean matrix; True means frame i may attend frame j.
All three families keep the diagonal and are symmetric. Dilation offsets
are measured from the reference frame i, so the dilated band always keeps
the frame itself.
"""

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("bd", "tp", "td")


@dataclass(frozen=True)
class AttentionMask:
    keep: np.ndarray
    family: str
    window: int
    dilation: int | None = None

    @property
    def size(self):
        return self.keep.shape[0]

    def label(self):
        if self.family == "td":
            return f"td_{self.window}_{self.dilation}"
        return f"{self.family}_{self.window}"


def block_diagonal_mask(T, W):
    """Non-overlapping segments of W frames; a short remainder block at the
    end when W does not divide T."""
    if W < 1:
        raise ValueError(f"block width must be >= 1, got {W}")
    if W > T:
        raise ValueError(f"block width {W} exceeds sequence length {T}")
    block = np.arange(T) // W
    keep = block[:, None] == block[None, :]
    return AttentionMask(keep=keep, family="bd", window=W)


def toeplitz_mask(T, W):
    """Band of half-width W: keep iff |i - j| <= W."""
    if W < 0:
        raise ValueError(f"window must be >= 0, got {W}")
    idx = np.arange(T)
    keep = np.abs(idx[:, None] - idx[None, :]) <= W
    return AttentionMask(keep=keep, family="tp", window=W)


def toeplitz_dilated_mask(T, W, L):
    """Band of half-width W sampled every L-th frame from the reference."""
    if W < 0:
        raise ValueError(f"window must be >= 0, got {W}")
    if L < 1:
        raise ValueError(f"dilation must be >= 1, got {L}")
    idx = np.arange(T)
    diff = idx[None, :] - idx[:, None]
    keep = (np.abs(diff) <= W) & (diff % L == 0)
    return AttentionMask(keep=keep, family="td", window=W, dilation=L)


def neighborhood(mask, i):
    """Set of frames j that frame i may attend under this mask."""
    if not 0 <= i < mask.size:
        raise IndexError(f"frame index {i} out of range for T={mask.size}")
    return set(np.flatnonzero(mask.keep[i]).tolist())


def parse_mask_spec(spec, T):
    """Parse 'bd:10|tp:30|td:60:4' into a list of masks of size T."""
    out = []
    for part in spec.split("|"):
        bits = part.strip().lower().split(":")
        fam = bits[0]
        try:
            if fam == "bd" and len(bits) == 2:
                out.append(block_diagonal_mask(T, int(bits[1])))
            elif fam == "tp" and len(bits) == 2:
                out.append(toeplitz_mask(T, int(bits[1])))
            elif fam == "td" and len(bits) == 3:
                out.append(toeplitz_dilated_mask(T, int(bits[1]), int(bits[2])))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(
                f"bad mask spec {part!r}: expected bd:W, tp:W or td:W:L"
            ) from None
    return out
