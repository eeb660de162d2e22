"""Dense outputs by embedding retrieval against the output image features.

A query embedding e (a hidden state at a query-token position) is matched
against every image feature: s = e . h_v^T / sqrt(d). Masks threshold the
sigmoid of s at 0.5 (equivalently s > 0); multiple mask tokens each own one
sub-cell of a finer lattice, assembled by depth-to-space. Depth and normals
reuse the same similarity map through a sigmoid squashing.

Functions accept either autodiff Tensors (training) or numpy arrays
(inference); the math is identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class BinaryMask:
    probs: np.ndarray  # (H, W) float in [0, 1]
    mask: np.ndarray   # (H, W) bool, probs > 0.5


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def retrieve(queries, h_v):
    """Similarity maps s = e . h_v^T / sqrt(d).

    queries: (n, d); h_v: (H_p, W_p, d). Returns (n, H_p, W_p).
    """
    hp, wp, d = h_v.shape
    scale = 1.0 / math.sqrt(d)
    flat = h_v.reshape(hp * wp, d)
    if _is_tensor(queries) or _is_tensor(h_v):
        q = queries if _is_tensor(queries) else Tensor(queries)
        f = flat if _is_tensor(flat) else Tensor(flat)
        return (q @ f.swapaxes(-1, -2) * scale).reshape(queries.shape[0], hp, wp)
    return (queries @ flat.T * scale).reshape(queries.shape[0], hp, wp)


def pixel_shuffle(s):
    """Depth-to-space: (N^2, H_p, W_p) -> (H_p*N, W_p*N).

    Channel i fills sub-cell (i // N, i % N) of each coarse cell (row-major).
    """
    n2, hp, wp = s.shape
    n = int(round(math.sqrt(n2)))
    if n * n != n2:
        raise ValueError(f"channel count {n2} is not a perfect square")
    t = s.reshape(n, n, hp, wp)
    t = t.transpose((2, 0, 3, 1))
    return t.reshape(hp * n, wp * n)


def space_to_depth(s_up: np.ndarray, n: int) -> np.ndarray:
    """Inverse of pixel_shuffle: (H_p*N, W_p*N) -> (N^2, H_p, W_p)."""
    h, w = s_up.shape
    hp, wp = h // n, w // n
    t = s_up.reshape(hp, n, wp, n).transpose(1, 3, 0, 2)
    return t.reshape(n * n, hp, wp)


def bilinear_resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-center alignment. img: (h, w) float."""
    h, w = img.shape
    out_h, out_w = size
    v = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    u = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(v).astype(int)
    x0 = np.floor(u).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (v - y0)[:, None]
    fx = (u - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def binarize_and_resize(s_up: np.ndarray, size: tuple[int, int]) -> BinaryMask:
    """sigmoid -> bilinear upsample -> threshold at 0.5, in that order."""
    probs = bilinear_resize(_np_sigmoid(np.asarray(s_up, dtype=np.float64)), size)
    return BinaryMask(probs=probs, mask=probs > 0.5)


def assemble_mask(queries, h_v, size: tuple[int, int]) -> BinaryMask:
    """Full mask path: retrieve -> pixel_shuffle -> binarize_and_resize."""
    s = retrieve(queries, h_v)
    s = s.data if _is_tensor(s) else s
    return binarize_and_resize(pixel_shuffle(s), size)


def predict_depth(e_d, h_v, d_min: float, d_max: float,
                  size: tuple[int, int] | None = None) -> np.ndarray:
    """Per-pixel depth: ratio r = sigmoid(s), depth = r*d_max + (1-r)*d_min."""
    s = retrieve(e_d.reshape(1, -1), h_v)
    s = (s.data if _is_tensor(s) else s)[0]
    if size is not None:
        s = bilinear_resize(np.asarray(s, dtype=np.float64), size)
    r = _np_sigmoid(np.asarray(s, dtype=np.float64))
    return r * d_max + (1.0 - r) * d_min


def predict_normals(e_xyz, h_v, size: tuple[int, int] | None = None) -> np.ndarray:
    """Unit normal field from three query embeddings (one per component).

    Each channel is sigmoid-squashed to [0, 1], shifted to [-1, 1], then the
    vector is L2-normalized per pixel. Degenerate (near-zero) vectors fall
    back to +z.
    """
    s = retrieve(e_xyz, h_v)
    s = s.data if _is_tensor(s) else s
    chans = []
    for c in range(3):
        m = np.asarray(s[c], dtype=np.float64)
        if size is not None:
            m = bilinear_resize(m, size)
        chans.append(2.0 * _np_sigmoid(m) - 1.0)
    vec = np.stack(chans, axis=-1)
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < 1e-6
    out = np.divide(vec, np.maximum(norm, 1e-12))
    out[degenerate] = (0.0, 0.0, 1.0)
    return out
