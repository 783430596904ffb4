"""Hand-built ReLU certificates with known ground truth.

``valid_box`` is ``margin - max_i |x_i - c_i|`` assembled from exact ReLU
gadgets: ``|d| = relu(d) + relu(-d)`` and ``max(a, b) = relu(a - b) + relu(b)``
for ``b >= 0``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .network import ReluNetwork

KINDS = ("affine", "valid_box", "invalid_flipped")

# Large shift keeping the single affine neuron active on any sane domain.
AFFINE_SHIFT = 1e3


def affine_cbf(w: Sequence[float], r: float = 0.0) -> ReluNetwork:
    """``B(x) = w.x + r`` as ``relu(w.x + r + K) - K``."""
    w = np.asarray(w, dtype=float).reshape(1, -1)
    return ReluNetwork([(w, [r + AFFINE_SHIFT]), ([[1.0]], [-AFFINE_SHIFT])], w.shape[1])


def _box_layers(center: np.ndarray):
    m = center.size
    layers = []
    # |x_i - c_i| via the two signed halves
    W1 = np.zeros((2 * m, m))
    W1[0::2] = np.eye(m)
    W1[1::2] = -np.eye(m)
    b1 = np.repeat(-center, 2) * np.tile([1.0, -1.0], m)
    layers.append((W1, b1))
    W2 = np.zeros((m, 2 * m))
    for i in range(m):
        W2[i, 2 * i] = W2[i, 2 * i + 1] = 1.0
    layers.append((W2, np.zeros(m)))
    # each tree level consumes a vector v of nonnegative values and emits
    # neurons whose sum pairs up into max(v[2k], v[2k+1])
    sums = np.eye(m)  # how the current neurons combine into the live values
    n_live = m
    while n_live > 1:
        width = sums.shape[1]
        rows, groups = [], []
        for k in range(0, n_live, 2):
            if k + 1 < n_live:
                a, b = sums[k], sums[k + 1]
                rows += [a - b, b]
                groups.append([len(rows) - 2, len(rows) - 1])
            else:
                rows.append(sums[k])
                groups.append([len(rows) - 1])
        W = np.array(rows).reshape(-1, width)
        layers.append((W, np.zeros(W.shape[0])))
        sums = np.zeros((len(groups), W.shape[0]))
        for g, idx in enumerate(groups):
            sums[g, idx] = 1.0
        n_live = len(groups)
    return layers, sums[0]


def _pad(layers, readout: np.ndarray, depth: Optional[int], width: Optional[int]):
    """Extend to ``depth`` hidden layers and ``width`` neurons per layer.

    Extra layers are shifted pass-throughs ``relu(v + 1)``: with ``v >= 0`` they
    are always active and their flipped twins are empty, so they add no cubes.
    Extra neurons are dead (zero weights, bias -1). Returns the layers, the
    readout and the shift carried by the last layer's outputs.
    """
    layers = list(layers)
    shift = np.zeros(layers[-1][0].shape[0])
    while depth is not None and len(layers) < depth:
        n = shift.size
        layers.append((np.eye(n), 1.0 - shift))
        shift = np.ones(n)
    if width is not None:
        padded, extra = [], 0
        for W, b in layers:
            n, k = W.shape
            if n > width:
                raise ValueError(f"gadget needs width {n}, more than the requested {width}")
            Wp = np.zeros((width, k + extra))
            Wp[:n, :k] = W
            bp = np.full(width, -1.0)
            bp[:n] = b
            padded.append((Wp, bp))
            extra = width - n
        layers = padded
        readout = np.concatenate([readout, np.zeros(extra)])
        shift = np.concatenate([shift, np.zeros(extra)])
    return layers, readout, shift


def make_synthetic_cbf(kind: str, dim: int = 2, center: Optional[Sequence[float]] = None, margin: float = 1.0,
                       depth: Optional[int] = None, width: Optional[int] = None,
                       w: Optional[Sequence[float]] = None, r: float = 0.0) -> ReluNetwork:
    """Build a certificate of the given kind.

    ``affine`` gives ``w.x + r`` (default ``w = e_1``). ``valid_box`` gives
    ``margin - max_i |x_i - c_i|``, optionally padded to ``depth`` hidden layers of
    ``width`` neurons. ``invalid_flipped`` is ``valid_box`` with the sign of the
    first output weight reversed.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown certificate kind {kind!r}; expected one of {', '.join(KINDS)}")
    if dim < 1:
        raise ValueError("dimension must be positive")
    if kind == "affine":
        if w is None:
            w = np.eye(dim)[0]
        if len(w) != dim:
            raise ValueError(f"affine weights have length {len(w)}, expected {dim}")
        return affine_cbf(w, r)
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    if c.shape != (dim,):
        raise ValueError(f"center must have length {dim}")
    if dim < 2 and kind == "invalid_flipped":
        raise ValueError("invalid_flipped needs at least two state dimensions")
    layers, readout = _box_layers(c)
    if depth is not None and depth < len(layers):
        raise ValueError(f"box gadget needs {len(layers)} hidden layers, more than the requested {depth}")
    hidden, readout, shift = _pad(layers, readout, depth, width)
    # B = margin - readout . (h - shift)
    w_out = -readout
    if kind == "invalid_flipped":
        w_out = w_out.copy()
        k = int(np.flatnonzero(w_out)[0])
        w_out[k] = -w_out[k]
    b_out = margin + float(w_out @ -shift) if shift.size else margin
    return ReluNetwork(hidden + [(w_out.reshape(1, -1), [b_out])], dim)
