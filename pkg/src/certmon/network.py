"""Feed-forward ReLU certificate networks and their activation-pattern geometry."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Polytope

# Pre-activations with |z| at or below this count as unstable.
UNSTABLE_TOL = 1e-8


class NetworkFormatError(ValueError):
    pass


class ReluNetwork:
    """``B(x) = W_L σ(... σ(W_1 x + b_1) ...) + b_L`` with a scalar output.

    ``layers`` holds every affine map; all but the last are followed by ReLU.
    """

    def __init__(self, layers: Sequence[tuple], input_dim: int):
        if input_dim < 1:
            raise NetworkFormatError("input_dim must be a positive integer")
        if not layers:
            raise NetworkFormatError("network has no layers")
        ws, bs = [], []
        prev = input_dim
        for i, (W, b) in enumerate(layers, start=1):
            W = np.array(W, dtype=float)
            b = np.array(b, dtype=float).reshape(-1)
            if W.ndim != 2:
                raise NetworkFormatError(f"layer {i}: weights must be a matrix")
            if W.shape[1] != prev:
                raise NetworkFormatError(
                    f"layer {i}: weight matrix has {W.shape[1]} columns, expected {prev}"
                )
            if b.shape[0] != W.shape[0]:
                raise NetworkFormatError(f"layer {i}: bias length {b.shape[0]} != layer width {W.shape[0]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NetworkFormatError(f"layer {i}: non-finite weight or bias")
            W.flags.writeable = False
            b.flags.writeable = False
            ws.append(W)
            bs.append(b)
            prev = W.shape[0]
        if ws[-1].shape[0] != 1:
            raise NetworkFormatError(f"final layer {len(ws)} must have exactly one row, has {ws[-1].shape[0]}")
        self.input_dim = int(input_dim)
        self.weights = tuple(ws)
        self.biases = tuple(bs)
        self.hidden_widths = tuple(W.shape[0] for W in ws[:-1])
        self.n_hidden = int(sum(self.hidden_widths))
        self._offsets = np.concatenate([[0], np.cumsum(self.hidden_widths)]).astype(int)

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.hidden_widths)

    def layer_slice(self, i: int) -> slice:
        """Flat-index range of hidden layer ``i`` (0-based)."""
        return slice(self._offsets[i], self._offsets[i + 1])

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": [{"weights": W.tolist(), "bias": b.tolist()} for W, b in zip(self.weights, self.biases)],
        }

    def __eq__(self, other):
        if not isinstance(other, ReluNetwork):
            return NotImplemented
        return (
            self.input_dim == other.input_dim
            and len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    def __repr__(self):
        return f"ReluNetwork(input_dim={self.input_dim}, hidden={list(self.hidden_widths)})"


def _fail(where: str, msg: str):
    raise NetworkFormatError(f"{where}: {msg}")


def load_network(text: str) -> ReluNetwork:
    """Parse the JSON weight format ``{"input_dim": n, "layers": [{"weights", "bias"}, ...]}``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        _fail("document", "expected a JSON object")
    n = doc.get("input_dim")
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        _fail("input_dim", f"expected a positive integer, got {n!r}")
    layers = doc.get("layers")
    if not isinstance(layers, list) or not layers:
        _fail("layers", "expected a non-empty list")
    parsed = []
    for i, layer in enumerate(layers, start=1):
        if not isinstance(layer, dict) or "weights" not in layer or "bias" not in layer:
            _fail(f"layers[{i}]", "expected an object with 'weights' and 'bias'")
        W, b = layer["weights"], layer["bias"]
        if not isinstance(W, list) or not W or not all(isinstance(r, list) for r in W):
            _fail(f"layers[{i}].weights", "expected a non-empty list of rows")
        if len({len(r) for r in W}) != 1:
            _fail(f"layers[{i}].weights", "ragged rows")
        if not isinstance(b, list):
            _fail(f"layers[{i}].bias", "expected a list")
        for val in (v for r in W for v in r):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                _fail(f"layers[{i}].weights", f"non-numeric entry {val!r}")
            if not math.isfinite(val):
                _fail(f"layers[{i}].weights", f"non-finite entry {val!r}")
        for val in b:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                _fail(f"layers[{i}].bias", f"non-numeric entry {val!r}")
            if not math.isfinite(val):
                _fail(f"layers[{i}].bias", f"non-finite entry {val!r}")
        parsed.append((W, b))
    return ReluNetwork(parsed, n)


def dump_network(net: ReluNetwork) -> str:
    return json.dumps(net.to_dict(), indent=1)


def read_network(path) -> ReluNetwork:
    with open(path) as fh:
        return load_network(fh.read())


def _check_input(net: ReluNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != net.input_dim:
        raise ValueError(f"state has dimension {x.shape[0]}, network expects {net.input_dim}")
    return x


def forward(net: ReluNetwork, x) -> float:
    h = _check_input(net, x)
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.maximum(W @ h + b, 0.0)
    return float(net.weights[-1][0] @ h + net.biases[-1][0])


def forward_batch(net: ReluNetwork, X) -> np.ndarray:
    """Row-wise ``forward`` for an ``(N, input_dim)`` array."""
    H = np.asarray(X, dtype=float)
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        H = np.maximum(H @ W.T + b, 0.0)
    return H @ net.weights[-1][0] + net.biases[-1][0]


def preactivations(net: ReluNetwork, x) -> np.ndarray:
    """Flat vector of hidden pre-activations, layer-major."""
    h = _check_input(net, x)
    out = []
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = W @ h + b
        out.append(z)
        h = np.maximum(z, 0.0)
    return np.concatenate(out) if out else np.zeros(0)


class ActivationPattern:
    """Active (and, for state-derived patterns, unstable) hidden neurons.

    Bits are stored flat, layer-major. ``key`` reads the active bits as a
    little-endian integer: bit ``k`` of the key is flat neuron ``k``.
    """

    __slots__ = ("widths", "active", "unstable", "key")

    def __init__(self, widths: Sequence[int], active, unstable=None):
        self.widths = tuple(int(w) for w in widths)
        n = sum(self.widths)
        a = np.array(active, dtype=bool).reshape(-1)
        u = np.zeros(n, dtype=bool) if unstable is None else np.array(unstable, dtype=bool).reshape(-1)
        if a.shape[0] != n or u.shape[0] != n:
            raise ValueError(f"pattern has {a.shape[0]} bits, network has {n} hidden neurons")
        a.flags.writeable = False
        u.flags.writeable = False
        self.active = a
        self.unstable = u
        self.key = int.from_bytes(np.packbits(a, bitorder="little").tobytes(), "little")

    @classmethod
    def from_key(cls, widths: Sequence[int], key: int) -> "ActivationPattern":
        n = sum(widths)
        bits = [(key >> k) & 1 for k in range(n)]
        return cls(widths, bits)

    @classmethod
    def from_sets(cls, widths: Sequence[int], active_sets: Sequence[set]) -> "ActivationPattern":
        """Build from per-layer sets of 1-based neuron indices, as in ``A_i``."""
        bits = []
        for w, s in zip(widths, active_sets):
            bits.extend(j + 1 in s for j in range(w))
        return cls(widths, bits)

    @property
    def n(self) -> int:
        return self.active.shape[0]

    def layers(self) -> list[np.ndarray]:
        out, start = [], 0
        for w in self.widths:
            out.append(self.active[start:start + w])
            start += w
        return out

    def active_set(self) -> set[tuple[int, int]]:
        """Active neurons as 1-based ``(layer, index)`` pairs."""
        return self._pairs(self.active)

    def unstable_set(self) -> set[tuple[int, int]]:
        return self._pairs(self.unstable)

    def _pairs(self, bits) -> set[tuple[int, int]]:
        out, start = set(), 0
        for i, w in enumerate(self.widths, start=1):
            out.update((i, j + 1) for j in np.flatnonzero(bits[start:start + w]))
            start += w
        return out

    @property
    def canonical(self) -> bool:
        return not self.unstable.any()

    def canonicalized(self) -> "ActivationPattern":
        """Drop unstable marks, resolving unstable neurons to active."""
        return ActivationPattern(self.widths, self.active | self.unstable)

    def flipped(self, k: int) -> "ActivationPattern":
        bits = self.active.copy()
        bits[k] = not bits[k]
        return ActivationPattern(self.widths, bits)

    def __eq__(self, other):
        if not isinstance(other, ActivationPattern):
            return NotImplemented
        return (
            self.widths == other.widths
            and np.array_equal(self.active, other.active)
            and np.array_equal(self.unstable, other.unstable)
        )

    def __hash__(self):
        return hash((self.widths, self.key, self.unstable.tobytes()))

    def __repr__(self):
        bits = "|".join("".join("1" if v else "0" for v in layer) for layer in self.layers())
        return f"ActivationPattern({bits})"


def activation_pattern(net: ReluNetwork, x, tol: float = UNSTABLE_TOL) -> ActivationPattern:
    if tol < 0:
        raise ValueError("unstable tolerance must be nonnegative")
    z = preactivations(net, x)
    return ActivationPattern(net.hidden_widths, z > tol, np.abs(z) <= tol)


@dataclass(frozen=True)
class MaskedAffine:
    """Affine forms of the network fixed to one activation pattern.

    Row ``k`` of ``pre_weights``/``pre_bias`` is the pre-activation of flat
    hidden neuron ``k`` as a function of the input; ``w_out``/``r_out`` give
    the output ``B(x) = w_out . x + r_out`` on the pattern's region.
    """

    pre_weights: np.ndarray
    pre_bias: np.ndarray
    w_out: np.ndarray
    r_out: float

    def value(self, x) -> float:
        return float(self.w_out @ np.asarray(x, dtype=float) + self.r_out)


def masked_affine(net: ReluNetwork, pattern: ActivationPattern) -> MaskedAffine:
    if pattern.widths != net.hidden_widths:
        raise ValueError(f"pattern widths {pattern.widths} do not match network {net.hidden_widths}")
    n = net.input_dim
    Wbar = np.eye(n)
    rbar = np.zeros(n)
    pre_w, pre_b = [], []
    for i, (W, b) in enumerate(zip(net.weights[:-1], net.biases[:-1])):
        a = W @ Wbar
        r = W @ rbar + b
        pre_w.append(a)
        pre_b.append(r)
        mask = pattern.active[net.layer_slice(i)]
        Wbar = np.where(mask[:, None], a, 0.0)
        rbar = np.where(mask, r, 0.0)
    w_out = net.weights[-1][0] @ Wbar
    r_out = float(net.weights[-1][0] @ rbar + net.biases[-1][0])
    pw = np.vstack(pre_w) if pre_w else np.zeros((0, n))
    pb = np.concatenate(pre_b) if pre_b else np.zeros(0)
    for arr in (pw, pb, w_out):
        arr.flags.writeable = False
    return MaskedAffine(pw, pb, w_out, r_out)


def cube_polytope(net: ReluNetwork, pattern: ActivationPattern, affine: MaskedAffine | None = None) -> Polytope:
    """Closed region of inputs whose activation pattern can be ``pattern``.

    Active neurons contribute ``z >= 0``, inactive ones ``z <= 0``.
    """
    if affine is None:
        affine = masked_affine(net, pattern)
    sign = np.where(pattern.active, 1.0, -1.0)
    return Polytope(net.input_dim, affine.pre_weights * sign[:, None], affine.pre_bias * sign)


def neighborhood(pattern: ActivationPattern) -> list[ActivationPattern]:
    """All patterns one bit-flip away, in flat (layer-major, index-minor) order."""
    return [pattern.flipped(k) for k in range(pattern.active.shape[0])]


def random_network(widths: Sequence[int], input_dim: int, rng: np.random.Generator, scale: float = 1.0) -> ReluNetwork:
    """He-style random weights; ``widths`` lists hidden widths (the scalar output is appended)."""
    layers, prev = [], input_dim
    for w in list(widths) + [1]:
        W = rng.normal(0.0, scale * math.sqrt(2.0 / prev), size=(w, prev))
        b = rng.normal(0.0, 0.1 * scale, size=w)
        layers.append((W, b))
        prev = w
    return ReluNetwork(layers, input_dim)
