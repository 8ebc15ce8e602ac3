"""Update compression: layer-sensitivity pruning plus k-means weight sharing.

A client's model delta is reduced to the most-changed layers, and each kept
layer is replaced by a small codebook of shared values and a bit-packed index
per parameter. Weights and biases of a layer form one pool; codebooks are
never shared across layers.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .neural import Layer, LayeredParams

_HEADER_LEN = struct.Struct("<I")
WIRE_FORMAT = "quantized-update/1"


@dataclass
class LayerSensitivity:
    values: np.ndarray  # mean |delta| per layer

    @property
    def num_layers(self) -> int:
        return int(self.values.size)


def layer_sensitivity(before: LayeredParams, after: LayeredParams,
                      pool_biases: bool = True) -> LayerSensitivity:
    """Mean absolute parameter change of every layer."""
    if not before.conformable(after):
        raise ValueError(f"non-conformable params: {before.dims} vs {after.dims}")
    vals = []
    for a, b in zip(before.layers, after.layers):
        if pool_biases:
            d = b.pooled() - a.pooled()
        else:
            d = b.weights - a.weights
        vals.append(float(np.mean(np.abs(d))))
    return LayerSensitivity(np.array(vals))


def num_kept(num_layers: int, keep_fraction: float) -> int:
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    # guard against 0.8 * 5 = 4.000000000000001 style round-up
    return max(1, min(num_layers, math.ceil(keep_fraction * num_layers - 1e-9)))


def select_layers(s: LayerSensitivity, keep_fraction: float) -> list:
    """0-based indices of the ceil(keep_fraction * L) most sensitive layers, ascending.

    Ties in sensitivity keep the lower layer index first.
    """
    order = np.argsort(-s.values, kind="stable")
    return sorted(int(i) for i in order[: num_kept(s.num_layers, keep_fraction)])


def threshold(s: LayerSensitivity, kept: Sequence[int]) -> float:
    """The implied cut-off: largest sensitivity among dropped layers (-inf if none)."""
    dropped = [v for i, v in enumerate(s.values) if i not in set(kept)]
    return float(max(dropped)) if dropped else float("-inf")


# --------------------------------------------------------------------------
# k-means weight sharing
# --------------------------------------------------------------------------


@dataclass
class Codebook:
    centroids: np.ndarray  # (k,) float64
    indices: np.ndarray  # (n,) int in 0..k-1
    bit_width: int = 32

    @property
    def k(self) -> int:
        return int(self.centroids.size)

    @property
    def n(self) -> int:
        return int(self.indices.size)

    @property
    def index_bits(self) -> int:
        return index_bits(self.k)

    @property
    def payload_bits(self) -> int:
        return self.n * self.index_bits + self.k * self.bit_width

    def decode(self) -> np.ndarray:
        return self.centroids[self.indices]

    def sse(self, data: np.ndarray) -> float:
        return float(np.sum((np.asarray(data) - self.decode()) ** 2))


def index_bits(k: int) -> int:
    return 0 if k <= 1 else int(math.ceil(math.log2(k)))


def _assign(sorted_x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid for sorted data and sorted centroids; exact midpoint ties go low."""
    bounds = (centroids[:-1] + centroids[1:]) / 2.0
    return np.searchsorted(bounds, sorted_x, side="left")


def kmeans_quantize(data, k: int, rng_seed: int = 0, max_iter: int = 300,
                    bit_width: int = 32) -> Codebook:
    """1-D Lloyd's iterations from centroids spaced linearly over [min, max].

    Stops at an assignment fixed point or after ``max_iter`` iterations. An
    empty cluster is re-seeded at the point farthest from its current centroid.
    The procedure is fully deterministic; ``rng_seed`` is accepted so callers
    can thread a seed uniformly but does not change the result.
    """
    x = np.asarray(data, dtype=np.float64).ravel()
    n = x.size
    if n == 0:
        raise ValueError("cannot quantize an empty array")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cs = np.concatenate([[0.0], np.cumsum(xs)])
    centroids = np.linspace(xs[0], xs[-1], k)
    # With sorted data and sorted centroids every cluster is a contiguous run
    # of xs, so an assignment is fully described by the k+1 run edges.
    edges = None
    for _ in range(max_iter):
        bounds = (centroids[:-1] + centroids[1:]) / 2.0
        new = np.concatenate([[0], np.searchsorted(xs, bounds, side="right"), [n]])
        if edges is not None and np.array_equal(new, edges):
            break
        edges = new
        starts, ends = edges[:-1], edges[1:]
        counts = ends - starts
        nonempty = counts > 0
        updated = centroids.copy()
        updated[nonempty] = (cs[ends[nonempty]] - cs[starts[nonempty]]) / counts[nonempty]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            assign = np.repeat(np.arange(k), counts)
            dist = np.abs(xs - updated[assign])
            for j in empty:
                far = int(np.argmax(dist))
                updated[j] = xs[far]
                dist[far] = -1.0
        centroids = np.sort(updated)
    final = _assign(xs, centroids)
    indices = np.empty(n, dtype=np.int64)
    indices[order] = final
    return Codebook(centroids, indices, bit_width)


def compression_rate(n: int, b: int, k: int) -> float:
    """Raw bits over index-plus-codebook bits, with log2(k) bits per index."""
    if not (n >= k >= 1 and b >= 1):
        raise ValueError(f"need n >= k >= 1 and b >= 1, got n={n}, b={b}, k={k}")
    return n * b / (n * math.log2(k) + k * b)


def implementable_rate(n: int, b: int, k: int) -> float:
    """Same ratio with whole bits per index (what the wire format achieves)."""
    if not (n >= k >= 1 and b >= 1):
        raise ValueError(f"need n >= k >= 1 and b >= 1, got n={n}, b={b}, k={k}")
    return n * b / (n * index_bits(k) + k * b)


# --------------------------------------------------------------------------
# Quantized updates and their wire format
# --------------------------------------------------------------------------


@dataclass
class QuantizedUpdate:
    dims: list  # [(in_dim, out_dim)] for every layer
    entries: list  # Codebook for kept layers, None for dropped
    dataset_size: float
    bit_width: int = 32

    @property
    def kept(self) -> list:
        return [e is not None for e in self.entries]

    @property
    def payload_bits(self) -> int:
        return sum(e.payload_bits for e in self.entries if e is not None)

    @property
    def raw_bits(self) -> int:
        return sum((i * o + o) * self.bit_width for i, o in self.dims)

    def header(self) -> dict:
        return {
            "format": WIRE_FORMAT,
            "layers": [[i, o] for i, o in self.dims],
            "kept": self.kept,
            "k": [e.k if e is not None else 0 for e in self.entries],
            "b": self.bit_width,
            "dataset_size": self.dataset_size,
        }

    @property
    def header_bits(self) -> int:
        return 8 * (_HEADER_LEN.size + len(_dump(self.header())))

    @property
    def bit_cost(self) -> int:
        """Exact payload bits: n*ceil(log2 k) + k*b per kept layer."""
        return self.payload_bits

    def to_bytes(self) -> bytes:
        head = _dump(self.header())
        parts = [_HEADER_LEN.pack(len(head)), head]
        for e in self.entries:
            if e is None:
                continue
            parts.append(e.centroids.astype("<f8").tobytes())
            parts.append(pack_indices(e.indices, e.index_bits))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantizedUpdate":
        (hlen,) = _HEADER_LEN.unpack_from(data, 0)
        head = json.loads(data[4:4 + hlen])
        if head.get("format") != WIRE_FORMAT:
            raise ValueError("not a quantized-update stream")
        pos = 4 + hlen
        entries = []
        for (i, o), kept, k in zip(head["layers"], head["kept"], head["k"]):
            if not kept:
                entries.append(None)
                continue
            n = i * o + o
            centroids = np.frombuffer(data, dtype="<f8", count=k, offset=pos).astype(np.float64)
            pos += 8 * k
            w = index_bits(k)
            nbytes = (n * w + 7) // 8
            indices = unpack_indices(data[pos:pos + nbytes], n, w)
            pos += nbytes
            entries.append(Codebook(centroids, indices, head["b"]))
        if pos != len(data):
            raise ValueError("trailing bytes after payload")
        return cls([tuple(d) for d in head["layers"]], entries, head["dataset_size"], head["b"])


def _dump(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode()


def pack_indices(indices: np.ndarray, width: int) -> bytes:
    """Little-endian bit packing at ``width`` bits per index, zero padded to a byte."""
    if width == 0:
        return b""
    idx = np.asarray(indices, dtype=np.uint64)
    bits = ((idx[:, None] >> np.arange(width, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_indices(buf: bytes, n: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(n, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: n * width]
    if bits.size != n * width:
        raise ValueError("index payload too short")
    bits = bits.reshape(n, width).astype(np.int64)
    return (bits << np.arange(width, dtype=np.int64)).sum(axis=1)


def compress(before: LayeredParams, after: LayeredParams, keep_fraction: float,
             k: Union[int, Sequence[int]], dataset_size: float, seed: int = 0,
             bit_width: int = 32) -> QuantizedUpdate:
    """Prune and quantize ``after - before``.

    An integer ``k`` is capped at each layer's parameter count; a sequence
    gives the cluster count of every layer explicitly.
    """
    delta = after - before
    sens = layer_sensitivity(before, after)
    keep = set(select_layers(sens, keep_fraction))
    ks = [k] * len(delta) if np.isscalar(k) else list(k)
    if len(ks) != len(delta):
        raise ValueError("need one cluster count per layer")
    entries = []
    for i, layer in enumerate(delta.layers):
        if i not in keep:
            entries.append(None)
            continue
        pool = layer.pooled()
        ki = min(int(ks[i]), pool.size) if np.isscalar(k) else int(ks[i])
        entries.append(kmeans_quantize(pool, ki, seed, bit_width=bit_width))
    return QuantizedUpdate(delta.dims, entries, float(dataset_size), bit_width)


def decode(u: QuantizedUpdate, reference: Optional[LayeredParams] = None) -> LayeredParams:
    """Server-side inverse: kept layers from their codebooks, dropped layers zero."""
    if reference is not None and [tuple(d) for d in u.dims] != reference.dims:
        raise ValueError(f"update dims {u.dims} do not match reference {reference.dims}")
    layers = []
    for (i, o), e in zip(u.dims, u.entries):
        n = i * o + o
        if e is None:
            flat = np.zeros(n)
        else:
            if e.n != n:
                raise ValueError("codebook length does not match layer size")
            if e.indices.size and (e.indices.min() < 0 or e.indices.max() >= e.k):
                raise ValueError("index out of codebook range")
            flat = e.decode()
        layers.append(Layer(flat[: i * o], flat[i * o:], i, o))
    return LayeredParams(layers)
