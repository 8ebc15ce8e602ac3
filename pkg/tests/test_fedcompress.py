import itertools
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fogcache.fedcompress import (
    Codebook,
    LayerSensitivity,
    QuantizedUpdate,
    compress,
    compression_rate,
    decode,
    implementable_rate,
    index_bits,
    kmeans_quantize,
    layer_sensitivity,
    num_kept,
    pack_indices,
    select_layers,
    threshold,
    unpack_indices,
)
from fogcache.neural import DuelingNet, Layer, LayeredParams

GOLDEN = Path(__file__).parent / "golden" / "quantized_update.bin"


def params(seed, hidden=(6, 5)):
    return DuelingNet.create(7, 4, hidden, seed=seed).params


def perturbed(p, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    return p.from_flat(p.flat() + scale * rng.normal(size=p.num_params))


# -- sensitivity and selection ---------------------------------------------------


def test_sensitivity_zero_delta():
    p = params(0)
    np.testing.assert_array_equal(layer_sensitivity(p, p.copy()).values, 0.0)


def test_sensitivity_hand_example():
    before = LayeredParams([Layer([0.0, 0.0, 0.0], [0.0], 3, 1)])
    after = LayeredParams([Layer([1.0, -1.0, 2.0], [-2.0], 3, 1)])
    assert layer_sensitivity(before, after).values[0] == pytest.approx(1.5)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.01, 100), seed=st.integers(0, 1000))
def test_sensitivity_homogeneous(c, seed):
    p = params(0)
    q = perturbed(p, seed)
    s1 = layer_sensitivity(p, q).values
    s2 = layer_sensitivity(p, p + (q - p) * c).values
    np.testing.assert_allclose(s2, c * s1, rtol=1e-9)


def test_sensitivity_non_conformable():
    with pytest.raises(ValueError):
        layer_sensitivity(params(0), params(0, hidden=(6, 6)))


def test_sensitivity_weights_only_flag():
    before = LayeredParams([Layer([0.0, 0.0], [0.0], 2, 1)])
    after = LayeredParams([Layer([1.0, 1.0], [4.0], 2, 1)])
    assert layer_sensitivity(before, after, pool_biases=False).values[0] == 1.0
    assert layer_sensitivity(before, after).values[0] == 2.0


def test_select_layers_example():
    s = LayerSensitivity(np.array([0.5, 0.1, 0.9, 0.2]))
    assert select_layers(s, 0.5) == [0, 2]  # layers 3 and 1, 1-indexed
    assert select_layers(s, 1.0) == [0, 1, 2, 3]


def test_select_ties_prefer_lower_index():
    s = LayerSensitivity(np.array([0.3, 0.3, 0.3, 0.3]))
    assert select_layers(s, 0.5) == [0, 1]


@pytest.mark.parametrize("L,keep,expected", [(4, 0.9, 4), (4, 0.8, 4), (5, 0.8, 4), (10, 0.8, 8), (10, 0.9, 9), (4, 0.01, 1)])
def test_num_kept(L, keep, expected):
    assert num_kept(L, keep) == expected


def test_num_kept_rejects():
    with pytest.raises(ValueError):
        num_kept(4, 0.0)
    with pytest.raises(ValueError):
        num_kept(4, 1.1)


@settings(max_examples=60, deadline=None)
@given(vals=st.lists(st.floats(0, 10), min_size=1, max_size=12), keep=st.floats(0.01, 1.0))
def test_select_layers_properties(vals, keep):
    s = LayerSensitivity(np.array(vals))
    kept = select_layers(s, keep)
    assert len(kept) == math.ceil(keep * len(vals) - 1e-9) or len(kept) == 1
    dropped = [i for i in range(len(vals)) if i not in kept]
    if dropped:
        assert min(vals[i] for i in kept) >= max(vals[i] for i in dropped)
        assert threshold(s, kept) == max(vals[i] for i in dropped)


# -- k-means --------------------------------------------------------------------


def test_kmeans_constant_data():
    cb = kmeans_quantize(np.full(9, 0.25), 1)
    np.testing.assert_array_equal(cb.decode(), 0.25)


def test_kmeans_two_clusters():
    cb = kmeans_quantize([0, 0.1, 10, 10.1], 2)
    np.testing.assert_allclose(cb.centroids, [0.05, 10.05])
    np.testing.assert_array_equal(cb.indices, [0, 0, 1, 1])


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans_quantize([], 1)
    with pytest.raises(ValueError):
        kmeans_quantize([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        kmeans_quantize([1.0, 2.0], 0)


def best_partition_sse(x, k):
    """Exhaustive search over all labelings (small n only)."""
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        sse = sum(((x[labels == j] - x[labels == j].mean()) ** 2).sum() for j in set(labels.tolist()))
        best = min(best, sse)
    return best


@pytest.mark.parametrize("seed", range(100))
def test_kmeans_beats_random_assignment(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 13))
    k = int(rng.integers(1, min(n, 4) + 1))
    x = rng.normal(size=n)
    cb = kmeans_quantize(x, k, rng_seed=seed)
    labels = rng.integers(k, size=n)
    rand_sse = sum(((x[labels == j] - x[labels == j].mean()) ** 2).sum() for j in set(labels.tolist()))
    assert cb.sse(x) <= rand_sse + 1e-12
    if n <= 8 and k <= 3:
        assert cb.sse(x) >= best_partition_sse(x, k) - 1e-12


def test_kmeans_deterministic():
    x = np.random.default_rng(1).normal(size=500)
    a = kmeans_quantize(x, 16, rng_seed=3)
    b = kmeans_quantize(x, 16, rng_seed=3)
    assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.indices, b.indices)


def test_kmeans_nearest_centroid_assignment():
    x = np.random.default_rng(2).standard_t(3, size=2000)
    cb = kmeans_quantize(x, 8)
    dist = np.abs(x[:, None] - cb.centroids[None, :])
    np.testing.assert_allclose(dist[np.arange(x.size), cb.indices], dist.min(axis=1))


def test_kmeans_handles_duplicates_and_empty_clusters():
    x = np.array([0.0] * 10 + [1.0])
    cb = kmeans_quantize(x, 5)
    assert cb.k == 5 and cb.indices.max() < 5
    np.testing.assert_allclose(cb.decode(), x)


# -- compression rate -----------------------------------------------------------


def test_rate_worked_example():
    assert compression_rate(16, 32, 4) == 3.2


def test_rate_single_cluster():
    assert compression_rate(16, 32, 1) == 16.0


def test_rate_direct_substitution():
    assert compression_rate(1024, 32, 32) == pytest.approx(32768 / 6144, rel=1e-15)


@pytest.mark.parametrize("bad", [(3, 32, 4), (4, 0, 2), (4, 32, 0)])
def test_rate_domain(bad):
    with pytest.raises(ValueError):
        compression_rate(*bad)


def test_implementable_rate_rounds_index_bits():
    assert implementable_rate(16, 32, 4) == 3.2
    assert implementable_rate(100, 32, 5) == pytest.approx(3200 / (300 + 160))
    assert index_bits(1) == 0 and index_bits(2) == 1 and index_bits(5) == 3 and index_bits(64) == 6


# -- compress / decode ----------------------------------------------------------------


def test_identity_codebook_round_trip():
    p = params(1)
    q = perturbed(p, 2)
    sizes = [l.size for l in p.layers]
    u = compress(p, q, 1.0, sizes, dataset_size=10)
    np.testing.assert_allclose(decode(u, p).flat(), (q - p).flat(), atol=1e-15)
    assert u.bit_cost >= u.raw_bits  # degenerate: codebook as large as the data


def test_zero_delta():
    p = params(1)
    u = compress(p, p.copy(), 0.5, 4, dataset_size=1)
    assert u.kept == [True, True, False, False]  # all-zero sensitivities: lowest indices
    assert decode(u, p).norm() == 0


def test_all_dropped_decodes_to_zero():
    p = params(1)
    u = compress(p, perturbed(p, 0), 0.5, 4, dataset_size=1)
    u.entries = [None] * len(u.entries)
    assert decode(u, p).norm() == 0
    assert u.bit_cost == 0


@pytest.mark.parametrize("seed", range(50))
def test_reconstruction_error_non_increasing_in_k(seed):
    p = params(seed)
    q = perturbed(p, seed + 1)
    delta = (q - p).flat()
    errs = []
    for k in (1, 2, 4, 8, 16):
        u = compress(p, q, 1.0, k, dataset_size=1, seed=seed)
        errs.append(float(((decode(u, p).flat() - delta) ** 2).sum()))
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_bit_accounting_exact():
    p = params(3)
    q = perturbed(p, 4)
    u = compress(p, q, 0.75, 5, dataset_size=7)
    for (i, o), e in zip(u.dims, u.entries):
        if e is not None:
            n = i * o + o
            assert e.payload_bits == n * 3 + 5 * 32
    assert u.bit_cost == sum(e.payload_bits for e in u.entries if e is not None)


def test_decode_preserves_layer_mean():
    p = params(5)
    q = perturbed(p, 6)
    u = compress(p, q, 1.0, 4, dataset_size=1)
    dec = decode(u, p)
    delta = q - p
    for e, a, b in zip(u.entries, delta.layers, dec.layers):
        radius = np.max(np.abs(a.pooled() - b.pooled()))
        assert abs(a.pooled().mean() - b.pooled().mean()) <= radius + 1e-15


def test_decode_checks_shapes():
    p = params(1)
    u = compress(p, perturbed(p, 0), 1.0, 4, dataset_size=1)
    with pytest.raises(ValueError):
        decode(u, params(1, hidden=(6, 6)))
    u.entries[0].indices[0] = 99
    with pytest.raises(ValueError):
        decode(u, p)


# -- wire format ----------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(width=st.integers(1, 12), data=st.data())
def test_pack_round_trip(width, data):
    n = data.draw(st.integers(0, 200))
    idx = np.array(data.draw(st.lists(st.integers(0, 2 ** width - 1), min_size=n, max_size=n)), dtype=np.int64)
    buf = pack_indices(idx, width)
    assert len(buf) == (n * width + 7) // 8
    np.testing.assert_array_equal(unpack_indices(buf, n, width), idx)


def test_pack_known_bytes():
    # 3-bit indices 5, 3 packed little-endian: bits 101 110 -> 0b00011101
    assert pack_indices(np.array([5, 3]), 3) == bytes([0b00011101])


def golden_update():
    p = params(11)
    q = perturbed(p, 12)
    return compress(p, q, 0.75, 8, dataset_size=123, seed=5)


def test_serialization_round_trip():
    u = golden_update()
    data = u.to_bytes()
    v = QuantizedUpdate.from_bytes(data)
    assert v.to_bytes() == data
    np.testing.assert_array_equal(decode(v).flat(), decode(u).flat())
    assert v.bit_cost == u.bit_cost and v.dataset_size == 123


def test_golden_bytes():
    data = GOLDEN.read_bytes()
    u = QuantizedUpdate.from_bytes(data)
    assert u.to_bytes() == data
    assert golden_update().to_bytes() == data


def test_from_bytes_rejects_trailing():
    data = golden_update().to_bytes()
    with pytest.raises(ValueError):
        QuantizedUpdate.from_bytes(data + b"\x00")
