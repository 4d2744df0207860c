import gzip
import math
import struct
import zlib

import numpy as np
import pytest

from hyperquant import codec
from hyperquant.codec import (CodecError, TernaryStream, build_codebook, compression_report, decode,
                              deserialize_model, encode, pack_ternary, parse_model_file,
                              serialize_model, unpack_ternary)
from hyperquant.quant import TernaryWeights, reinitialize, ternary
from hyperquant.sphere import MlpModel, SphereLayer, build_mlp


def tw(signs):
    signs = np.asarray(signs, dtype=np.int8)
    return TernaryWeights(signs=signs, support=np.count_nonzero(signs, axis=0))


def random_stream(rng, n, p0=0.8):
    p = [(1 - p0) / 2, p0, (1 - p0) / 2]
    return rng.choice([-1, 0, 1], size=n, p=p).astype(np.int8)


def entropy_bits(freqs):
    p = np.asarray(freqs, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log2(p)).sum())


def quantized_model(rng, sizes=(12, 9, 7, 4), sparsity=0.6, exempt_first=False, exempt_last=True):
    model = build_mlp(sizes, rng, exempt_first=exempt_first, exempt_last=exempt_last)
    for layer in model.quantizable():
        keep = rng.random(layer.shape) >= sparsity
        keep[rng.integers(layer.shape[0], size=layer.shape[1]), np.arange(layer.shape[1])] = True
        layer.mask = keep
        layer.V = reinitialize(layer.W, keep)
        layer.quantized = True
    return model


# -- packing -------------------------------------------------------------------------

def test_pack_pads_with_zeros():
    s = pack_ternary([tw([[1, 0, -1, 1]])])
    assert s.symbols.tolist() == [1, 0, -1, 1, 0, 0]
    assert s.padding == 2


def test_pack_column_major_order():
    s = pack_ternary([tw([[1, -1], [0, 1], [-1, 0]])])
    assert s.symbols.tolist() == [1, 0, -1, -1, 1, 0]


def test_pack_empty():
    s = pack_ternary([])
    assert s.symbols.size == 0 and s.padding == 0
    assert build_codebook(s).symbols == []
    assert encode(s, build_codebook(s)) == (b"", 0)
    assert decode(b"", build_codebook(s), 0).size == 0


def test_pack_unpack_roundtrip(rng):
    layers = [tw(rng.integers(-1, 2, size=(n, m))) for n, m in [(5, 3), (7, 2), (1, 1)]]
    out = unpack_ternary(pack_ternary(layers))
    for a, b in zip(layers, out):
        assert np.array_equal(a.signs, b.signs)
        assert np.array_equal(a.scale, b.scale)


def test_pack_rejects_non_ternary_layer(rng):
    layer = SphereLayer(V=rng.normal(size=(4, 3)), name="x")
    with pytest.raises(CodecError, match="non-ternary"):
        pack_ternary([layer])


def test_unpack_detects_layout_mismatch():
    s = pack_ternary([tw([[1, 0, -1]])])
    s.shapes = [(2, 2)]
    with pytest.raises(CodecError):
        unpack_ternary(s)


# -- Huffman -------------------------------------------------------------------------

def test_all_zero_stream_gets_one_bit_code():
    cb = build_codebook(pack_ternary([tw(np.zeros((6, 2)))]))
    assert cb.symbols == [codec.triple_index(0, 0, 0)]
    assert cb.lengths[cb.symbols[0]] == 1
    payload, nbits = encode(pack_ternary([tw(np.zeros((6, 2)))]), cb)
    assert nbits == 4


def test_entropy_bound_sparse_stream(rng):
    s = TernaryStream(random_stream(rng, 30000, p0=0.8))
    cb = build_codebook(s)
    H = entropy_bits(cb.frequencies)
    assert H <= cb.expected_length() < H + 1
    assert abs(H - 3 * 0.9219) < 0.05


def test_uniform_stream_code_lengths(rng):
    triples = np.repeat(np.arange(27), 40)
    cb = build_codebook(triples)
    assert cb.lengths.max() <= 5
    assert cb.expected_length() <= math.log2(27) + 1


def test_prefix_free_and_kraft(rng):
    for _ in range(20):
        freqs = rng.integers(0, 50, size=27)
        freqs[rng.integers(27)] += 1
        triples = np.repeat(np.arange(27), freqs)
        cb = build_codebook(triples)
        codes = [cb.code_string(s) for s in cb.symbols]
        for a in codes:
            for b in codes:
                assert a == b or not b.startswith(a)
        if len(cb.symbols) > 1:
            assert cb.kraft_sum() == pytest.approx(1.0, abs=1e-12)
        H = entropy_bits(cb.frequencies)
        assert cb.expected_length() < H + 1


def test_roundtrip_9999_symbols(rng):
    s = TernaryStream(random_stream(rng, 9999, p0=0.5))
    cb = build_codebook(s)
    payload, nbits = encode(s, cb)
    assert np.array_equal(decode(payload, cb, 3333, nbits), s.triples())
    assert nbits == int(np.sum(cb.frequencies * cb.lengths))
    assert len(payload) == math.ceil(nbits / 8)


def test_encode_unknown_triple():
    cb = build_codebook(np.array([0, 0, 1]))
    with pytest.raises(CodecError, match="no code"):
        encode(np.array([0, 5]), cb)


def test_decode_truncated(rng):
    s = TernaryStream(random_stream(rng, 300))
    cb = build_codebook(s)
    payload, nbits = encode(s, cb)
    with pytest.raises(CodecError, match="truncated"):
        decode(payload[: len(payload) // 2], cb, 100, nbits)
    with pytest.raises(CodecError, match="truncated"):
        decode(payload, cb, 100, nbits - 1)


def test_decode_invalid_code_word():
    # lengths {1, 2} leave code "11" unassigned
    lengths = np.zeros(27, dtype=int)
    lengths[[0, 1]] = 1, 2
    cb = codec.TripleCodebook(lengths)
    with pytest.raises(CodecError, match="invalid"):
        decode(bytes([0b11000000]), cb, 1, 2)


def test_sparse_streams_beat_two_bits(rng):
    for p0 in (0.7, 0.8, 0.9):
        s = TernaryStream(random_stream(rng, 12000, p0=p0))
        _, nbits = encode(s, build_codebook(s))
        assert nbits / s.symbols.size < 2.0


# -- container -----------------------------------------------------------------------

def test_serialize_roundtrip_outputs(rng):
    model = quantized_model(rng)
    blob = serialize_model(model)
    back = deserialize_model(blob)
    x = rng.normal(size=(12, 5))
    for a, b in zip(model.quantizable(), back.quantizable()):
        assert np.array_equal(a.effective_weights(), b.effective_weights())
    dense = model.layers[-1].effective_weights()
    assert np.allclose(back.layers[-1].V, dense, rtol=1e-3, atol=1e-4)
    assert np.allclose(model.forward(x), back.forward(x), rtol=1e-2, atol=1e-2)
    # exact once the exempt layer holds float16 values
    model.layers[-1].V = model.layers[-1].effective_weights().astype(np.float16).astype(np.float64)
    model.layers[-1].normalize_weights = False
    assert np.array_equal(model.forward(x), back.forward(x))


def test_reserialize_byte_identical(rng):
    blob = serialize_model(quantized_model(rng))
    assert serialize_model(deserialize_model(blob)) == blob


def test_explicit_scales_flag(rng):
    model = quantized_model(rng)
    mf = parse_model_file(serialize_model(model, explicit_scales=True))
    assert mf.flags & codec.FLAG_SCALES
    for s, layer in zip(mf.scales, model.quantizable()):
        assert np.allclose(s, ternary(layer.effective_weights()).scale, rtol=1e-3)


def test_bad_magic_and_checksum(rng):
    blob = serialize_model(quantized_model(rng))
    body = bytearray(gzip.decompress(blob))
    bad = bytearray(body)
    bad[:4] = b"XXXX"
    with pytest.raises(CodecError, match="magic"):
        parse_model_file(gzip.compress(bytes(bad)))
    flipped = bytearray(body)
    flipped[10] ^= 0xFF
    with pytest.raises(CodecError, match="checksum"):
        parse_model_file(gzip.compress(bytes(flipped)))
    with pytest.raises(CodecError, match="gzip"):
        parse_model_file(b"not a model")


def test_bad_version(rng):
    body = bytearray(gzip.decompress(serialize_model(quantized_model(rng))))
    body[4:6] = struct.pack("<H", 99)
    body[-4:] = struct.pack("<I", zlib.crc32(bytes(body[:-4])))
    with pytest.raises(CodecError, match="version"):
        parse_model_file(gzip.compress(bytes(body)))


def test_serialize_is_deterministic(rng):
    model = quantized_model(rng)
    assert serialize_model(model) == serialize_model(model)


def test_empty_model_rejected():
    with pytest.raises(CodecError):
        serialize_model(MlpModel([]))


def test_report_sizes(tmp_path, rng):
    model = quantized_model(rng)
    path = tmp_path / "m.hqt"
    codec.save_model(path, model)
    rep = compression_report(path)
    assert rep["file_bytes"] == path.stat().st_size
    dense = [r for r in rep["layers"] if r["kind"] == "dense16"]
    assert dense and all(r["raw_bytes"] == 2 * r["params"] for r in dense)
    assert rep["ratio"] == pytest.approx(4 * model.num_params / path.stat().st_size)
    assert sum(r["payload_bits"] for r in rep["layers"] if r["kind"] == "ternary") == rep["payload_bits"]
    assert np.array_equal(codec.load_model(path).layers[0].effective_weights(),
                          model.layers[0].effective_weights())
