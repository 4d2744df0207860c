"""Serialized ternary models: canonical Huffman over ternary triples, gzip outermost.

Inner container layout (little-endian), wrapped in a single gzip member::

    magic     b"HQT1"
    version   u16
    flags     u16     bit 0: explicit float16 per-column scales follow the payload
    level     u8      gzip level used for the wrapper
    reserved  u8
    scale     f64     logit scale of the model
    nlayers   u16
    per layer: rows u32, cols u32, kind u8 (0 dense16, 1 ternary),
               activation u8 (0 relu, 1 identity), normalize_input u8
    lengths   27 x u8   code length per triple symbol (0 = unused)
    nsymbols  u64     ternary symbols in the stream, padding included
    padding   u8
    nbits     u64     Huffman payload length in bits
    payload   ceil(nbits / 8) bytes, MSB first
    dense     float16 weights of every dense layer, manifest order, column-major
    scales    (flag bit 0) float16 per column of every ternary layer
    crc32     u32     over everything above

Ternary symbols are laid out layer by layer, column by column, row by row.
Scales are not stored by default: a column with ``k`` non-zero symbols has
scale ``1/sqrt(k)`` by construction.
"""

from __future__ import annotations

import gzip
import heapq
import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quant import TernaryWeights, ternary
from .sphere import MlpModel, SphereLayer

MAGIC = b"HQT1"
VERSION = 1
FLAG_SCALES = 1
NUM_SYMBOLS = 27
_ACTS = ("relu", "identity")


class CodecError(ValueError):
    pass


def triple_index(a, b, c):
    return (np.asarray(a) + 1) * 9 + (np.asarray(b) + 1) * 3 + (np.asarray(c) + 1)


def triple_of(index: int) -> tuple[int, int, int]:
    return index // 9 - 1, (index // 3) % 3 - 1, index % 3 - 1


# -- stream ----------------------------------------------------------------------------

@dataclass
class TernaryStream:
    symbols: np.ndarray  # int8 in {-1, 0, 1}, padded to a multiple of 3
    shapes: list[tuple[int, int]] = field(default_factory=list)
    scales: list[np.ndarray] = field(default_factory=list)
    padding: int = 0

    def triples(self) -> np.ndarray:
        s = self.symbols.reshape(-1, 3)
        return triple_index(s[:, 0], s[:, 1], s[:, 2]).astype(np.int64)


def ternary_of_layer(layer: SphereLayer) -> TernaryWeights:
    """Signs and supports of a quantized layer's forward weights.

    Raises if the forward weights of the layer are not of the form
    ``{0, +-1/sqrt(k)}`` per column.
    """
    Weff = layer.effective_weights()
    t = ternary(Weff, 0.0)
    if not np.array_equal(t.values, Weff):
        raise CodecError(f"{layer.name}: layer is marked quantized but holds non-ternary values")
    return t


def pack_ternary(layers) -> TernaryStream:
    """Linearize a list of layers or ``TernaryWeights`` (or a whole model)."""
    if isinstance(layers, MlpModel):
        layers = layers.quantizable()
    parts, shapes, scales = [], [], []
    for item in layers:
        t = item if isinstance(item, TernaryWeights) else ternary_of_layer(item)
        parts.append(t.signs.ravel(order="F"))
        shapes.append(t.signs.shape)
        scales.append(t.scale)
    flat = np.concatenate(parts).astype(np.int8) if parts else np.zeros(0, dtype=np.int8)
    pad = (-flat.size) % 3
    flat = np.concatenate([flat, np.zeros(pad, dtype=np.int8)])
    return TernaryStream(flat, shapes, scales, pad)


def unpack_ternary(stream: TernaryStream) -> list[TernaryWeights]:
    need = sum(n * m for n, m in stream.shapes) + stream.padding
    if need != stream.symbols.size:
        raise CodecError(f"stream holds {stream.symbols.size} symbols, layout needs {need}")
    out, pos = [], 0
    for n, m in stream.shapes:
        signs = stream.symbols[pos:pos + n * m].reshape((n, m), order="F").astype(np.int8)
        out.append(TernaryWeights(signs=signs, support=np.count_nonzero(signs, axis=0)))
        pos += n * m
    return out


# -- Huffman ---------------------------------------------------------------------------

@dataclass
class TripleCodebook:
    lengths: np.ndarray  # (27,) code lengths, 0 for absent symbols
    frequencies: np.ndarray | None = None

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.lengths.shape != (NUM_SYMBOLS,):
            raise CodecError("codebook needs 27 code lengths")
        self.codes = canonical_codes(self.lengths)

    @property
    def symbols(self) -> list[int]:
        return [int(s) for s in np.flatnonzero(self.lengths)]

    def kraft_sum(self) -> float:
        used = self.lengths[self.lengths > 0]
        return float(np.sum(2.0 ** -used.astype(np.float64)))

    def expected_length(self) -> float:
        f = np.asarray(self.frequencies, dtype=np.float64)
        return float(np.sum(f * self.lengths) / f.sum()) if f.sum() else 0.0

    def code_string(self, symbol: int) -> str:
        L = int(self.lengths[symbol])
        return format(int(self.codes[symbol]), f"0{L}b") if L else ""


def huffman_lengths(freqs) -> np.ndarray:
    """Huffman code lengths for the given symbol counts (ties broken by symbol index)."""
    freqs = np.asarray(freqs, dtype=np.int64)
    lengths = np.zeros(freqs.size, dtype=np.int64)
    live = [int(s) for s in np.flatnonzero(freqs)]
    if not live:
        return lengths
    if len(live) == 1:
        lengths[live[0]] = 1
        return lengths
    heap = [(int(freqs[s]), s, (s,)) for s in live]
    heapq.heapify(heap)
    while len(heap) > 1:
        fa, ka, sa = heapq.heappop(heap)
        fb, kb, sb = heapq.heappop(heap)
        for s in sa + sb:
            lengths[s] += 1
        heapq.heappush(heap, (fa + fb, min(ka, kb), sa + sb))
    return lengths


def canonical_codes(lengths: np.ndarray) -> np.ndarray:
    codes = np.zeros(lengths.size, dtype=np.int64)
    code, prev = 0, 0
    for s in sorted(np.flatnonzero(lengths), key=lambda s: (lengths[s], s)):
        L = int(lengths[s])
        code <<= L - prev
        codes[s] = code
        code += 1
        prev = L
    return codes


def build_codebook(stream: TernaryStream | np.ndarray) -> TripleCodebook:
    triples = stream.triples() if isinstance(stream, TernaryStream) else np.asarray(stream, dtype=np.int64)
    freqs = np.bincount(triples, minlength=NUM_SYMBOLS)
    return TripleCodebook(huffman_lengths(freqs), freqs)


def encode(stream: TernaryStream | np.ndarray, codebook: TripleCodebook) -> tuple[bytes, int]:
    """Huffman-encode the triples; returns ``(payload, bit_length)``."""
    triples = stream.triples() if isinstance(stream, TernaryStream) else np.asarray(stream, dtype=np.int64)
    if triples.size == 0:
        return b"", 0
    lens = codebook.lengths[triples]
    if np.any(lens == 0):
        bad = int(triples[np.flatnonzero(lens == 0)[0]])
        raise CodecError(f"triple {triple_of(bad)} has no code in the codebook")
    codes = codebook.codes[triples]
    Lmax = int(lens.max())
    # bit j (from the left) of each code word, left-aligned in Lmax columns
    shifts = (lens[:, None] - 1 - np.arange(Lmax)[None, :])
    bits = (codes[:, None] >> np.maximum(shifts, 0)) & 1
    keep = shifts >= 0
    flat = bits[keep].astype(np.uint8)
    return np.packbits(flat).tobytes(), int(flat.size)


def decode(payload: bytes, codebook: TripleCodebook, count: int, nbits: int | None = None) -> np.ndarray:
    """Decode ``count`` triples; returns the triple indices."""
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8)).astype(np.int64)
    nbits = bits.size if nbits is None else nbits
    if nbits > bits.size:
        raise CodecError(f"payload truncated: {bits.size} bits present, {nbits} declared")
    bits = bits[:nbits]
    syms = np.flatnonzero(codebook.lengths)
    if syms.size == 0:
        raise CodecError("empty codebook cannot decode symbols")
    Lmax = int(codebook.lengths.max())
    padded = np.concatenate([bits, np.zeros(Lmax, dtype=np.int64)])
    window = np.zeros(nbits, dtype=np.int64)
    for j in range(Lmax):
        window = (window << 1) | padded[j:j + nbits]
    order = sorted(syms, key=lambda s: (codebook.lengths[s], s))
    starts = np.array([codebook.codes[s] << (Lmax - codebook.lengths[s]) for s in order])
    ends = np.array([(codebook.codes[s] + 1) << (Lmax - codebook.lengths[s]) for s in order])
    slot = np.searchsorted(starts, window, side="right") - 1
    valid = (slot >= 0) & (window < ends[np.maximum(slot, 0)])
    sym_at = np.asarray(order)[np.maximum(slot, 0)].tolist()
    len_at = codebook.lengths[np.asarray(order)][np.maximum(slot, 0)].tolist()
    valid = valid.tolist()
    out = np.empty(count, dtype=np.int64)
    pos = 0
    for i in range(count):
        if pos >= nbits:
            raise CodecError(f"payload truncated after {i} of {count} triples")
        if not valid[pos]:
            raise CodecError(f"invalid code word at bit {pos}")
        L = len_at[pos]
        if pos + L > nbits:
            raise CodecError(f"payload truncated inside triple {i}")
        out[i] = sym_at[pos]
        pos += L
    return out


def symbols_from_triples(triples: np.ndarray) -> np.ndarray:
    t = np.asarray(triples, dtype=np.int64)
    return np.stack([t // 9 - 1, (t // 3) % 3 - 1, t % 3 - 1], axis=1).ravel().astype(np.int8)


# -- container -------------------------------------------------------------------------

@dataclass
class LayerEntry:
    rows: int
    cols: int
    ternary: bool
    activation: str
    normalize_input: bool


@dataclass
class ModelFile:
    """Parsed contents of a model file."""

    version: int
    flags: int
    level: int
    logit_scale: float
    layers: list[LayerEntry]
    codebook: TripleCodebook
    num_symbols: int
    padding: int
    nbits: int
    payload: bytes
    dense: list[np.ndarray]
    scales: list[np.ndarray] | None
    inner_size: int
    file_size: int


def serialize_model(model: MlpModel, level: int = 9, explicit_scales: bool = False) -> bytes:
    """Serialize ``model``; non-exempt layers are stored ternary, exempt ones as float16."""
    if not model.layers:
        raise CodecError("cannot serialize an empty model")
    qlayers = [l for l in model.layers if not l.exempt]
    stream = pack_ternary(qlayers)
    cb = build_codebook(stream)
    payload, nbits = encode(stream, cb)
    buf = io.BytesIO()
    flags = FLAG_SCALES if explicit_scales else 0
    buf.write(MAGIC + struct.pack("<HHBBdH", VERSION, flags, level, 0, model.logit_scale, len(model.layers)))
    for l in model.layers:
        n, m = l.shape
        buf.write(struct.pack("<IIBBB", n, m, 0 if l.exempt else 1, _ACTS.index(l.activation),
                              int(l.normalize_input)))
    buf.write(cb.lengths.astype(np.uint8).tobytes())
    buf.write(struct.pack("<QBQ", stream.symbols.size, stream.padding, nbits))
    buf.write(payload)
    for l in model.layers:
        if l.exempt:
            buf.write(l.effective_weights().astype("<f2").tobytes(order="F"))
    if explicit_scales:
        for s in stream.scales:
            buf.write(s.astype("<f2").tobytes())
    body = buf.getvalue()
    body += struct.pack("<I", zlib.crc32(body))
    return gzip.compress(body, compresslevel=level, mtime=0)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CodecError(f"container truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_model_file(data: bytes) -> ModelFile:
    try:
        body = gzip.decompress(data)
    except (OSError, EOFError, zlib.error) as exc:
        raise CodecError(f"not a gzip container: {exc}") from None
    if len(body) < 8 or body[:4] != MAGIC:
        raise CodecError("bad magic; not an HQT1 model file")
    (crc,) = struct.unpack("<I", body[-4:])
    if zlib.crc32(body[:-4]) != crc:
        raise CodecError("checksum mismatch")
    r = _Reader(body[:-4])
    r.take(4)
    version, flags, level, _, scale, nlayers = r.unpack("<HHBBdH")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    layers = []
    for _ in range(nlayers):
        n, m, kind, act, norm_in = r.unpack("<IIBBB")
        layers.append(LayerEntry(n, m, bool(kind), _ACTS[act], bool(norm_in)))
    cb = TripleCodebook(np.frombuffer(r.take(NUM_SYMBOLS), dtype=np.uint8))
    nsym, pad, nbits = r.unpack("<QBQ")
    payload = r.take(math.ceil(nbits / 8))
    dense = []
    for e in layers:
        if not e.ternary:
            raw = np.frombuffer(r.take(2 * e.rows * e.cols), dtype="<f2")
            dense.append(raw.reshape((e.rows, e.cols), order="F"))
    scales = None
    if flags & FLAG_SCALES:
        scales = [np.frombuffer(r.take(2 * e.cols), dtype="<f2") for e in layers if e.ternary]
    if r.pos != len(r.data):
        raise CodecError(f"{len(r.data) - r.pos} trailing bytes in container")
    return ModelFile(version, flags, level, scale, layers, cb, nsym, pad, nbits, payload, dense,
                     scales, len(body), len(data))


def _decode_stream(mf: ModelFile) -> TernaryStream:
    if mf.num_symbols % 3:
        raise CodecError("symbol count is not a multiple of 3")
    triples = decode(mf.payload, mf.codebook, mf.num_symbols // 3, mf.nbits)
    shapes = [(e.rows, e.cols) for e in mf.layers if e.ternary]
    return TernaryStream(symbols_from_triples(triples), shapes, [], mf.padding)


def deserialize_model(data: bytes) -> MlpModel:
    mf = parse_model_file(data)
    tw = iter(unpack_ternary(_decode_stream(mf)))
    dense = iter(mf.dense)
    layers = []
    for i, e in enumerate(mf.layers):
        name = f"fc{i + 1}"
        if e.ternary:
            t = next(tw)
            layers.append(SphereLayer(V=t.values, activation=e.activation, mask=t.signs != 0,
                                      normalize_weights=False, normalize_input=e.normalize_input,
                                      exempt=False, quantized=True, delta=0.0, name=name))
        else:
            layers.append(SphereLayer(V=next(dense).astype(np.float64), activation=e.activation,
                                      normalize_weights=False, normalize_input=e.normalize_input,
                                      exempt=True, name=name))
    return MlpModel(layers, logit_scale=mf.logit_scale)


def save_model(path, model: MlpModel, level: int = 9) -> Path:
    path = Path(path)
    path.write_bytes(serialize_model(model, level))
    return path


def load_model(path) -> MlpModel:
    return deserialize_model(Path(path).read_bytes())


def compression_report(source) -> dict:
    """Sizes of a model file: bytes, bits per quantized weight, ratio, per-layer rows.

    ``ratio`` is the size of a dense 32-bit copy of every weight divided by the
    file size.  Per-layer payload bits attribute each triple to the layer of
    its first symbol.
    """
    data = Path(source).read_bytes() if not isinstance(source, (bytes, bytearray)) else bytes(source)
    mf = parse_model_file(data)
    if not mf.layers:
        raise CodecError("empty model: compression ratio undefined")
    total_params = sum(e.rows * e.cols for e in mf.layers)
    q_params = sum(e.rows * e.cols for e in mf.layers if e.ternary)
    triples = decode(mf.payload, mf.codebook, mf.num_symbols // 3, mf.nbits)
    tri_bits = mf.codebook.lengths[triples]
    owner = np.arange(triples.size) * 3
    rows, offset = [], 0
    for i, e in enumerate(mf.layers):
        n = e.rows * e.cols
        row = dict(layer=f"fc{i + 1}", rows=e.rows, cols=e.cols, params=n,
                   kind="ternary" if e.ternary else "dense16")
        if e.ternary:
            sel = (owner >= offset) & (owner < offset + n)
            row["payload_bits"] = int(tri_bits[sel].sum())
            row["raw_bytes"] = row["payload_bits"] / 8
            offset += n
        else:
            row["raw_bytes"] = 2 * n
        rows.append(row)
    dense32 = 4 * total_params
    return dict(
        file_bytes=mf.file_size,
        container_bytes=mf.inner_size,
        payload_bits=mf.nbits,
        quantized_params=q_params,
        total_params=total_params,
        bits_per_quantized_weight=mf.nbits / q_params if q_params else None,
        bits_per_weight=8 * mf.file_size / total_params,
        dense32_bytes=dense32,
        ratio=dense32 / mf.file_size,
        gzip_level=mf.level,
        layers=rows,
    )
