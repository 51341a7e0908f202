"""On-disk formats: byte tokenizer, weight/predictor/n-gram binaries, pool
directories, JSONL corpora and metrics JSON.

Binary layout shared by the weights (``SPT1``) and predictor (``SPRD``) files::

    magic        4 bytes
    header       little-endian u32 fields
    payload      little-endian float64, row-major, fixed tensor order
    crc32        little-endian u32 over the payload bytes

Weights header: num_layers, num_heads, d_model, vocab_size, max_positions,
ffn_mult.  Tensor order is ``ModelConfig.tensor_shapes()``: tok_emb,
pos_emb, then per layer ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1,
w2, b2, then lnf_g, lnf_b, w_out.

Predictor header: input_dim, hidden_dim, output_dim; payload W1, b1, W2, b2,
W3, b3.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadMagic, CrcMismatch, ShapeMismatch
from .scheduler import CostProfile, MatchPredictor, TrainSample, NUM_OUTPUTS
from .speculator import NgramSSM, NgramTable, TransformerSSM
from .transformer import ModelConfig, ModelWeights

WEIGHTS_MAGIC = b"SPT1"
PREDICTOR_MAGIC = b"SPRD"
NGRAM_MAGIC = b"SPNG"
NGRAM_VERSION = 1
POOL_MANIFEST = "manifest.json"


class ByteTokenizer:
    BOS = 256
    EOS = 257
    vocab_size = 258

    def tokenize(self, text: bytes | str) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return [self.BOS, *text]

    def detokenize(self, tokens: Iterable[int]) -> bytes:
        return bytes(t for t in tokens if t < 256)


def _pack(magic: bytes, header: Sequence[int], payload: np.ndarray) -> bytes:
    body = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    return magic + struct.pack(f"<{len(header)}I", *header) + body + struct.pack("<I", zlib.crc32(body))


def _unpack(data: bytes, magic: bytes, n_header: int) -> tuple[tuple[int, ...], bytes]:
    if data[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {data[:4]!r}")
    head_end = 4 + 4 * n_header
    if len(data) < head_end + 4:
        raise ShapeMismatch("file too short for header")
    header = struct.unpack(f"<{n_header}I", data[4:head_end])
    return header, data[head_end:]


def _check_payload(rest: bytes, expected_floats: int) -> np.ndarray:
    if len(rest) != 8 * expected_floats + 4:
        raise ShapeMismatch(f"payload holds {(len(rest) - 4) / 8:g} floats, expected {expected_floats}")
    body, (crc,) = rest[:-4], struct.unpack("<I", rest[-4:])
    if zlib.crc32(body) != crc:
        raise CrcMismatch("payload checksum does not match")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def weights_to_bytes(weights: ModelWeights) -> bytes:
    c = weights.config
    header = (c.num_layers, c.num_heads, c.d_model, c.vocab_size, c.max_positions, c.ffn_mult)
    return _pack(WEIGHTS_MAGIC, header, weights.flat())


def weights_from_bytes(data: bytes) -> ModelWeights:
    header, rest = _unpack(data, WEIGHTS_MAGIC, 6)
    config = ModelConfig(*header)
    return ModelWeights.from_flat(config, _check_payload(rest, config.num_parameters()))


def save_weights(path, weights: ModelWeights) -> None:
    Path(path).write_bytes(weights_to_bytes(weights))


def load_weights(path) -> ModelWeights:
    return weights_from_bytes(Path(path).read_bytes())


def save_predictor(path, p: MatchPredictor) -> None:
    flat = np.concatenate([t.ravel() for t in p.params()])
    Path(path).write_bytes(_pack(PREDICTOR_MAGIC, (p.input_dim, p.hidden_dim, p.weights[-1].shape[1]), flat))


def load_predictor(path) -> MatchPredictor:
    header, rest = _unpack(Path(path).read_bytes(), PREDICTOR_MAGIC, 3)
    d_in, hidden, d_out = header
    if d_out != NUM_OUTPUTS:
        raise ShapeMismatch(f"predictor has {d_out} outputs, expected {NUM_OUTPUTS}")
    dims = [d_in, hidden, hidden, d_out]
    shapes = [s for a, b in zip(dims, dims[1:]) for s in ((a, b), (b,))]
    flat = _check_payload(rest, sum(int(np.prod(s)) for s in shapes))
    tensors, offset = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        tensors.append(flat[offset:offset + n].reshape(shape).copy())
        offset += n
    return MatchPredictor(tensors[0::2], tensors[1::2])


def ngram_to_bytes(table: NgramTable) -> bytes:
    """``SPNG`` | u32 version, order, vocab | f64 alpha | u32 n_contexts |
    per context: u32 tokens[order-1], u32 nnz, nnz * (u32 token, f64 count) |
    u32 crc32 of everything after the magic."""
    parts = [struct.pack("<3Id", NGRAM_VERSION, table.order, table.vocab_size, table.alpha),
             struct.pack("<I", len(table.counts))]
    for ctx in sorted(table.counts):
        row = table.counts[ctx]
        nz = np.flatnonzero(row)
        parts.append(struct.pack(f"<{len(ctx)}I", *ctx))
        parts.append(struct.pack("<I", len(nz)))
        parts.extend(struct.pack("<Id", int(t), float(row[t])) for t in nz)
    body = b"".join(parts)
    return NGRAM_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def ngram_from_bytes(data: bytes) -> NgramTable:
    if data[:4] != NGRAM_MAGIC:
        raise BadMagic(f"expected magic {NGRAM_MAGIC!r}, found {data[:4]!r}")
    body, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CrcMismatch("n-gram checksum does not match")
    version, order, vocab, alpha = struct.unpack_from("<3Id", body, 0)
    if version != NGRAM_VERSION:
        raise ValueError(f"unsupported n-gram version {version}")
    offset = struct.calcsize("<3Id")
    (n_ctx,) = struct.unpack_from("<I", body, offset)
    offset += 4
    table = NgramTable(order, vocab, alpha)
    for _ in range(n_ctx):
        ctx = struct.unpack_from(f"<{order - 1}I", body, offset)
        offset += 4 * (order - 1)
        (nnz,) = struct.unpack_from("<I", body, offset)
        offset += 4
        row = np.zeros(vocab)
        for _ in range(nnz):
            tok, count = struct.unpack_from("<Id", body, offset)
            offset += struct.calcsize("<Id")
            row[tok] = count
        table.counts[tuple(ctx)] = row
    if offset != len(body):
        raise ShapeMismatch("trailing bytes in n-gram file")
    return table


def save_pool(directory, ssms: Sequence, mark_horizon=None, residual_counts: Sequence[int] = ()) -> None:
    """Write one file per SSM plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for ssm in ssms:
        if ssm.kind == "ngram":
            name = f"ssm_{ssm.id}.ngram"
            (directory / name).write_bytes(ngram_to_bytes(ssm.table))
        elif ssm.kind == "transformer":
            name = f"ssm_{ssm.id}.spt"
            save_weights(directory / name, ssm.weights)
        else:
            raise ValueError(f"cannot serialize SSM kind {ssm.kind!r}")
        entries.append({"id": ssm.id, "kind": ssm.kind, "file": name})
    manifest = {
        "version": 1,
        "mark_horizon": mark_horizon if mark_horizon is None or np.isfinite(mark_horizon) else "inf",
        "residual_counts": list(residual_counts),
        "ssms": entries,
    }
    (directory / POOL_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def load_pool(directory) -> tuple[list, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / POOL_MANIFEST).read_text())
    ssms = []
    for entry in manifest["ssms"]:
        path = directory / entry["file"]
        if entry["kind"] == "ngram":
            ssms.append(NgramSSM(ngram_from_bytes(path.read_bytes()), id=entry["id"]))
        elif entry["kind"] == "transformer":
            ssms.append(TransformerSSM(load_weights(path), id=entry["id"]))
        else:
            raise ValueError(f"unknown SSM kind {entry['kind']!r}")
    return ssms, manifest


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_prompts(path) -> list[str]:
    return [row["prompt"] for row in read_jsonl(path)]


def save_samples(path, samples: Iterable[TrainSample]) -> None:
    write_jsonl(path, ({"h": [float(v) for v in s.h], "y": [float(v) for v in s.y]} for s in samples))


def load_samples(path) -> list[TrainSample]:
    return [TrainSample(np.array(r["h"], dtype=np.float64), np.array(r["y"], dtype=np.float64))
            for r in read_jsonl(path)]


def save_profile(path, profile: CostProfile) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2) + "\n")


def load_profile(path) -> CostProfile:
    return CostProfile.from_dict(json.loads(Path(path).read_text()))


METRICS_KEYS = ("mode", "prompts", "llm_steps", "ssm_runs", "tokens_generated", "verified_per_step",
                "wall_ms", "mismatches")


def metrics_record(mode: str, prompts: int, metrics, mismatches: int = 0) -> dict:
    return {
        "mode": mode,
        "prompts": prompts,
        "llm_steps": metrics.llm_steps,
        "ssm_runs": metrics.ssm_runs,
        "tokens_generated": metrics.tokens_generated,
        "verified_per_step": metrics.verified_per_step,
        "wall_ms": metrics.wall_ms,
        "mismatches": mismatches,
    }


def write_metrics(path, record: dict) -> None:
    Path(path).write_text(json.dumps(record, indent=2) + "\n")
