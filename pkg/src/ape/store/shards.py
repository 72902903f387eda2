"""Embedding shard files: the on-disk batches of paired samples.

Layout (little-endian):

  header (40 bytes):
    magic "APES" | version u32 = 1 | d_img u32 | d_tok u32 | max_seq u32
    | n_variants u32 | record_count u64 | reserved u64 = 0
  record:
    sample_id u64
    token_encodings  max_seq * d_tok   f32
    mask             max_seq bytes (0/1), zero-padded to a multiple of 8
    image_embeddings n_variants * d_img f32
    n_tokens u32
    token_ids        n_tokens u32

Shards are immutable after write. The reader validates everything it can:
magic/version, zero reserved word, mask bytes in {0, 1} with zero padding,
n_tokens equal to the set mask bits (and >= 1), finite floats, and an exact
byte count - any truncated or structurally corrupted file is rejected.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError

MAGIC = b"APES"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIQQ")  # 40 bytes
assert HEADER.size == 40


def _mask_field_len(max_seq: int) -> int:
    return ((max_seq + 7) // 8) * 8


@dataclass(frozen=True)
class ShardDims:
    d_img: int
    d_tok: int
    max_seq: int
    n_variants: int = 1

    def __post_init__(self):
        for name in ("d_img", "d_tok", "max_seq", "n_variants"):
            if getattr(self, name) < 1:
                raise DataError(f"shard dim {name} must be positive, got {getattr(self, name)}")

    def record_size(self, n_tokens: int) -> int:
        return (
            8
            + self.max_seq * self.d_tok * 4
            + _mask_field_len(self.max_seq)
            + self.n_variants * self.d_img * 4
            + 4
            + n_tokens * 4
        )


@dataclass
class SampleRecord:
    sample_id: int
    token_encodings: np.ndarray  # (max_seq, d_tok) f32
    mask: np.ndarray             # (max_seq,) bool
    image_embeddings: np.ndarray  # (n_variants, d_img) f32
    token_ids: np.ndarray        # (n_tokens,) u32

    def validate(self, dims: ShardDims, index: int):
        if self.token_encodings.shape != (dims.max_seq, dims.d_tok):
            raise DataError(
                f"record {index}: token matrix shape {self.token_encodings.shape}"
                f" != ({dims.max_seq}, {dims.d_tok})"
            )
        if self.mask.shape != (dims.max_seq,):
            raise DataError(f"record {index}: mask shape {self.mask.shape} != ({dims.max_seq},)")
        if self.image_embeddings.shape != (dims.n_variants, dims.d_img):
            raise DataError(
                f"record {index}: image shape {self.image_embeddings.shape}"
                f" != ({dims.n_variants}, {dims.d_img})"
            )
        n_valid = int(np.count_nonzero(self.mask))
        if n_valid < 1:
            raise DataError(f"record {index}: mask has no valid positions")
        if len(self.token_ids) != n_valid:
            raise DataError(
                f"record {index}: {len(self.token_ids)} token ids for {n_valid} valid positions"
            )


@dataclass
class ShardData:
    """A shard loaded into contiguous arrays, ready for batching."""

    dims: ShardDims
    sample_ids: np.ndarray   # (N,) u64
    tokens: np.ndarray       # (N, max_seq, d_tok) f32
    mask: np.ndarray         # (N, max_seq) bool
    images: np.ndarray       # (N, n_variants, d_img) f32
    token_ids: np.ndarray    # flat u32
    token_offsets: np.ndarray  # (N+1,) i64
    path: str = ""

    def __len__(self):
        return int(self.sample_ids.shape[0])

    def record(self, i: int) -> SampleRecord:
        lo, hi = self.token_offsets[i], self.token_offsets[i + 1]
        return SampleRecord(
            sample_id=int(self.sample_ids[i]),
            token_encodings=self.tokens[i],
            mask=self.mask[i],
            image_embeddings=self.images[i],
            token_ids=self.token_ids[lo:hi],
        )

    def records(self) -> list[SampleRecord]:
        return [self.record(i) for i in range(len(self))]


def write_shard(path, records, dims: ShardDims) -> None:
    """Write records to a shard file; rejects any record violating dims."""
    records = list(records)
    for i, rec in enumerate(records):
        rec.validate(dims, i)
    mask_len = _mask_field_len(dims.max_seq)
    with open(path, "wb") as fh:
        fh.write(
            HEADER.pack(
                MAGIC, VERSION, dims.d_img, dims.d_tok, dims.max_seq,
                dims.n_variants, len(records), 0,
            )
        )
        for rec in records:
            fh.write(struct.pack("<Q", rec.sample_id))
            fh.write(np.ascontiguousarray(rec.token_encodings, dtype="<f4").tobytes())
            mask_bytes = np.zeros(mask_len, dtype=np.uint8)
            mask_bytes[: dims.max_seq] = np.asarray(rec.mask, dtype=np.uint8)
            fh.write(mask_bytes.tobytes())
            fh.write(np.ascontiguousarray(rec.image_embeddings, dtype="<f4").tobytes())
            ids = np.ascontiguousarray(rec.token_ids, dtype="<u4")
            fh.write(struct.pack("<I", ids.size))
            fh.write(ids.tobytes())


def read_header(path) -> tuple[ShardDims, int]:
    """Dims and record count from the 40-byte header alone."""
    with open(path, "rb") as fh:
        blob = fh.read(HEADER.size)
    if len(blob) < HEADER.size:
        raise DataError(f"file too short for shard header: {path}")
    magic, version, d_img, d_tok, max_seq, n_variants, count, reserved = HEADER.unpack(blob)
    if magic != MAGIC or version != VERSION or reserved != 0:
        raise DataError(f"not a valid shard header: {path}")
    return ShardDims(d_img=d_img, d_tok=d_tok, max_seq=max_seq, n_variants=n_variants), count


def read_shard(path, check_finite: bool = True) -> ShardData:
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_shard(blob, path=str(path), check_finite=check_finite)


def parse_shard(blob: bytes, path: str = "", check_finite: bool = True) -> ShardData:
    where = f" in {path}" if path else ""
    if len(blob) < HEADER.size:
        raise DataError(f"file too short for shard header ({len(blob)} bytes){where}")
    magic, version, d_img, d_tok, max_seq, n_variants, count, reserved = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}{where}")
    if version != VERSION:
        raise DataError(f"unsupported shard version {version}{where}")
    if reserved != 0:
        raise DataError(f"nonzero reserved header word{where}")
    dims = ShardDims(d_img=d_img, d_tok=d_tok, max_seq=max_seq, n_variants=n_variants)
    mask_len = _mask_field_len(max_seq)
    tok_n = max_seq * d_tok
    img_n = n_variants * d_img

    sample_ids = np.empty(count, dtype=np.uint64)
    tokens = np.empty((count, max_seq, d_tok), dtype=np.float32)
    mask = np.empty((count, max_seq), dtype=bool)
    images = np.empty((count, n_variants, d_img), dtype=np.float32)
    all_ids = []
    offsets = np.zeros(count + 1, dtype=np.int64)

    pos = HEADER.size
    for i in range(count):
        fixed = 8 + tok_n * 4 + mask_len + img_n * 4 + 4
        if pos + fixed > len(blob):
            raise DataError(f"record {i} truncated{where}")
        (sample_ids[i],) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        tokens[i] = np.frombuffer(blob, dtype="<f4", count=tok_n, offset=pos).reshape(
            max_seq, d_tok
        )
        pos += tok_n * 4
        mbytes = np.frombuffer(blob, dtype=np.uint8, count=mask_len, offset=pos)
        pos += mask_len
        if np.any(mbytes[:max_seq] > 1):
            raise DataError(f"record {i}: mask byte outside {{0,1}}{where}")
        if np.any(mbytes[max_seq:] != 0):
            raise DataError(f"record {i}: nonzero mask padding{where}")
        mask[i] = mbytes[:max_seq].astype(bool)
        n_valid = int(np.count_nonzero(mask[i]))
        if n_valid < 1:
            raise DataError(f"record {i}: mask has no valid positions{where}")
        images[i] = np.frombuffer(blob, dtype="<f4", count=img_n, offset=pos).reshape(
            n_variants, d_img
        )
        pos += img_n * 4
        (n_tokens,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if n_tokens != n_valid:
            raise DataError(
                f"record {i}: n_tokens {n_tokens} != {n_valid} valid mask positions{where}"
            )
        if pos + n_tokens * 4 > len(blob):
            raise DataError(f"record {i} token ids truncated{where}")
        ids = np.frombuffer(blob, dtype="<u4", count=n_tokens, offset=pos)
        pos += n_tokens * 4
        all_ids.append(ids)
        offsets[i + 1] = offsets[i] + n_tokens
    if pos != len(blob):
        raise DataError(f"{len(blob) - pos} trailing bytes after last record{where}")

    flat_ids = np.concatenate(all_ids) if all_ids else np.empty(0, dtype=np.uint32)
    data = ShardData(
        dims=dims,
        sample_ids=sample_ids,
        tokens=tokens,
        mask=mask,
        images=images,
        token_ids=flat_ids,
        token_offsets=offsets,
        path=path,
    )
    if check_finite:
        for name, arr in (("token_encodings", tokens), ("image_embeddings", images)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite {name} values{where}")
    return data


def inspect_shard(path) -> dict:
    """Header fields, a content checksum and per-field stats for one shard."""
    with open(path, "rb") as fh:
        blob = fh.read()
    data = parse_shard(blob, path=str(path))
    info = {
        "path": str(path),
        "bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "version": VERSION,
        "d_img": data.dims.d_img,
        "d_tok": data.dims.d_tok,
        "max_seq": data.dims.max_seq,
        "n_variants": data.dims.n_variants,
        "records": len(data),
    }
    if len(data):
        valid = data.mask
        info["tokens_per_sample_mean"] = float(valid.sum(axis=1).mean())
        info["token_encoding_abs_mean"] = float(np.abs(data.tokens[valid]).mean())
        info["image_norm_mean"] = float(np.linalg.norm(data.images, axis=2).mean())
        info["token_id_max"] = int(data.token_ids.max()) if data.token_ids.size else 0
    return info


def concat_shards(shards: list[ShardData]) -> ShardData:
    """Stack same-dims shards into one in-memory set (a "shard set")."""
    if not shards:
        raise DataError("empty shard set")
    dims = shards[0].dims
    for s in shards[1:]:
        if s.dims != dims:
            raise DataError(f"shard dims differ: {s.dims} vs {dims} ({s.path})")
    offsets = [np.asarray([0], dtype=np.int64)]
    base = 0
    for s in shards:
        offsets.append(s.token_offsets[1:] + base)
        base += s.token_offsets[-1]
    return ShardData(
        dims=dims,
        sample_ids=np.concatenate([s.sample_ids for s in shards]),
        tokens=np.concatenate([s.tokens for s in shards]),
        mask=np.concatenate([s.mask for s in shards]),
        images=np.concatenate([s.images for s in shards]),
        token_ids=np.concatenate([s.token_ids for s in shards]),
        token_offsets=np.concatenate(offsets),
        path=";".join(s.path for s in shards),
    )


def write_index_list(path, sample_ids) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sample_ids:
            fh.write(f"{int(sid)}\n")


def read_index_list(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        return np.asarray([int(ln) for ln in lines], dtype=np.uint64)
    except ValueError as exc:
        raise DataError(f"malformed index list {path}: {exc}") from None
