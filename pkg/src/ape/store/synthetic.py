"""Synthetic paired-embedding generator with a known ground truth.

Each sample owns a latent z ~ N(0, I_k). The image embedding is
normalize(A z + noise). Token position t sees gamma_t * (B z) + noise, with
gamma_t > 0 a fixed per-position scale; when the nonlinear flag is set the
whole token encoding is passed through tanh with a fixed random offset.

Because every position is a positive scalar multiple of the same B z, the
masked mean over any valid subset of positions stays proportional to B z.
With zero noise and the nonlinearity off, a single affine layer (W = A B^+)
therefore reproduces the image direction exactly - the linearly recoverable
regime the oracle tests rely on.

Token ids quantize latent coordinates: position t encodes coordinate
t mod k into one of ``quant_buckets`` buckets, so a lookup-table baseline
sees a coarse, partial view of the latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .shards import SampleRecord, ShardData, ShardDims

_QUANT_RANGE = 3.0  # latent coords quantized over [-3, 3]


@dataclass(frozen=True)
class SyntheticSpec:
    latent_dim: int
    d_img: int
    d_tok: int
    max_seq: int
    n_train: int
    noise: float = 0.0
    nonlinear: bool = False
    seed: int = 0
    n_test: int = 512
    quant_buckets: int = 16

    def __post_init__(self):
        if min(self.latent_dim, self.d_img, self.d_tok, self.max_seq, self.n_train) < 1:
            raise ValueError("all synthetic dims and counts must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @property
    def vocab_size(self) -> int:
        return self.max_seq * self.quant_buckets


def synthetic_maps(spec: SyntheticSpec):
    """The fixed latent-to-embedding maps for a seed: (A, B, gamma, offset)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0])))
    a = rng.normal(0.0, 1.0 / np.sqrt(spec.latent_dim), size=(spec.d_img, spec.latent_dim))
    b = rng.normal(0.0, 1.0 / np.sqrt(spec.latent_dim), size=(spec.d_tok, spec.latent_dim))
    gamma = rng.uniform(0.6, 1.4, size=spec.max_seq)
    offset = rng.normal(0.0, 0.2, size=spec.d_tok)
    return a, b, gamma, offset


def _make_split(spec: SyntheticSpec, n: int, id_base: int, stream: int) -> ShardData:
    a, b, gamma, offset = synthetic_maps(spec)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, stream])))
    k, t_max, q = spec.latent_dim, spec.max_seq, spec.quant_buckets

    z = rng.normal(size=(n, k))
    img = z @ a.T
    if spec.noise > 0:
        img = img + spec.noise * rng.normal(size=img.shape)
    img /= np.linalg.norm(img, axis=1, keepdims=True)

    # (n, T, d_tok): per-position positive rescaling of the shared map
    base = z @ b.T
    toks = gamma[None, :, None] * base[:, None, :]
    if spec.noise > 0:
        toks = toks + spec.noise * rng.normal(size=toks.shape)
    if spec.nonlinear:
        toks = np.tanh(toks + offset[None, None, :])

    min_len = max(1, (t_max + 1) // 2)
    lengths = rng.integers(min_len, t_max + 1, size=n)
    mask = np.arange(t_max)[None, :] < lengths[:, None]
    toks = np.where(mask[:, :, None], toks, 0.0).astype(np.float32)

    coord = np.arange(t_max) % k
    buckets = np.clip(
        ((z[:, coord] + _QUANT_RANGE) / (2 * _QUANT_RANGE) * q).astype(np.int64), 0, q - 1
    )
    ids = (np.arange(t_max)[None, :] * q + buckets).astype(np.uint32)

    records = []
    for i in range(n):
        records.append(
            SampleRecord(
                sample_id=id_base + i,
                token_encodings=toks[i],
                mask=mask[i],
                image_embeddings=img[i].astype(np.float32)[None, :],
                token_ids=ids[i, : lengths[i]],
            )
        )
    dims = ShardDims(d_img=spec.d_img, d_tok=spec.d_tok, max_seq=t_max, n_variants=1)
    return _records_to_data(records, dims)


def _records_to_data(records, dims: ShardDims) -> ShardData:
    n = len(records)
    tokens = np.stack([r.token_encodings for r in records]) if n else np.empty((0, dims.max_seq, dims.d_tok), np.float32)
    mask = np.stack([r.mask for r in records]) if n else np.empty((0, dims.max_seq), bool)
    images = np.stack([r.image_embeddings for r in records]) if n else np.empty((0, dims.n_variants, dims.d_img), np.float32)
    offsets = np.zeros(n + 1, dtype=np.int64)
    for i, r in enumerate(records):
        offsets[i + 1] = offsets[i] + len(r.token_ids)
    flat = np.concatenate([r.token_ids for r in records]) if n else np.empty(0, np.uint32)
    return ShardData(
        dims=dims,
        sample_ids=np.asarray([r.sample_id for r in records], dtype=np.uint64),
        tokens=tokens.astype(np.float32),
        mask=mask,
        images=images.astype(np.float32),
        token_ids=flat.astype(np.uint32),
        token_offsets=offsets,
    )


def gen_synthetic(spec: SyntheticSpec) -> tuple[ShardData, ShardData]:
    """Train/test shard pair; identical spec + seed reproduces identical data."""
    train = _make_split(spec, spec.n_train, id_base=0, stream=1)
    test = _make_split(spec, spec.n_test, id_base=spec.n_train, stream=2)
    return train, test
