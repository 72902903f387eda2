"""Epoch scheduling, exact-ratio mixtures and batch assembly.

All randomness is a pure function of (seed, stream tag, epoch): a schedule
can be recomputed for any step without carrying RNG state, which is what
makes checkpoint resume bit-exact.

Mixture epochs realize source counts proportional to the configured integer
weights exactly: with u = min_s floor(n_s / w_s) over positive-weight
sources, source s contributes u * w_s samples per epoch, drawn without
replacement from a fresh per-epoch permutation (subset identity itself is
fixed once per run).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError
from .shards import ShardData


def _rng(seed: int, tag: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag, epoch])))


# Stream tags; distinct per use so streams never collide.
_TAG_SOURCE = 1
_TAG_MIX = 2
_TAG_VARIANT = 3
_TAG_SUBSET = 4


@dataclass(frozen=True)
class MixtureSource:
    data: ShardData
    weight: int
    name: str = ""

    def __post_init__(self):
        if self.weight < 0:
            raise ConfigError(f"mixture weight must be nonnegative, got {self.weight}")


@dataclass(frozen=True)
class MixtureSpec:
    sources: tuple[MixtureSource, ...]

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("mixture needs at least one source")
        if all(s.weight == 0 for s in self.sources):
            raise ConfigError("mixture needs at least one positive weight")
        for i, s in enumerate(self.sources):
            if s.weight > 0 and len(s.data) == 0:
                raise ConfigError(f"mixture source {i} ({s.name!r}) is empty but has weight {s.weight}")


def mixture_counts(sizes, weights) -> list[int]:
    """Per-epoch sample count for each source, exactly proportional to weights."""
    units = [n // w for n, w in zip(sizes, weights) if w > 0]
    u = min(units)
    return [u * w for w in weights]


def mixture_epoch(spec: MixtureSpec, seed: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """One epoch's shuffled schedule: parallel (source index, row index) arrays."""
    sizes = [len(s.data) for s in spec.sources]
    weights = [s.weight for s in spec.sources]
    counts = mixture_counts(sizes, weights)
    src_parts, row_parts = [], []
    for i, count in enumerate(counts):
        if count == 0:
            continue
        perm = _rng(seed, _TAG_SOURCE, epoch * len(counts) + i).permutation(sizes[i])[:count]
        src_parts.append(np.full(count, i, dtype=np.int32))
        row_parts.append(perm.astype(np.int64))
    src = np.concatenate(src_parts)
    rows = np.concatenate(row_parts)
    order = _rng(seed, _TAG_MIX, epoch).permutation(src.shape[0])
    return src[order], rows[order]


def epoch_schedule(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffled row order for a single-source epoch (every sample once)."""
    return _rng(seed, _TAG_SOURCE, epoch).permutation(n).astype(np.int64)


def draw_subset(data: ShardData, size: int, seed: int) -> np.ndarray:
    """Fixed random subset of rows, drawn once per run. Returns row indices.

    Capped at the source size; the draw is without replacement.
    """
    n = len(data)
    size = min(size, n)
    rows = _rng(seed, _TAG_SUBSET, 0).permutation(n)[:size]
    return np.sort(rows).astype(np.int64)


def restrict_rows(data: ShardData, rows: np.ndarray) -> ShardData:
    """View of a shard set limited to the given rows (new contiguous arrays)."""
    rows = np.asarray(rows, dtype=np.int64)
    counts = np.diff(data.token_offsets)
    new_offsets = np.zeros(rows.size + 1, dtype=np.int64)
    np.cumsum(counts[rows], out=new_offsets[1:])
    flat = np.concatenate(
        [data.token_ids[data.token_offsets[r]: data.token_offsets[r + 1]] for r in rows]
    ) if rows.size else np.empty(0, dtype=np.uint32)
    return ShardData(
        dims=data.dims,
        sample_ids=data.sample_ids[rows],
        tokens=data.tokens[rows],
        mask=data.mask[rows],
        images=data.images[rows],
        token_ids=flat,
        token_offsets=new_offsets,
        path=data.path,
    )


def rows_for_sample_ids(data: ShardData, sample_ids: np.ndarray) -> np.ndarray:
    """Rows whose sample_id is in the given id list (used to reload subsets)."""
    ids = np.asarray(sample_ids, dtype=np.uint64)
    id_to_row = {}
    for row, sid in enumerate(data.sample_ids):
        if int(sid) in id_to_row:
            raise DataError(f"duplicate sample_id {int(sid)}; subsets need unique ids")
        id_to_row[int(sid)] = row
    try:
        return np.asarray([id_to_row[int(s)] for s in ids], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"sample_id {exc} from index list not present in shard set") from None


@dataclass
class Batch:
    sample_ids: np.ndarray
    tokens: np.ndarray        # (B, max_seq, d_tok) f32
    mask: np.ndarray          # (B, max_seq) bool
    images: np.ndarray        # (B, d_img) f32, one variant per sample
    token_ids: np.ndarray     # flat u32
    token_offsets: np.ndarray  # (B+1,) i64
    short: bool = False

    def __len__(self):
        return int(self.sample_ids.shape[0])


class BatchSampler:
    """Deterministic batch stream over a mixture of shard sets.

    Samples are drawn without replacement within an epoch; each appearance of
    a sample picks one of its stored image variants uniformly. ``batch(step)``
    is a pure function of (seed, step), so any step can be recomputed.
    """

    def __init__(
        self,
        spec: MixtureSpec,
        batch_size: int,
        seed: int,
        short_batch: str = "drop",
    ):
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        if short_batch not in ("drop", "keep"):
            raise ConfigError(f"short_batch must be 'drop' or 'keep', got {short_batch!r}")
        self.spec = spec
        self.batch_size = batch_size
        self.seed = seed
        self.short_batch = short_batch
        counts = mixture_counts(
            [len(s.data) for s in spec.sources], [s.weight for s in spec.sources]
        )
        self.epoch_len = int(sum(counts))
        if self.epoch_len == 0:
            raise ConfigError("mixture yields an empty epoch")
        if short_batch == "drop":
            self.batches_per_epoch = self.epoch_len // batch_size
            if self.batches_per_epoch == 0:
                raise ConfigError(
                    f"batch size {batch_size} exceeds epoch of {self.epoch_len} samples"
                    " and short batches are dropped"
                )
        else:
            self.batches_per_epoch = -(-self.epoch_len // batch_size)
        self._epoch_cache: tuple[int, np.ndarray, np.ndarray, np.ndarray] | None = None

    def _epoch(self, epoch: int):
        if self._epoch_cache is not None and self._epoch_cache[0] == epoch:
            return self._epoch_cache[1:]
        src, rows = mixture_epoch(self.spec, self.seed, epoch)
        n_var = self.spec.sources[0].data.dims.n_variants
        variants = _rng(self.seed, _TAG_VARIANT, epoch).integers(0, n_var, size=src.shape[0])
        self._epoch_cache = (epoch, src, rows, variants)
        return src, rows, variants

    def batch(self, step: int) -> Batch:
        epoch, idx = divmod(step, self.batches_per_epoch)
        src, rows, variants = self._epoch(epoch)
        lo = idx * self.batch_size
        hi = min(lo + self.batch_size, src.shape[0])
        return self._gather(src[lo:hi], rows[lo:hi], variants[lo:hi], hi - lo < self.batch_size)

    def epoch_batches(self, epoch: int) -> list[Batch]:
        return [self.batch(epoch * self.batches_per_epoch + i) for i in range(self.batches_per_epoch)]

    def _gather(self, src, rows, variants, short: bool) -> Batch:
        datas = [s.data for s in self.spec.sources]
        b = src.shape[0]
        dims = datas[0].dims
        tokens = np.empty((b, dims.max_seq, dims.d_tok), dtype=np.float32)
        mask = np.empty((b, dims.max_seq), dtype=bool)
        images = np.empty((b, dims.d_img), dtype=np.float32)
        sample_ids = np.empty(b, dtype=np.uint64)
        ids_parts = []
        offsets = np.zeros(b + 1, dtype=np.int64)
        for i in range(b):
            d = datas[src[i]]
            r = rows[i]
            tokens[i] = d.tokens[r]
            mask[i] = d.mask[r]
            images[i] = d.images[r, variants[i] % d.dims.n_variants]
            sample_ids[i] = d.sample_ids[r]
            lo, hi = d.token_offsets[r], d.token_offsets[r + 1]
            ids_parts.append(d.token_ids[lo:hi])
            offsets[i + 1] = offsets[i] + (hi - lo)
        flat = np.concatenate(ids_parts) if ids_parts else np.empty(0, dtype=np.uint32)
        return Batch(
            sample_ids=sample_ids,
            tokens=tokens,
            mask=mask,
            images=images,
            token_ids=flat,
            token_offsets=offsets,
            short=short,
        )
