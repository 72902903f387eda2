import numpy as np
import pytest

from ape.store.sampling import Batch
from ape.store.shards import SampleRecord, ShardDims


def random_batch(rng, b, t, d_tok, d_img, vocab=32, full_mask=False):
    tokens = rng.normal(size=(b, t, d_tok))
    lengths = np.full(b, t) if full_mask else rng.integers(1, t + 1, size=b)
    mask = np.arange(t)[None, :] < lengths[:, None]
    tokens = np.where(mask[:, :, None], tokens, 0.0)
    images = rng.normal(size=(b, d_img))
    flat, offsets = [], [0]
    for i in range(b):
        ids = rng.integers(0, vocab, size=lengths[i])
        flat.extend(int(x) for x in ids)
        offsets.append(offsets[-1] + int(lengths[i]))
    return Batch(
        sample_ids=np.arange(b, dtype=np.uint64),
        tokens=tokens.astype(np.float32),
        mask=mask,
        images=images.astype(np.float32),
        token_ids=np.asarray(flat, dtype=np.uint32),
        token_offsets=np.asarray(offsets, dtype=np.int64),
    )


def random_records(rng, n, dims: ShardDims, vocab=64, id_base=0):
    records = []
    for i in range(n):
        length = int(rng.integers(1, dims.max_seq + 1))
        mask = np.zeros(dims.max_seq, dtype=bool)
        mask[:length] = True
        tokens = np.zeros((dims.max_seq, dims.d_tok), dtype=np.float32)
        tokens[:length] = rng.normal(size=(length, dims.d_tok)).astype(np.float32)
        records.append(
            SampleRecord(
                sample_id=id_base + i,
                token_encodings=tokens,
                mask=mask,
                image_embeddings=rng.normal(size=(dims.n_variants, dims.d_img)).astype(np.float32),
                token_ids=rng.integers(0, vocab, size=length).astype(np.uint32),
            )
        )
    return records


def template_shard(vectors_by_class, d):
    """One record per template text; sample_id carries the class index."""
    from ape.store.synthetic import _records_to_data

    records = []
    for cls, vectors in vectors_by_class.items():
        for v in vectors:
            tok = np.zeros((1, d), dtype=np.float32)
            tok[0] = v
            records.append(
                SampleRecord(
                    sample_id=cls,
                    token_encodings=tok,
                    mask=np.asarray([True]),
                    image_embeddings=np.zeros((1, d), dtype=np.float32),
                    token_ids=np.asarray([0], dtype=np.uint32),
                )
            )
    return _records_to_data(records, ShardDims(d_img=d, d_tok=d, max_seq=1, n_variants=1))


def eval_shard(images, labels, d):
    """Eval set in shard form: the class label rides in sample_id."""
    from ape.store.synthetic import _records_to_data

    records = []
    for img, label in zip(images, labels):
        records.append(
            SampleRecord(
                sample_id=int(label),
                token_encodings=np.zeros((1, d), dtype=np.float32),
                mask=np.asarray([True]),
                image_embeddings=np.asarray(img, dtype=np.float32)[None, :],
                token_ids=np.asarray([0], dtype=np.uint32),
            )
        )
    return _records_to_data(records, ShardDims(d_img=d, d_tok=d, max_seq=1, n_variants=1))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
