import numpy as np
import pytest

from ape.heads import AlignmentHead, HeadConfig
from ape.evals import recall_at_k, embed_text_set
from ape.store.shards import write_shard
from ape.store.synthetic import SyntheticSpec, gen_synthetic, synthetic_maps


def test_same_seed_reproduces_identical_shards(tmp_path):
    spec = SyntheticSpec(latent_dim=4, d_img=8, d_tok=8, max_seq=3, n_train=16,
                         noise=0.1, nonlinear=True, seed=11, n_test=4)
    blobs = []
    for name in ("a", "b"):
        train, test = gen_synthetic(spec)
        for tag, data in (("tr", train), ("te", test)):
            p = tmp_path / f"{name}_{tag}.apes"
            write_shard(p, data.records(), data.dims)
            blobs.append(p.read_bytes())
    assert blobs[0] == blobs[2]
    assert blobs[1] == blobs[3]


def test_train_and_test_are_disjoint_ids():
    spec = SyntheticSpec(latent_dim=4, d_img=8, d_tok=8, max_seq=3, n_train=16, n_test=8)
    train, test = gen_synthetic(spec)
    assert set(train.sample_ids.tolist()).isdisjoint(test.sample_ids.tolist())


def test_token_ids_match_valid_positions_and_vocab():
    spec = SyntheticSpec(latent_dim=4, d_img=8, d_tok=8, max_seq=6, n_train=32)
    train, _ = gen_synthetic(spec)
    counts = np.diff(train.token_offsets)
    np.testing.assert_array_equal(counts, train.mask.sum(axis=1))
    assert train.token_ids.max() < spec.vocab_size
    # padding positions carry zero vectors
    assert np.all(train.tokens[~train.mask] == 0.0)


def test_variable_lengths_cover_at_least_half():
    spec = SyntheticSpec(latent_dim=4, d_img=8, d_tok=8, max_seq=8, n_train=64, seed=2)
    train, _ = gen_synthetic(spec)
    lengths = train.mask.sum(axis=1)
    assert lengths.min() >= 4 and lengths.max() <= 8


def test_linear_noiseless_case_exactly_recoverable_by_one_layer_head():
    """With zero noise and no nonlinearity an affine map from pooled tokens to
    the image direction exists; the analytically built head gets recall 1.0."""
    spec = SyntheticSpec(latent_dim=8, d_img=16, d_tok=16, max_seq=4, n_train=64,
                         noise=0.0, nonlinear=False, seed=5, n_test=8)
    train, _ = gen_synthetic(spec)
    a, b, gamma, _ = synthetic_maps(spec)

    head = AlignmentHead(HeadConfig(kind="mlp", d_tok=16, d_img=16, layers=1), seed=0)
    w = a @ np.linalg.pinv(b)  # maps token encodings (up to positive scale) to A z
    head.text_mlp.weights[0].data = w.T.astype(np.float32)
    head.text_mlp.biases[0].data = np.zeros(16, dtype=np.float32)

    txt = embed_text_set(head, train)
    img = train.images[:, 0]
    assert recall_at_k(img, txt, k=1) == 1.0
    # the alignment is exact, not merely rank-1-correct
    np.testing.assert_allclose(txt, img, atol=1e-4)
