import numpy as np
import pytest

from ape.checkpoint import load_checkpoint, save_checkpoint
from ape.errors import DataError
from ape.heads import AlignmentHead, HeadConfig
from ape.optim import AdamW
from tests.conftest import random_batch


def trained_head_and_opt(rng, kind="mlp"):
    from ape.loss import loss_and_grads

    cfg = HeadConfig(kind=kind, d_tok=4, d_img=4, layers=2, vocab_size=16, image_layers=1)
    head = AlignmentHead(cfg, seed=6)
    opt = AdamW(head.named_parameters(), weight_decay=0.01)
    for _ in range(3):
        batch = random_batch(rng, 4, 3, 4, 4, vocab=16)
        _, grads = loss_and_grads(head, batch)
        opt.step(grads, lr=1e-3)
        head.clamp_temperature()
    return head, opt


class TestRoundTrip:
    def test_write_read_write_byte_identical(self, tmp_path, rng):
        head, opt = trained_head_and_opt(rng)
        p1, p2 = tmp_path / "a.apec", tmp_path / "b.apec"
        save_checkpoint(p1, head, opt, step=3, run_config={"seed": 1}, run_state={"x": 0.5})
        ckpt = load_checkpoint(p1)
        head2 = ckpt.build_head()
        opt2 = ckpt.build_optimizer(head2)
        save_checkpoint(p2, head2, opt2, step=ckpt.step,
                        run_config=ckpt.meta["run"], run_state=ckpt.meta["run_state"])
        assert p1.read_bytes() == p2.read_bytes()

    def test_parameters_restored_exactly(self, tmp_path, rng):
        head, opt = trained_head_and_opt(rng, kind="lookup")
        path = tmp_path / "c.apec"
        save_checkpoint(path, head, opt, step=3)
        restored = load_checkpoint(path).build_head()
        for a, b in zip(head.parameters(), restored.parameters()):
            assert a.name == b.name
            np.testing.assert_array_equal(a.data, b.data)

    def test_restored_head_reproduces_embeddings(self, tmp_path, rng):
        head, opt = trained_head_and_opt(rng)
        path = tmp_path / "d.apec"
        save_checkpoint(path, head, opt)
        restored = load_checkpoint(path).build_head()
        batch = random_batch(rng, 5, 3, 4, 4)
        img_a, txt_a = head.embed_batch(batch)
        img_b, txt_b = restored.embed_batch(batch)
        np.testing.assert_array_equal(img_a.data, img_b.data)
        np.testing.assert_array_equal(txt_a.data, txt_b.data)

    def test_optimizer_moments_restored(self, tmp_path, rng):
        head, opt = trained_head_and_opt(rng)
        path = tmp_path / "e.apec"
        save_checkpoint(path, head, opt, step=3)
        ckpt = load_checkpoint(path)
        opt2 = ckpt.build_optimizer(ckpt.build_head())
        assert opt2.t == opt.t
        for name in opt.m:
            np.testing.assert_allclose(opt2.m[name], opt.m[name], atol=1e-7)
            np.testing.assert_allclose(opt2.v[name], opt.v[name], atol=1e-9)


class TestValidation:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.apec"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DataError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path, rng):
        head, opt = trained_head_and_opt(rng)
        path = tmp_path / "t.apec"
        save_checkpoint(path, head, opt)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 5])
        with pytest.raises(DataError, match="truncated|trailing"):
            load_checkpoint(path)

    def test_missing_tensor_rejected_on_build(self, tmp_path, rng):
        head, opt = trained_head_and_opt(rng)
        path = tmp_path / "m.apec"
        save_checkpoint(path, head)
        ckpt = load_checkpoint(path)
        del ckpt.tensors["text.0.w"]
        with pytest.raises(DataError, match="missing parameter"):
            ckpt.build_head()
