import json

import pytest
import torch

from atme import engine
from atme.data import iterate_batches
from atme.engine import ATME, CheckpointError, NonFiniteLossError, TrainConfig, Trainer, infer, lr_at_epoch


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at_epoch(50, cfg) == 2e-4
    assert lr_at_epoch(100, cfg) == 2e-4
    assert lr_at_epoch(150, cfg) == pytest.approx(1e-4, abs=1e-15)
    assert lr_at_epoch(200, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at_epoch(201, cfg)


def first_batch(trainer):
    return next(iterate_batches(trainer.pairs, trainer.train_cfg.batch_size, epoch=1, seed=0,
                                policy=trainer.policy))


def test_step_updates_store_for_every_batch_id(tiny_cfg, toy_pairs):
    tr = Trainer(tiny_cfg, toy_pairs)
    batch = first_batch(tr)
    out = tr.train_step(batch)
    assert set(batch.sample_ids) <= set(tr.store.ids())
    assert all(torch.isfinite(v) for v in (out.d_loss, out.g_loss, out.gan_value))
    for sid in batch.sample_ids:
        v = tr.store.get(sid)
        assert v.shape == tr.model.map_shape and bool(((v > 0) & (v < 1)).all())


def test_step_reads_previous_map_before_writing(tiny_cfg, toy_pairs):
    tr = Trainer(tiny_cfg, toy_pairs)
    seen = []
    tr.step_hook = lambda trainer, batch, d_prev, out: seen.append((d_prev.clone(), trainer.store.get_batch(
        batch.sample_ids).clone()))
    batch = first_batch(tr)
    cold = tr.store.get_batch(batch.sample_ids).clone()
    tr.train_step(batch)
    d_prev, after = seen[0]
    assert torch.equal(d_prev, cold)
    assert not torch.equal(after, cold)


def test_generator_step_leaves_discriminator_grads_untouched(tiny_cfg, toy_pairs):
    tr = Trainer(tiny_cfg, toy_pairs)
    tr.train_step(first_batch(tr))
    d_grads = [p.grad for p in tr.model.discriminator.parameters()]
    # the D gradient left over is from its own update, never from the G loss
    tr2 = Trainer(tiny_cfg, toy_pairs)
    m = tr2.model
    batch = first_batch(tr2)
    y_hat, *_ = m.translate(batch.source, tr2.store.get_batch(batch.sample_ids))
    d_loss = engine.discriminator_loss_from_logits(m.discriminator.logits(batch.source, batch.target),
                                                   m.discriminator.logits(batch.source, y_hat.detach()))
    ref = torch.autograd.grad(d_loss, list(m.discriminator.parameters()))
    assert all(torch.allclose(a, b, atol=1e-6) for a, b in zip(d_grads, ref))


def test_training_deterministic(tiny_cfg, toy_pairs):
    a = Trainer(tiny_cfg, toy_pairs).train(until_epoch=1)
    b = Trainer(tiny_cfg, toy_pairs).train(until_epoch=1)
    assert a == b


def test_non_finite_loss_raises(tiny_cfg, toy_pairs):
    tr = Trainer(tiny_cfg, toy_pairs)
    with torch.no_grad():
        for p in tr.model.discriminator.parameters():
            p.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        tr.train_step(first_batch(tr))


def test_duplicate_ids_rejected(tiny_cfg, toy_pairs):
    with pytest.raises(ValueError):
        Trainer(tiny_cfg, [toy_pairs[0], toy_pairs[0]])


def test_checkpoint_round_trip_is_byte_identical(tiny_cfg, toy_pairs, tmp_path):
    tr = Trainer(tiny_cfg, toy_pairs)
    tr.train(until_epoch=1)
    a = tr.save_checkpoint(tmp_path / "a.pt")
    back = Trainer.from_checkpoint(a, toy_pairs)
    b = back.save_checkpoint(tmp_path / "b.pt")
    assert a.read_bytes() == b.read_bytes()


def test_resume_matches_uninterrupted(tiny_cfg, toy_pairs, tmp_path):
    full = Trainer(tiny_cfg, toy_pairs)
    full.train(until_epoch=3, out_dir=tmp_path / "full", checkpoint_every=1)
    part = Trainer.from_checkpoint(tmp_path / "full" / "checkpoint_0001.pt", toy_pairs)
    part.train(until_epoch=3, out_dir=tmp_path / "resumed", checkpoint_every=1)
    assert (tmp_path / "full" / "history.csv").read_bytes() == (tmp_path / "resumed" / "history.csv").read_bytes()


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"\x00garbage")
    with pytest.raises(CheckpointError):
        engine.read_checkpoint(bad)
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        engine.read_checkpoint(tmp_path / "other.pt")


def test_load_model_rejects_mismatched_weights(tiny_cfg, toy_pairs, tmp_path):
    tr = Trainer(tiny_cfg, toy_pairs)
    state = tr.state()
    meta = json.loads(state["meta"])
    meta["config"]["gen.embed_dim"] = 8
    state["meta"] = json.dumps(meta)
    torch.save(state, tmp_path / "m.pt")
    with pytest.raises(CheckpointError):
        engine.load_model(tmp_path / "m.pt")


def test_infer_single_pass_and_reproducible(tiny_cfg):
    model = ATME(tiny_cfg).eval()
    calls = []
    handle = model.generator.register_forward_hook(lambda *a: calls.append(1))
    x = torch.rand(3, 3, 32, 32) * 2 - 1
    a = infer(model, x, seed=4)
    handle.remove()
    assert len(calls) == 1 and a.shape == x.shape
    assert torch.equal(a, infer(model, x, seed=4))
    # batch kernels may reorder float sums, so compare per-image seeding loosely
    assert torch.allclose(infer(model, x[1], seed=5), a[1], atol=1e-5)


def test_infer_rejects_wrong_resolution(tiny_cfg):
    with pytest.raises(ValueError):
        infer(ATME(tiny_cfg), torch.zeros(1, 3, 16, 16))
