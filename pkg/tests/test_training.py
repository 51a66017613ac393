import hashlib
import struct

import numpy as np
import pytest
import torch

from aiorestore import io as imio
from aiorestore.exceptions import CheckpointError, DatasetError, IntegrityError, TrainingError
from aiorestore.guidance import StubProviders
from aiorestore.training import (
    CHECKPOINT_MAGIC, ImageCache, LossConfig, learning_rate_at, load_checkpoint, make_optimizer, new_train_state,
    read_checkpoint, run_training, sample_batch, save_checkpoint, step_seed, train_loop, train_step,
)


def _params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# -------------------------------------------------------------- sampling

def test_sample_batch_aligned_and_seeded(toy_data):
    manifest_path, rows = toy_data
    a = sample_batch(rows, 16, 3, seed=5)
    b = sample_batch(rows, 16, 3, seed=5)
    for p, q in zip(a, b):
        assert np.array_equal(p.degraded, q.degraded) and p.region == q.region
    cache = ImageCache()
    for p in sample_batch(rows, 16, 8, seed=1, cache=cache):
        assert p.degraded.shape == (3, 16, 16)
        row = next(r for r in rows if p.image_id in r.degraded)
        clean = cache.get(row.clean)
        r = p.region
        crop = clean[:, r.top:r.top + 16, r.left:r.left + 16]
        if r.flip_h:
            crop = crop[:, :, ::-1]
        if r.flip_v:
            crop = crop[:, ::-1, :]
        assert np.array_equal(crop, p.clean)


def test_sample_batch_pads_small_images(toy_data):
    _, rows = toy_data
    pairs = sample_batch(rows, 40, 2, seed=0)
    assert all(p.degraded.shape == (3, 40, 40) and p.region is None for p in pairs)


def test_sample_batch_errors(tmp_path, toy_data):
    _, rows = toy_data
    with pytest.raises(DatasetError):
        sample_batch([], 16, 1, 0)
    imio.write_image(tmp_path / "odd.png", np.zeros((3, 20, 20)))
    bad = [imio.ManifestRow(rows[0].degraded, str(tmp_path / "odd.png"), "x")]
    with pytest.raises(DatasetError, match="differ in shape"):
        sample_batch(bad, 16, 1, 0, ImageCache())
    missing = [imio.ManifestRow(str(tmp_path / "nope.png"), rows[0].clean, "x")]
    with pytest.raises(DatasetError, match="cannot read"):
        sample_batch(missing, 16, 1, 0, ImageCache())


def test_step_seed_distinct():
    seeds = {step_seed(s, i) for s in range(3) for i in range(100)}
    assert len(seeds) == 300
    assert step_seed(1, 2) == step_seed(1, 2)


# ----------------------------------------------------------------- steps

def test_zero_learning_rate_keeps_parameters(toy_data, tiny_config):
    _, rows = toy_data
    cfg = tiny_config.with_optimizer(learning_rate=0.0, weight_decay=0.0)
    state = new_train_state(cfg)
    before = _params(state.model)
    state, lb = train_step(state, sample_batch(rows, 16, 2, 0), StubProviders.from_config(cfg))
    assert state.iteration == 1 and lb.total > 0
    assert _same(before, _params(state.model))


def test_train_step_deterministic(toy_data, tiny_config):
    _, rows = toy_data
    prov = StubProviders.from_config(tiny_config)
    results = []
    for _ in range(2):
        state = new_train_state(tiny_config)
        losses = []
        for i in range(3):
            state, lb = train_step(state, sample_batch(rows, 16, 2, i), prov)
            losses.append(lb.total)
        results.append((losses, _params(state.model)))
    assert results[0][0] == results[1][0]
    assert _same(results[0][1], results[1][1])


def test_loss_decreases(toy_data, tiny_config):
    _, rows = toy_data
    wins = 0
    for seed in range(3):
        cfg = tiny_config.replace(seed=seed)
        state = new_train_state(cfg)
        curve = []
        run_training(state, rows, until=200, on_step=lambda it, lb: curve.append(lb.l1))
        wins += np.mean(curve[-20:]) < np.mean(curve[:20])
    assert wins >= 2


def test_adamw_scalar_quadratic(tiny_config):
    holder = torch.nn.Module()
    holder.w = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    opt = make_optimizer(holder, tiny_config.with_optimizer(learning_rate=0.05, weight_decay=0.0))
    for _ in range(500):
        opt.zero_grad()
        ((holder.w - 0.9) ** 2).sum().backward()
        opt.step()
    assert float(holder.w.detach()) == pytest.approx(0.9, abs=1e-3)


def test_mask_dropout_only_in_training(monkeypatch, toy_data, tiny_config):
    import aiorestore.guidance.providers as providers
    from aiorestore.evaluation import restore_image

    calls = []
    real = providers.mask_dropout

    def spy(masks, rate, seed):
        calls.append(rate)
        return real(masks, rate, seed)

    monkeypatch.setattr(providers, "mask_dropout", spy)
    _, rows = toy_data
    cfg = tiny_config.replace(mask_dropout_rate=0.5)
    prov = StubProviders.from_config(cfg)
    state = new_train_state(cfg)
    train_step(state, sample_batch(rows, 16, 2, 0), prov)
    assert calls == [0.5, 0.5]
    calls.clear()
    restore_image(state.model, imio.read_image(rows[0].degraded), prov)
    assert calls == []
    assert not state.model.training


def test_non_finite_loss(toy_data, tiny_config):
    _, rows = toy_data
    state = new_train_state(tiny_config)
    with torch.no_grad():
        state.model.output.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="iteration 0"):
        train_step(state, sample_batch(rows, 16, 2, 0), StubProviders.from_config(tiny_config))


def test_learning_rate_schedules(tiny_config):
    assert learning_rate_at(tiny_config, 3) == tiny_config.optimizer.learning_rate
    cos = tiny_config.with_optimizer(lr_schedule="cosine", total_iterations=100, learning_rate=1.0)
    assert learning_rate_at(cos, 0) == 1.0
    assert learning_rate_at(cos, 50) == pytest.approx(0.5)
    assert learning_rate_at(cos, 100) == pytest.approx(0.0)


def test_loss_config_from_config(tiny_config):
    lc = LossConfig.from_config(tiny_config.replace(use_icrm=False))
    assert lc.alpha == tiny_config.loss_alpha and not lc.use_internal


# ----------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, toy_data, tiny_config):
    _, rows = toy_data
    state = new_train_state(tiny_config)
    run_training(state, rows, until=2)
    save_checkpoint(state, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.iteration == 2 and back.seed == state.seed
    assert _same(_params(state.model), _params(back.model))
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    header, arrays = read_checkpoint(tmp_path / "a.ckpt")
    assert header["iteration"] == 2
    assert any(k.startswith("adam/exp_avg/") for k in arrays)


def test_checkpoint_corruption(tmp_path, tiny_config):
    p = tmp_path / "c.ckpt"
    save_checkpoint(new_train_state(tiny_config), p)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(p)
    flipped = bytearray(data)
    flipped[100] ^= 1
    p.write_bytes(bytes(flipped))
    with pytest.raises(IntegrityError, match="checksum"):
        load_checkpoint(p)
    p.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(IntegrityError):
        load_checkpoint(p)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_checkpoint_version_mismatch(tmp_path, tiny_config):
    p = tmp_path / "v.ckpt"
    save_checkpoint(new_train_state(tiny_config), p)
    body = bytearray(p.read_bytes()[:-32])
    body[8:12] = struct.pack("<I", 2)
    p.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    assert p.read_bytes()[:8] == CHECKPOINT_MAGIC
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(p)


def test_incompatible_config_names_field(tmp_path, tiny_config):
    p = tmp_path / "i.ckpt"
    save_checkpoint(new_train_state(tiny_config), p)
    with pytest.raises(CheckpointError, match="level_channels"):
        load_checkpoint(p, tiny_config.replace(level_channels=(8, 16, 32, 32)))
    # training-only fields may differ
    load_checkpoint(p, tiny_config.with_optimizer(learning_rate=1e-5))


def test_resume_is_bit_exact(tmp_path, toy_data, tiny_config):
    manifest, _ = toy_data
    cfg = tiny_config.with_optimizer(total_iterations=6).replace(checkpoint_every=3)
    full = train_loop(cfg, manifest, out_dir=tmp_path / "full")
    part = train_loop(cfg.with_optimizer(total_iterations=3), manifest, out_dir=tmp_path / "part")
    resumed = train_loop(cfg, manifest, out_dir=tmp_path / "part", resume=part)
    _, a = read_checkpoint(full)
    _, b = read_checkpoint(resumed)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    curve_full = (tmp_path / "full" / "loss_curve.tsv").read_text()
    curve_resumed = (tmp_path / "part" / "loss_curve.tsv").read_text()
    assert curve_full == curve_resumed
    assert len(curve_full.splitlines()) == 6


def test_zero_iterations_writes_checkpoint(tmp_path, toy_data, tiny_config):
    manifest, _ = toy_data
    path = train_loop(tiny_config.with_optimizer(total_iterations=0), manifest, out_dir=tmp_path / "z")
    assert path.name == "ckpt_0000000.ckpt" and path.exists()
    assert load_checkpoint(path).iteration == 0
