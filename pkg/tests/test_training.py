import math

import numpy as np
import pytest
import torch

from csidiff.errors import (ArchitectureMismatchError, ConfigError, CorruptCheckpointError,
                            DataError)
from csidiff.model import to_channels_first
from csidiff.networks import ModelConfig
from csidiff.training import (BatchSampler, TensorData, TrainingConfig, init_state,
                              load_checkpoint, save_checkpoint, step_generator, train,
                              train_step)


def _cfg(**kw):
    base = dict(profile="desk", n_train=10, batch_size=4, log_every=1, val_every=0,
                checkpoint_every=0, n_vectors=4)
    base.update(kw)
    return TrainingConfig(**base)


def _batch(ds, n=4, side=False):
    data = TensorData(ds, 1.0, side)
    return data.batch(np.arange(n))


def test_snr_weight_at_first_step():
    state = init_state(_cfg())
    assert state.codec.schedule.snr_weight(1) == pytest.approx(5.5366, abs=1e-3)


def test_loss_without_codebook_term_is_weighted_error(small_dataset):
    state = init_state(_cfg(eta=0.0, freeze_codebook=True))
    codec = state.codec
    x, y, z = _batch(small_dataset)
    loss, parts, _ = codec.training_loss((x, y, z), step_generator(0, 0), 0.0)

    # replay the same draws by hand
    gen = step_generator(0, 0)
    t = torch.randint(1, 5, (4,), generator=gen)
    eps = torch.randn(z.shape, generator=gen)
    ab = torch.tensor(codec.schedule.alpha_bar)[t].float().view(-1, 1, 1, 1)
    z_t = ab.sqrt() * z + (1 - ab).sqrt() * eps
    with torch.no_grad():
        _, vecs, e = codec.quantize(codec.encode_continuous(x))
        pred = codec.denoise(z_t, codec.conditioning(e), None, t)
    w = (ab / (1 - ab)).view(-1)
    want = (w * ((z - pred) ** 2).sum(dim=(1, 2, 3))).mean()
    assert loss.item() == pytest.approx(want.item(), rel=1e-5)
    assert parts["denoise_loss"] == pytest.approx(loss.item())


def test_zero_eta_leaves_codebook_but_trains_encoder(small_dataset):
    state = init_state(_cfg(eta=0.0, freeze_codebook=True))
    book0 = state.codec.codebook.vectors.detach().clone()
    enc0 = [p.detach().clone() for p in state.codec.encoder.parameters()]
    # make the head non-zero so the loss depends on the conditioning path
    torch.nn.init.normal_(state.codec.unet.conv_out.weight, std=0.05)
    for _ in range(3):
        train_step(state, _batch(small_dataset))
    assert torch.equal(state.codec.codebook.vectors, book0)
    moved = [not torch.equal(a, b) for a, b in zip(enc0, state.codec.encoder.parameters())]
    assert any(moved)


def test_eta_term_moves_codebook(small_dataset):
    state = init_state(_cfg(eta=1.0))
    book0 = state.codec.codebook.vectors.detach().clone()
    train_step(state, _batch(small_dataset))
    assert not torch.equal(state.codec.codebook.vectors, book0)


def test_single_sample_overfit(small_dataset):
    one = small_dataset.subset([0])
    cfg = _cfg(n_train=500, batch_size=1, log_every=1)
    state = train(cfg, one)
    losses = [r["loss"] for r in state.metrics]
    assert np.mean(losses[-20:]) < 0.1 * np.mean(losses[:5])


def test_zero_steps_is_a_no_op(small_dataset):
    state = init_state(_cfg())
    before = {k: v.clone() for k, v in state.codec.state_dict().items()}
    out = train(_cfg(n_train=0), small_dataset, state=state)
    assert out.step == 0 and out.metrics == []
    assert all(torch.equal(before[k], v) for k, v in out.codec.state_dict().items())


def test_metric_logs_are_deterministic(small_dataset):
    a = train(_cfg(n_train=4), small_dataset).metrics
    b = train(_cfg(n_train=4), small_dataset).metrics
    assert a == b
    assert [r["step"] for r in a] == [1, 2, 3, 4]


def test_batch_sampler_covers_epoch():
    s = BatchSampler(10, 5, seed=3)
    first = np.concatenate([s.indices(0), s.indices(1)])
    assert sorted(first) == list(range(10))
    assert np.array_equal(s.indices(0), BatchSampler(10, 5, seed=3).indices(0))


def test_resume_matches_uninterrupted(tmp_path, small_dataset):
    straight = train(_cfg(n_train=10), small_dataset)
    half = train(_cfg(n_train=5), small_dataset)
    save_checkpoint(half, tmp_path / "half.ckpt")
    resumed = load_checkpoint(tmp_path / "half.ckpt")
    resumed.config.n_train = 10
    resumed = train(resumed.config, small_dataset, state=resumed)
    assert resumed.step == 10
    for k, v in straight.codec.state_dict().items():
        torch.testing.assert_close(resumed.codec.state_dict()[k], v, rtol=0, atol=1e-6)
    np.testing.assert_array_equal(resumed.usage, straight.usage)


def test_checkpoint_round_trip_keeps_parameter_count(tmp_path, small_dataset):
    state = train(_cfg(n_train=2), small_dataset, out_dir=tmp_path)
    n = state.parameter_count()
    back = load_checkpoint(tmp_path / "final.ckpt")
    assert back.parameter_count() == n
    assert back.step == 2
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == \
        "step,loss,denoise_loss,cb_loss,val_nmse_db"


def test_truncated_checkpoint_is_corrupt(tmp_path, small_dataset):
    state = init_state(_cfg())
    path = tmp_path / "s.ckpt"
    save_checkpoint(state, path)
    buf = path.read_bytes()
    for cut in (len(buf) // 2, 20, 3):
        path.write_bytes(buf[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)


def test_architecture_mismatch(tmp_path):
    state = init_state(_cfg(n_vectors=4))
    path = tmp_path / "s.ckpt"
    save_checkpoint(state, path)
    with pytest.raises(ArchitectureMismatchError) as err:
        load_checkpoint(path, ModelConfig.desk(n_vectors=8))
    assert "n_vectors" in str(err.value)
    load_checkpoint(path, ModelConfig.desk(n_vectors=4))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig.from_mapping({"lr": 0.1})
    with pytest.raises(ConfigError):
        TrainingConfig(eta=-1).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(profile="huge").validate()


def test_side_info_required(small_dataset):
    ds = small_dataset.subset(range(2))
    for s in ds.samples:
        s.y_ad = None
    with pytest.raises(DataError):
        TensorData(ds, 1.0, True)


def test_non_finite_loss_is_reported(small_dataset):
    from csidiff.errors import NumericalError
    state = init_state(_cfg())
    x, y, z = _batch(small_dataset)
    with pytest.raises(NumericalError):
        train_step(state, (x, y, z * math.inf))


def test_channels_first_layout():
    blocks = np.arange(2 * 32 * 32 * 2, dtype=np.float32).reshape(2, 32, 32, 2)
    t = to_channels_first(blocks)
    assert t.shape == (2, 2, 32, 32)
    assert t[1, 1, 3, 4] == blocks[1, 3, 4, 1]
