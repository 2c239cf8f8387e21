import csv

import numpy as np
import pytest

from conftest import tiny_config
from wmdenoise import training as tr
from wmdenoise.autodiff import functional as F
from wmdenoise.autodiff.tensor import Tensor, backward
from wmdenoise.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_records,
    encode_records,
    read_records,
    write_records,
)
from wmdenoise.noise import parse_noise_spec
from wmdenoise.training import (
    DEFAULT_LAMBDAS,
    METRICS_COLUMNS,
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    load_checkpoint,
    load_config,
    parse_config_text,
    read_metrics,
    save_checkpoint,
    total_loss,
    train_loop,
    train_step,
)

# ---------------------------------------------------------------------------
# weighted loss


def test_total_loss_arithmetic():
    assert abs(total_loss(0.01, 0.2, 0.6, 0.05, DEFAULT_LAMBDAS) - 0.1026) < 1e-12
    assert total_loss(1.0, 2.0, 3.0, 4.0, (1, 0, 0, 0)) == 1.0


def test_total_loss_on_tensors_has_no_hidden_normalization():
    parts = [Tensor(np.array(v), requires_grad=True, dtype=np.float64) for v in (0.01, 0.2, 0.6, 0.05)]
    out = total_loss(*parts, DEFAULT_LAMBDAS)
    assert abs(float(out.data) - 0.1026) < 1e-12
    backward(out)
    assert [float(p.grad) for p in parts] == list(DEFAULT_LAMBDAS)


def test_total_loss_names_nonfinite_component():
    with pytest.raises(NonFiniteLossError, match="l_adv"):
        total_loss(0.1, 0.1, float("nan"), 0.1)


# ---------------------------------------------------------------------------
# config


def test_config_text_grammar(tmp_path):
    text = "# comment\nsteps = 12\n\nuse_se = false  # trailing\nnoise_pool = dropout:0.3,blur:1\nlr=0.01\n"
    values = parse_config_text(text)
    assert values == {"steps": 12, "use_se": False, "noise_pool": "dropout:0.3,blur:1", "lr": 0.01}
    path = tmp_path / "c.cfg"
    path.write_text(text)
    cfg = load_config(path, {"steps": 3})
    assert cfg.steps == 3 and cfg.use_se is False


@pytest.mark.parametrize("text,line", [("steps = 1\nbogus = 2\n", 2), ("steps = x\n", 1), ("\n\nnot a pair\n", 3),
                                       ("use_se = maybe\n", 1)])
def test_config_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError, match=f":{line}:"):
        parse_config_text(text)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_enc=-1)
    with pytest.raises(ConfigError):
        TrainConfig(noise_pool="dropout:7")
    with pytest.raises(ConfigError):
        TrainConfig(denoise_scope="everything")
    cfg = TrainConfig(steps=5)
    assert TrainConfig.from_json(cfg.to_json()) == cfg


# ---------------------------------------------------------------------------
# one step


def test_train_step_reports_all_terms(tiny_images, tmp_path):
    state = TrainState.create(tiny_config(tmp_path, noise_pool="dropout:0.3,blur:1"))
    msgs = tr.random_messages(state.rng, 4, 4)
    m = train_step(state, tiny_images[:4], msgs)
    assert state.step == 1
    assert set(m.row()) and len(m.row()) == len(METRICS_COLUMNS)
    assert m.noise_kind in ("dropout:0.3", "blur:1")
    for v in (m.l_enc, m.l_dec, m.l_adv, m.l_den, m.l_disc, m.l_total):
        assert np.isfinite(v)
    assert abs(m.l_total - total_loss(m.l_enc, m.l_dec, m.l_adv, m.l_den, DEFAULT_LAMBDAS)) < 1e-6


def test_term_isolation_without_decoder_and_denoiser_weights(tiny_images, tmp_path):
    cfg = tiny_config(tmp_path, lambda_dec=0.0, lambda_den=0.0, grad_clip=0.0)
    state = TrainState.create(cfg)
    model = state.model
    cover = Tensor(tiny_images[:4])
    msg = Tensor(tr.random_messages(state.rng, 4, 4))
    enc = model.encode(cover, msg)
    logits, pred = model.decode_logits(enc)
    l_dec = tr.decoder_loss(msg, F.sigmoid(logits))
    l_den = tr.denoiser_loss(model.denoiser(enc.detach()), enc, cover)
    l_enc = tr.encoder_loss(enc, cover)
    l_adv = F.bce_with_logits(model.discriminator(enc), 1.0)
    model.zero_grad()
    backward(total_loss(l_enc, l_dec, l_adv, l_den, cfg.lambdas))
    for _, p in model.decoder.named_parameters():
        assert not np.any(p.grad)
    for _, p in model.denoiser.named_parameters():
        assert not np.any(p.grad)


def test_denoiser_scope_controls_encoder_coupling(tiny_images, tmp_path):
    # with only the denoiser term active, the encoder moves only under end_to_end
    for scope, moves in (("denoiser", False), ("end_to_end", True)):
        cfg = tiny_config(tmp_path, lambda_enc=0, lambda_dec=0, lambda_adv=0, denoise_scope=scope)
        state = TrainState.create(cfg)
        state.model.encoder.head.weight.data[:] = 0.01
        before = state.model.encoder.image_in.conv.weight.data.copy()
        train_step(state, tiny_images[:4], tr.random_messages(state.rng, 4, 4))
        changed = not np.array_equal(before, state.model.encoder.image_in.conv.weight.data)
        assert changed is moves, scope


def test_same_seed_same_trace(tiny_images, tmp_path):
    def trace(seed):
        state = TrainState.create(tiny_config(tmp_path, seed=seed, noise_pool="dropout:0.3,crop:0.5"))
        rows = []
        for _ in range(3):
            idx = state.rng.choice(16, 4, replace=False)
            rows.append(train_step(state, tiny_images[idx], tr.random_messages(state.rng, 4, 4)).row())
        return rows

    assert trace(1) == trace(1)
    assert trace(1) != trace(2)


@pytest.mark.slow
def test_loss_decreases_over_500_steps(tiny_images, tmp_path):
    # step 1 is cheap (the zero-init head makes l_enc = l_den = 0), so the
    # denoiser needs enough width to explain the residual it is later given;
    # the end value is averaged over the last 20 batches
    for seed in range(3):
        cfg = tiny_config(tmp_path / str(seed), seed=seed, steps=500, encoder_channels=8,
                          decoder_channels=8, denoiser_channels=8)
        rows = read_metrics(train_loop(cfg, images=tiny_images).metrics_path)
        first = rows[0]["l_total"]
        last = np.mean([r["l_total"] for r in rows[-20:]])
        assert last < first, seed


# ---------------------------------------------------------------------------
# loop and checkpoints


def test_single_step_run_writes_one_row(tiny_images, tmp_path):
    result = train_loop(tiny_config(tmp_path, steps=1), images=tiny_images)
    with open(result.metrics_path) as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == list(METRICS_COLUMNS)
    assert len(lines) == 2
    assert result.final_checkpoint.exists()


def test_interval_checkpoints(tiny_images, tmp_path):
    result = train_loop(tiny_config(tmp_path, steps=7, checkpoint_interval=3), images=tiny_images)
    assert [p.name for p in result.checkpoints] == ["step_000003.ckpt", "step_000006.ckpt"]
    assert all(p.exists() for p in result.checkpoints)


def test_resume_continues_counter_and_matches_uninterrupted(tiny_images, tmp_path):
    full = train_loop(tiny_config(tmp_path / "a", steps=6), images=tiny_images)
    part = train_loop(tiny_config(tmp_path / "b", steps=6, checkpoint_interval=3), images=tiny_images)
    resumed_dir = tmp_path / "c"
    resumed = train_loop(tiny_config(resumed_dir, steps=6), images=tiny_images, resume=part.checkpoints[0])
    assert resumed.state.step == 6
    steps = [r["step"] for r in read_metrics(resumed.metrics_path)]
    assert steps == [4, 5, 6]
    a = read_metrics(full.metrics_path)[3:]
    b = read_metrics(resumed.metrics_path)
    assert a == b


def test_checkpoint_round_trip_bit_exact(tiny_images, tmp_path):
    state = train_loop(tiny_config(tmp_path, steps=2), images=tiny_images).state
    path = save_checkpoint(state, tmp_path / "x.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.step == state.step and loaded.config == state.config
    for (n1, p1), (n2, p2) in zip(state.model.named_parameters(), loaded.model.named_parameters()):
        assert n1 == n2 and p1.data.dtype == p2.data.dtype
        np.testing.assert_array_equal(p1.data, p2.data)
    assert state.opt_gen.state.t == loaded.opt_gen.state.t
    assert state.rng.random() == loaded.rng.random()
    msgs = np.ones((2, 4), dtype=np.float32)
    np.testing.assert_array_equal(tr.embed(state.model, tiny_images[:2], msgs),
                                  tr.embed(loaded.model, tiny_images[:2], msgs))


def test_truncated_or_damaged_checkpoint_rejected(tiny_images, tmp_path):
    state = TrainState.create(tiny_config(tmp_path))
    blob = (save_checkpoint(state, tmp_path / "ok.ckpt")).read_bytes()
    for bad, msg in [(blob[:-7], "truncated"), (b"XXXX" + blob[4:], "magic"),
                     (blob[:4] + (9).to_bytes(4, "little") + blob[8:], "version"), (blob + b"\0", "trailing")]:
        (tmp_path / "bad.ckpt").write_bytes(bad)
        with pytest.raises(CheckpointError, match=msg):
            load_checkpoint(tmp_path / "bad.ckpt")


def test_record_codec():
    records = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(2.5), "c": np.arange(3),
               "d": np.frombuffer(b"{}", dtype=np.uint8)}
    blob = encode_records(records)
    assert blob[:4] == MAGIC
    out = decode_records(blob)
    for k in records:
        np.testing.assert_array_equal(out[k], records[k])
        assert out[k].shape == records[k].shape
    with pytest.raises(CheckpointError):
        encode_records({"x": np.array(["s"])})


def test_record_files_are_written_atomically(tmp_path):
    write_records(tmp_path / "r.ckpt", {"a": np.zeros(2)})
    assert not list(tmp_path.glob("*.tmp"))
    np.testing.assert_array_equal(read_records(tmp_path / "r.ckpt")["a"], 0)


def test_nonfinite_loss_dumps_last_good(tiny_images, tmp_path, monkeypatch):
    def broken(encoded, cover):
        return F.mul(tr.encoder_loss.__wrapped__(encoded, cover), float("nan"))

    broken.__wrapped__ = None
    orig = tr.encoder_loss
    monkeypatch.setattr(tr, "encoder_loss", lambda e, c: F.mul(orig(e, c), float("nan")))
    with pytest.raises(NonFiniteLossError, match="last_good"):
        train_loop(tiny_config(tmp_path, steps=2), images=tiny_images)
    assert (tmp_path / "run" / "last_good.ckpt").exists()
    assert load_checkpoint(tmp_path / "run" / "last_good.ckpt").step == 0


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_rows_share_covers_and_messages(tiny_images, tmp_path):
    state = TrainState.create(tiny_config(tmp_path))
    specs = [parse_noise_spec("identity"), parse_noise_spec("blur:1")]
    res = tr.evaluate(state.model, tiny_images[:3], specs, seed=4, messages_per_image=2)
    assert set(res) == {"identity", "blur:1"}
    for r in res.values():
        assert r["n"] == 6 and 0 <= r["bar"] <= 1
        # zero-init head: encoded differs from cover only by 8-bit rounding
        assert r["psnr"] == tr.psnr(np.repeat(tiny_images[:3], 2, axis=0),
                                    tr.quantize_8bit(np.repeat(tiny_images[:3], 2, axis=0)))
    assert res == tr.evaluate(state.model, tiny_images[:3], specs, seed=4, messages_per_image=2)


def test_split_dataset(tmp_path):
    from photo_fixtures import write_patches

    write_patches(tmp_path / "data", np.random.default_rng(0).random((5, 3, 16, 16)))
    cfg = tiny_config(tmp_path, data_dir=str(tmp_path / "data"), holdout_count=2)
    train, held = tr.split_dataset(cfg)
    assert len(train) == 3 and len(held) == 2
