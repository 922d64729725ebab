import math

import numpy as np
import pytest

from maclookup import checkpoint as ckpt_io
from maclookup import config as config_io
from maclookup.autograd import Tensor, precision
from maclookup.checkpoint import Checkpoint, FormatError
from maclookup.data import AugmentConfig, synthesize_pairs
from maclookup.lut import LutConfig
from maclookup.maae import MaaeConfig, ModelConfig, enhance_array
from maclookup.optim import AdamState, MissingGradientError, adam_step, clip_grad_norm, cosine_lr
from maclookup.train import (HISTORY_COLUMNS, TrainConfig, TrainingError, lr_at_epoch, model_from_checkpoint,
                             train_run, write_history_csv)


def tiny_config(**kw) -> TrainConfig:
    model = ModelConfig(maae=MaaeConfig(stages=1, scales=2, channels=4, block_size=2, grid_size=2),
                        lut=LutConfig(hidden=(8, 8)), lut_identity_steps=20)
    base = dict(epochs=3, batch=2, lr_init=1e-3, lr_min=1e-5, model=model, aug=AugmentConfig(crop=16))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pairs():
    return synthesize_pairs(4, size=32, seed=3)


def adam_oracle(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


class TestAdam:
    def test_first_step_is_minus_lr(self):
        with precision("float64"):
            p = Tensor(np.array([0.0]), requires_grad=True)
            adam_step([p], [np.array([3.7])], AdamState(), 1e-2)
        assert p.data[0] == pytest.approx(-1e-2, rel=1e-6)

    def test_zero_gradient_keeps_params(self):
        with precision("float64"):
            p = Tensor(np.array([0.5, -2.0]), requires_grad=True)
            adam_step([p], [np.zeros(2)], AdamState(), 1e-2)
        np.testing.assert_array_equal(p.data, [0.5, -2.0])

    def test_scalar_oracle_ten_steps(self):
        grads = [0.3, -1.2, 2.0, 0.0, 0.7, -0.1, 5.0, -3.3, 0.25, 1.0]
        with precision("float64"):
            p = Tensor(np.array([0.0]), requires_grad=True)
            st = AdamState()
            for g in grads:
                adam_step([p], [np.array([g])], st, 1e-3)
        assert abs(p.data[0] - adam_oracle(grads, 1e-3)) < 1e-10
        assert st.step == 10

    def test_missing_gradient(self):
        p = Tensor(np.zeros(2), requires_grad=True, name="w")
        with pytest.raises(MissingGradientError, match="w"):
            adam_step([p], [None], AdamState(), 1e-3)

    def test_clip(self):
        g = [np.array([3.0]), np.array([4.0])]
        assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
        assert math.hypot(g[0][0], g[1][0]) == pytest.approx(1.0, abs=1e-9)
        g = [np.array([0.3])]
        clip_grad_norm(g, 1.0)
        assert g[0][0] == 0.3


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 200, 2e-4, 1e-6) == 2e-4
        assert cosine_lr(199, 200, 2e-4, 1e-6) == pytest.approx(1e-6, abs=1e-18)
        assert cosine_lr(100, 201, 2e-4, 1e-6) == pytest.approx((2e-4 + 1e-6) / 2)

    def test_monotone(self):
        cfg = TrainConfig(epochs=50)
        lrs = [lr_at_epoch(e, cfg) for e in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(5, 5, 1e-3, 1e-5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_init=1e-5, lr_min=1e-3)
        with pytest.raises(ValueError):
            TrainConfig(batch=0)


class TestTrainRun:
    def test_zero_epochs(self, pairs):
        res = train_run(pairs, tiny_config(epochs=0))
        assert res.history == []

    def test_history_fields(self, pairs):
        res = train_run(pairs, tiny_config(epochs=2))
        assert [r.epoch for r in res.history] == [0, 1]
        for r in res.history:
            assert all(math.isfinite(getattr(r, c)) for c in HISTORY_COLUMNS)
        assert res.history[0].lr == 1e-3

    def test_deterministic(self, pairs):
        a = train_run(pairs, tiny_config())
        b = train_run(pairs, tiny_config())
        assert a.history == b.history
        for k, v in a.model.state_dict().items():
            np.testing.assert_array_equal(v, b.model.state_dict()[k])

    def test_seed_changes_run(self, pairs):
        a = train_run(pairs, tiny_config(epochs=1))
        b = train_run(pairs, tiny_config(epochs=1, seed=1))
        assert a.history != b.history

    def test_every_parameter_moves(self, pairs):
        cfg = tiny_config(epochs=1, aug=AugmentConfig.disabled())
        res0 = train_run(pairs, tiny_config(epochs=0, aug=AugmentConfig.disabled()))
        res1 = train_run(pairs, cfg)
        before, after = res0.model.state_dict(), res1.model.state_dict()
        for k in before:
            assert not np.array_equal(before[k], after[k]), k

    def test_non_finite_names_term(self, pairs):
        bad = [(np.full_like(pairs[0][0], np.nan), pairs[0][1])]
        with pytest.raises(TrainingError) as e:
            train_run(bad, tiny_config(epochs=1, aug=AugmentConfig.disabled()))
        assert e.value.term in str(e.value) and e.value.epoch == 0

    def test_outputs_written(self, pairs, tmp_path):
        train_run(pairs, tiny_config(epochs=2, checkpoint_every=1), out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["epoch0001.macl", "epoch0002.macl", "history.csv", "model.macl"]
        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0].split(",") == HISTORY_COLUMNS and len(lines) == 3

    def test_resume_matches_uninterrupted(self, pairs):
        cfg = tiny_config(epochs=4)
        full = train_run(pairs, cfg)
        part = train_run(pairs, cfg, stop_epoch=2)
        ck = ckpt_io.decode(ckpt_io.encode(part.to_checkpoint()))
        rest = train_run(pairs, cfg, resume=ck)
        assert len(rest.history) == 4
        for a, b in zip(full.history, rest.history):
            assert abs(a.l_total - b.l_total) <= 1e-6
        for k, v in full.model.state_dict().items():
            np.testing.assert_allclose(rest.model.state_dict()[k], v, atol=1e-6)


class TestCheckpoint:
    @pytest.fixture(scope="class")
    @classmethod
    def trained(cls, pairs):
        return train_run(pairs, tiny_config(epochs=1))

    def test_bitwise_round_trip(self, trained, pairs, tmp_path):
        path = tmp_path / "m.macl"
        ckpt_io.save(path, trained.to_checkpoint())
        model = model_from_checkpoint(ckpt_io.load(path))
        for k, v in trained.model.state_dict().items():
            np.testing.assert_array_equal(model.state_dict()[k], v)
        np.testing.assert_array_equal(enhance_array(model, pairs[0][0]), enhance_array(trained.model, pairs[0][0]))

    def test_encoding_stable(self, trained):
        data = ckpt_io.encode(trained.to_checkpoint())
        assert ckpt_io.encode(ckpt_io.decode(data)) == data

    def test_optimizer_state(self, trained):
        ck = ckpt_io.decode(ckpt_io.encode(trained.to_checkpoint()))
        assert ck.adam.step == trained.adam.step
        for a, b in zip(ck.adam.m, trained.adam.m):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic(self, trained):
        data = bytearray(ckpt_io.encode(trained.to_checkpoint()))
        data[0:4] = b"XXXX"
        with pytest.raises(FormatError) as e:
            ckpt_io.decode(bytes(data))
        assert e.value.offset == 0

    def test_truncated(self, trained):
        data = ckpt_io.encode(trained.to_checkpoint())
        with pytest.raises(FormatError):
            ckpt_io.decode(data[: len(data) // 2])

    def test_unknown_version(self):
        data = ckpt_io.encode(Checkpoint("", {}))
        data = data[:4] + (99).to_bytes(4, "little") + data[8:]
        with pytest.raises(FormatError, match="version"):
            ckpt_io.decode(data)

    def test_corruption_detected(self, trained):
        data = bytearray(ckpt_io.encode(trained.to_checkpoint()))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(FormatError):
            ckpt_io.decode(bytes(data))

    def test_ablation_only_removes(self, trained):
        ck = trained.to_checkpoint()
        assert model_from_checkpoint(ck, use_cltcc=False).lut is None
        assert model_from_checkpoint(ck, use_maae=False).maae is None
        ck.config_text = ck.config_text.replace("model.use_cltcc = true", "model.use_cltcc = false")
        with pytest.raises(ValueError, match="lacks"):
            model_from_checkpoint(ck, use_cltcc=True)


class TestConfig:
    def test_round_trip(self):
        cfg = tiny_config(seed=9, lr_init=3e-3)
        back = config_io.loads(TrainConfig, config_io.dumps(cfg))
        assert back == cfg

    def test_dotted_override(self):
        cfg = config_io.apply(TrainConfig(), {"model.maae.channels": "6", "aug.crop": "32",
                                              "model.lut.hidden": "16,16", "loss.gt_in_total": "false"})
        assert cfg.model.maae.channels == 6 and cfg.aug.crop == 32
        assert cfg.model.lut.hidden == (16, 16) and cfg.loss.gt_in_total is False

    def test_unknown_key(self):
        with pytest.raises(config_io.ConfigError, match="bogus"):
            config_io.apply(TrainConfig(), {"bogus": "1"})

    def test_bad_value(self):
        with pytest.raises(config_io.ConfigError):
            config_io.apply(TrainConfig(), {"epochs": "many"})

    def test_comments_and_blank_lines(self):
        vals = config_io.parse_lines("# hi\n\nepochs = 7\n  seed=2  # trailing\n")
        cfg = config_io.apply(TrainConfig(), vals)
        assert cfg.epochs == 7 and cfg.seed == 2

    def test_malformed_line(self):
        with pytest.raises(config_io.ConfigError):
            config_io.parse_lines("epochs 7")


def test_history_csv_format(tmp_path, pairs):
    res = train_run(pairs, tiny_config(epochs=1))
    write_history_csv(tmp_path / "h.csv", res.history)
    row = (tmp_path / "h.csv").read_text().splitlines()[1].split(",")
    assert float(row[HISTORY_COLUMNS.index("l_total")]) == res.history[0].l_total
