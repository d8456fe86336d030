import csv
import dataclasses

import numpy as np
import pytest
import torch

from longreg import netgrad, trainer
from longreg.cohort import LongitudinalDataset, Patient, Visit, make_pair
from longreg.losses import LossWeights
from longreg.trainer import (TrainConfig, combine_terms, group_features, registration_loss, loss_with_mmd,
                             parse_config_text, register, train)
from longreg.volgrid import Volume3D


SMALL = dict(channels=(4, 8), batch=2, log_every=0, val_every=5)


class TestRegistrationLoss:
    def test_perfect_alignment(self):
        m = torch.zeros(1, 8, 8, 8)
        m[0, 2:6, 2:6, 2:6] = 1
        img = torch.rand(1, 8, 8, 8)
        w = LossWeights(alpha=1, beta=1, gamma=1, dice_scales=(0,))
        j = registration_loss(img, m, torch.zeros(1, 3, 8, 8, 8), img, m, w)
        assert float(j) == pytest.approx(-1.0, abs=1e-5)

    def test_arithmetic(self):
        w = LossWeights(alpha=1, beta=1, gamma=50)
        assert combine_terms([0.5], [0.25], [0.01], w) == pytest.approx(0.25)
        t = combine_terms(torch.tensor([0.5]), torch.tensor([0.25]), torch.tensor([0.01]), w)
        assert float(t) == pytest.approx(0.25)

    def test_weights_linear(self):
        w = LossWeights(alpha=0.7, beta=1.3, gamma=20)
        w2 = LossWeights(alpha=1.4, beta=2.6, gamma=40)
        args = ([0.6, 0.8], [0.1, 0.3], [0.001, 0.004])
        assert combine_terms(*args, w2) == pytest.approx(2 * combine_terms(*args, w))

    def test_batch_mean(self):
        w = LossWeights()
        assert combine_terms([0.2, 0.4], [0, 0], [0, 0], w) == pytest.approx(-0.3)


class TestMMDLoss:
    def test_lambda_zero(self):
        j = torch.tensor(0.3)
        out, _ = loss_with_mmd(j, torch.randn(2, 4), torch.randn(2, 4), LossWeights(lam=0.0))
        assert float(out) == float(j)

    def test_identical_groups(self):
        v = torch.randn(2, 5, dtype=torch.float64)
        j = torch.tensor(0.3, dtype=torch.float64)
        out, mmd = loss_with_mmd(j, v, v.clone(), LossWeights(lam=0.01, sigma=1.0))
        assert float(mmd) == pytest.approx(-1.0, abs=1e-12)
        assert float(out) == pytest.approx(0.3 - 0.01, abs=1e-12)

    def test_arithmetic(self):
        # identical groups with I = J = 4 give mmd_sq = -2/4
        v = torch.zeros(4, 3, dtype=torch.float64)
        out, mmd = loss_with_mmd(torch.tensor(0.0, dtype=torch.float64), v, v, LossWeights(sigma=1.0))
        assert float(mmd) == pytest.approx(-0.5)
        assert float(out) == pytest.approx(-0.005)

    def test_grouping(self):
        f = torch.arange(8.0).reshape(4, 2)
        a, b = group_features(f, ["IF", "IF", "IB", "IB"], "IF+IB")
        assert a.tolist() == [[0, 1], [2, 3]] and b.tolist() == [[4, 5], [6, 7]]
        a, b = group_features(f, ["IF", "IB", "IT", "IT"], "IT+IF+IB")
        assert len(a) == 2 and len(b) == 2
        a, b = group_features(f, ["IF", "IB", "IT", "IT"], "IT+IF+IB", "if_vs_rest")
        assert len(a) == 1 and len(b) == 3
        with pytest.raises(ValueError):
            group_features(f, ["IF", "IF", "IF", "IF"], "IF+IB")


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch, c.lr, c.val_every) == (4, 1e-4, 200)
        assert (c.weights.alpha, c.weights.beta, c.weights.gamma, c.weights.lam) == (1, 1, 50, 0.01)
        assert trainer.FULL_SCALE_LR == 1e-5

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(use_mmd=True, batch=1, strategy="IF+IB"),
                                    dict(use_mmd=True, strategy="IF"), dict(mmd_grouping="x"),
                                    dict(strategy="bogus")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_roundtrip(self):
        c = TrainConfig(strategy="it+if+ib", use_mmd=True, lr=3e-4, channels=(4, 8),
                        weights=LossWeights(gamma=10, sigma=2.5, dice_scales=(0, 2)))
        again = parse_config_text(trainer.dump_config(c))
        assert again == c

    def test_parse_errors(self):
        with pytest.raises(ValueError):
            parse_config_text("nonsense = 1")
        with pytest.raises(ValueError):
            parse_config_text("alpha")
        c = parse_config_text("lambda = 0  # off\nsigma = median\nuse_mmd = on\nstrategy = if+ib")
        assert c.weights.lam == 0 and c.weights.sigma is None and c.use_mmd


def one_pair_dataset(small_ds):
    return LongitudinalDataset([small_ds.patients[0]])


class TestTrain:
    def test_lr_zero_keeps_params(self, small_ds, tmp_path):
        cfg = TrainConfig(iterations=1, lr=0.0, **SMALL)
        p0 = netgrad.init_params(cfg.arch, seed=cfg.seed)
        res = train(small_ds, None, cfg, tmp_path)
        assert all(torch.equal(res.params.tensors[k], p0.tensors[k]) for k in p0.tensors)
        again = netgrad.load_checkpoint(res.checkpoint)
        assert all(torch.equal(again.tensors[k], p0.tensors[k]) for k in p0.tensors)

    def test_deterministic_logs(self, small_ds, tmp_path):
        cfg = TrainConfig(iterations=6, lr=1e-3, **SMALL)
        a = train(small_ds, small_ds, cfg, tmp_path / "a")
        b = train(small_ds, small_ds, cfg, tmp_path / "b")
        assert a.log_path.read_text() == b.log_path.read_text()
        assert (tmp_path / "a" / "val_log.csv").read_text() == (tmp_path / "b" / "val_log.csv").read_text()

    def test_outputs(self, small_ds, tmp_path):
        cfg = TrainConfig(iterations=10, lr=1e-3, strategy="IF+IB", use_mmd=True, **SMALL)
        res = train(small_ds, small_ds, cfg, tmp_path)
        with open(res.log_path) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == trainer.LOG_HEADER and len(rows) == 11
        assert all(np.isfinite(float(v)) for r in rows[1:] for v in r)
        assert res.best_checkpoint.exists() and res.checkpoint.exists()
        assert [it for it, *_ in res.val_history] == [5, 10]
        assert parse_config_text((tmp_path / "config.txt").read_text()) == cfg

    def test_lambda_zero_matches_plain_loss(self, small_ds, tmp_path):
        base = dict(iterations=20, lr=1e-3, strategy="IF+IB", **SMALL)
        a = train(small_ds, None, TrainConfig(**base), tmp_path / "a")
        b = train(small_ds, None, TrainConfig(use_mmd=True, weights=LossWeights(lam=0.0), **base),
                  tmp_path / "b")
        assert [r[:5] for r in a.history] == [r[:5] for r in b.history]
        assert all(torch.equal(a.params.tensors[k], b.params.tensors[k]) for k in a.params.tensors)

    def test_non_finite_aborts(self, small_ds, tmp_path):
        cfg = TrainConfig(iterations=3, weights=LossWeights(beta=float("inf")), **SMALL)
        with pytest.raises(FloatingPointError):
            train(small_ds, None, cfg, tmp_path)

    def test_single_pair_overfit(self, small_ds, tmp_path):
        ds = one_pair_dataset(small_ds)
        ds = LongitudinalDataset([Patient(ds.patients[0].pid, ds.patients[0].visits[:2])])
        cfg = TrainConfig(iterations=100, lr=1e-3, batch=1, log_every=0)
        res = train(ds, None, cfg, tmp_path)
        j = np.array([r[1] for r in res.history])
        assert j[-10:].mean() < j[:10].mean()
        scale = np.abs(j).max()
        # Adam's first steps may overshoot; after that no rebound exceeds 10% of the loss scale
        running_min = np.minimum.accumulate(j)
        assert np.all((j - running_min)[10:] <= 0.1 * scale)


class TestRegister:
    def test_zero_init_is_identity(self, small_ds):
        pid = small_ds.patients[0].pid
        s = make_pair(small_ds, "IF", pid, 0, pid, 1)
        reg = register(netgrad.init_params(), s.moving_image, s.moving_mask, s.fixed_image)
        assert reg.warped_image == s.moving_image and reg.warped_mask == s.moving_mask
        assert reg.ddf.disp.shape == (3, 16, 16, 16)

    def test_never_needs_fixed_mask(self, small_ds):
        pid = small_ds.patients[0].pid
        s = make_pair(small_ds, "IF", pid, 0, pid, 1)
        reg = register(netgrad.init_params(), s.moving_image, None, s.fixed_image)
        assert reg.warped_mask is None

    def test_timing_32(self, tmp_path):
        rng = np.random.default_rng(0)
        m, f = Volume3D(rng.random((32, 32, 32))), Volume3D(rng.random((32, 32, 32)))
        path = tmp_path / "c.lrck"
        netgrad.save_checkpoint(path, netgrad.init_params())
        reg = register(path, m, Volume3D((m.data > 0.5).astype(np.float32)), f)
        assert reg.ddf.disp.shape == (3, 32, 32, 32)
        assert 0 < reg.seconds < 2.0

    def test_arch_mismatch(self, tmp_path):
        path = tmp_path / "c.lrck"
        netgrad.save_checkpoint(path, netgrad.init_params(netgrad.Arch(2, (4, 8))))
        v = Volume3D(np.zeros((16, 16, 16)))
        with pytest.raises(ValueError):
            register(path, v, None, v, arch=netgrad.Arch())
