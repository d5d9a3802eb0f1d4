import csv
import math

import numpy as np
import pytest
import torch

from apdlab.apd_training import (EnergyMLP, TraceMismatchError, TraceTensors, TrainConfig,
                                 TrainingAbortedError, batch_loss, curve_values, gradient_check,
                                 load_mlp, loss_l1, loss_l2, loss_l3, mlp_forward, predict_ap,
                                 random_smooth_instance, save_mlp, total_loss, train_alm_prime)
from apdlab.lm_family import TinyLM, SizeSpec
from apdlab.synthetic import oracle_traces


class TestPredictAP:
    def test_equal_logits_uniform(self):
        np.testing.assert_allclose(predict_ap(torch.tensor([1.0, 2.0, 3.0]), torch.tensor([1.0, 2.0, 3.0])),
                                   np.full(3, 1 / 3))

    def test_singleton(self):
        assert predict_ap(torch.tensor([0.3]), torch.tensor([-2.0])).item() == pytest.approx(1.0)

    def test_hand_softmax(self):
        ap = predict_ap(torch.tensor([math.log(3), 0.0], dtype=torch.float64), torch.zeros(2))
        np.testing.assert_allclose(ap, [0.75, 0.25], atol=1e-12)

    def test_mask(self):
        ap = predict_ap(torch.tensor([[1.0, 1.0, 5.0]]), torch.zeros(1, 3), torch.tensor([[True, True, False]]))
        np.testing.assert_allclose(ap, [[0.5, 0.5, 0.0]])

    def test_empty(self):
        with pytest.raises(ValueError):
            predict_ap(torch.zeros(0), torch.zeros(0))


class TestMLP:
    def test_init_outputs_ones(self, rng):
        mlp = EnergyMLP(5)
        for _ in range(10):
            np.testing.assert_array_equal(mlp_forward(mlp, rng.random(), rng.random(5)), [1.0, 1.0, 1.0])

    def test_fracpoly_outputs(self):
        mlp = EnergyMLP(4, curve="fracpoly", fracpoly_k=1)
        assert mlp_forward(mlp, 0.2, [0.5, 0.4, 0.3, 0.3]).shape == (5,)

    def _trained(self):
        mlp = EnergyMLP(6, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            mlp.layers[-1].weight.normal_(0, 0.5, generator=torch.Generator().manual_seed(2))
        return mlp

    def test_dropout_determinism(self):
        mlp = self._trained()
        x = (0.3, [0.6, 0.5, 0.45, 0.4, 0.38, 0.35])
        a = mlp_forward(mlp, *x, dropout_seed=11)
        np.testing.assert_array_equal(a, mlp_forward(mlp, *x, dropout_seed=11))
        np.testing.assert_array_equal(mlp_forward(mlp, *x), mlp_forward(mlp, *x))

    def test_dropout_only_touches_middle_models(self):
        mlp = EnergyMLP(6)
        gen = torch.Generator().manual_seed(0)
        x = torch.ones(2000, 7)
        seen = []
        orig = mlp.layers[0].forward
        mlp.layers[0].forward = lambda h: (seen.append(h.clone()), orig(h))[1]
        mlp(x, gen)
        h = seen[0]
        assert torch.all(h[:, :3] == 1.0)  # AP, model 1, model 2 are never dropped
        assert torch.all(h[:, 6] == 1.0)   # nor the largest model
        mid = h[:, 3:6]
        assert set(mid.unique().tolist()) == {0.0, 2.0}
        assert abs(mid.mean().item() - 1.0) < 0.05

    def test_input_validation(self):
        mlp = EnergyMLP(3)
        with pytest.raises(ValueError):
            mlp_forward(mlp, 0.2, [0.5, float("nan"), 0.1])
        with pytest.raises(ValueError):
            mlp_forward(mlp, 1.2, [0.5, 0.4, 0.1])
        with pytest.raises(ValueError):
            mlp_forward(mlp, 0.2, [0.5, 0.4])


class TestLosses:
    def test_l1_hand(self):
        pred = torch.tensor([[0.0, 0.0, 0.5]], dtype=torch.float64)
        obs = torch.tensor([[0.1, 0.2, 0.9]], dtype=torch.float64)
        assert loss_l1(pred, obs).item() == pytest.approx(0.15811, abs=1e-5)

    def test_l1_zero_and_homogeneous(self, rng):
        obs = torch.from_numpy(rng.random((4, 5)))
        assert loss_l1(obs, obs).item() == pytest.approx(0.0, abs=1e-6)
        pred = obs + torch.from_numpy(rng.normal(0, 0.1, (4, 5)))
        base = loss_l1(pred, obs).item()
        assert loss_l1(obs + 3 * (pred - obs), obs).item() == pytest.approx(3 * base, rel=1e-6)

    def test_l1_ignores_elm(self, rng):
        obs = torch.from_numpy(rng.random((3, 4)))
        pred = torch.from_numpy(rng.random((3, 4)))
        moved = obs.clone()
        moved[:, -1] += 0.2
        assert loss_l1(pred, moved).item() == loss_l1(pred, obs).item()
        assert loss_l2(pred[:, -1], moved[:, -1]).item() != loss_l2(pred[:, -1], obs[:, -1]).item()

    def test_l2(self):
        assert loss_l2(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.4])).item() == pytest.approx(0.31623, abs=1e-5)
        assert loss_l2(torch.tensor([0.3, 0.1]), torch.tensor([0.4, 0.2])).item() == pytest.approx(0.0, abs=1e-6)
        vals = [loss_l2(torch.tensor([0.4 + o], dtype=torch.float64), torch.tensor([0.4])).item()
                for o in (0.01, 0.05, 0.1, 0.3)]
        assert vals == sorted(vals)

    def test_l3(self):
        a = torch.tensor([1.0, 2.0], dtype=torch.float64)
        assert loss_l3(a, a).item() == pytest.approx(0.0, abs=1e-6)
        assert loss_l3(torch.tensor([1.3], dtype=torch.float64), torch.tensor([1.0])).item() == pytest.approx(0.3, abs=1e-6)
        assert loss_l3(a + 0.2, a).item() == pytest.approx(loss_l3(a - 0.2, a).item())

    def test_total(self):
        assert total_loss(0.1, 0.02, 0.05, 10.0, 0.8).total.item() == pytest.approx(0.34)
        assert total_loss(0.0, 0.0, 0.0).total.item() == 0.0
        assert total_loss(0.1, 0.5, 0.7, 0.0, 0.0).total.item() == pytest.approx(0.1)
        # exact linearity in the weights
        a = total_loss(0.1, 0.02, 0.05, 4.0, 0.3).total.item()
        b = total_loss(0.1, 0.02, 0.05, 8.0, 0.6).total.item()
        assert b - 0.1 == pytest.approx(2 * (a - 0.1))

    def test_masked_z_uses_real_candidates(self):
        pred = torch.tensor([[[0.0, 0.0, 0.0], [9.0, 9.0, 9.0]]], dtype=torch.float64)
        obs = torch.tensor([[[0.1, 0.2, 0.0], [0.0, 0.0, 0.0]]], dtype=torch.float64)
        m = torch.tensor([[True, False]])
        assert loss_l1(pred, obs, m).item() == pytest.approx(0.15811, abs=1e-5)


class TestCurves:
    def test_matches_numpy_evaluators(self):
        from apdlab.curves import CurveParams, curve_eval
        s = torch.linspace(0, 6, 9, dtype=torch.float64)
        for fam, extra in (("exp", []), ("logistic", []), ("fracpoly", [0.2, 0.3])):
            params = torch.tensor([0.3, 0.8, 1.5] + extra, dtype=torch.float64)
            got = curve_values(fam, torch.tensor(0.1, dtype=torch.float64), params, s)
            ref = curve_eval(CurveParams(fam, 0.1, 0.3, 0.8, 1.5, tuple(extra)), s.numpy())
            np.testing.assert_allclose(got.numpy(), ref, atol=1e-12)


class TestGradients:
    def test_smooth_instances(self):
        for seed in range(5):
            assert gradient_check(seed)["max_rel_error"] <= 1e-4

    @pytest.mark.parametrize("curve", ["logistic", "fracpoly"])
    def test_other_families(self, curve):
        assert gradient_check(0, curve=curve)["max_rel_error"] <= 1e-4

    def test_l3_closed_form(self):
        mlp, almp, data = random_smooth_instance(3)
        almp.requires_grad_(True)
        out = batch_loss(mlp, almp, data, lambda2=0.0, lambda3=1.0)
        (out.l3).backward()
        z = data.mask.sum()
        expected = (almp.detach() - data.l_alm) / (z * out.l3.detach())
        np.testing.assert_allclose(almp.grad.numpy(), expected.numpy(), rtol=1e-6)

    def test_zero_loss_zero_gradient(self):
        mlp, almp, data = random_smooth_instance(4)
        with torch.no_grad():
            _, ap_f, params, pred = batch_loss(mlp, almp, data, 1.0, 1.0, return_curves=True)
        theta = torch.cat([ap_f.unsqueeze(-1), params], -1).requires_grad_(True)
        pred = curve_values("exp", theta[..., 0], theta[..., 1:], data.s)
        target = pred.detach()
        loss = loss_l1(pred, target) + 10 * loss_l2(pred[..., -1], target[..., -1] + 0.01)
        l3 = loss_l3(data.l_alm.clone().requires_grad_(True), data.l_alm)
        (loss + l3).backward()
        assert theta.grad.abs().max().item() == 0.0


def _alm(vocab=12, k=3, seed=0):
    m = TinyLM(vocab, k, SizeSpec(4, (8, 8)))
    m.reset_parameters(torch.Generator().manual_seed(seed))
    return m


class TestTraining:
    def test_zero_lr_is_noop(self):
        alm = _alm()
        tr = oracle_traces(alm, n_records=70, n_models=4, seed=0)
        res = train_alm_prime(tr, alm, TrainConfig(lr=0.0, epochs=1, warmup=1))
        for a, b in zip(alm.state_dict().values(), res.alm_prime.state_dict().values()):
            assert torch.equal(a, b)

    def test_determinism(self, tmp_path):
        alm = _alm()
        tr = oracle_traces(alm, n_records=100, n_models=4, seed=1)
        cfg = TrainConfig(lr=1e-3, epochs=2, warmup=2, seed=5)
        a = train_alm_prime(tr, alm, cfg, log_path=tmp_path / "log.csv")
        b = train_alm_prime(tr, alm, cfg)
        assert a.alm_prime.digest() == b.alm_prime.digest()
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["step", "L1", "L2", "L3", "total", "lr"]
        assert len(rows) - 1 == math.ceil(100 / 64) * 2

    def test_warmup_schedule(self):
        alm = _alm()
        tr = oracle_traces(alm, n_records=64 * 6, n_models=4, seed=1)
        res = train_alm_prime(tr, alm, TrainConfig(lr=1e-3, epochs=1, warmup=4))
        lrs = [h["lr"] for h in res.history]
        np.testing.assert_allclose(lrs, [2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3])

    def test_warmup_longer_than_run(self):
        alm = _alm()
        tr = oracle_traces(alm, n_records=10, n_models=4, seed=1)
        with pytest.raises(ValueError):
            train_alm_prime(tr, alm, TrainConfig(epochs=1, warmup=5))

    def test_hash_and_logit_checks(self):
        alm = _alm()
        tr = oracle_traces(alm, n_records=10, n_models=4, seed=1)
        with pytest.raises(TraceMismatchError):
            train_alm_prime(tr, alm, TrainConfig(epochs=1, warmup=0), family_hash="nope")
        with pytest.raises(TraceMismatchError):
            train_alm_prime(tr, _alm(seed=9), TrainConfig(epochs=1, warmup=0))

    def test_nan_abort(self):
        alm = _alm()
        tr = oracle_traces(alm, n_records=10, n_models=4, seed=1)
        tr.records[0].probs[:] = np.nan
        with pytest.raises(TrainingAbortedError) as exc:
            train_alm_prime(tr, alm, TrainConfig(epochs=1, warmup=0))
        assert exc.value.batch == 0

    def test_flip_pattern_fixed_by_observations(self):
        alm = _alm()
        tr = oracle_traces(alm, n_records=20, n_models=4, seed=2)
        data = TraceTensors.from_traces(tr)
        p = data.probs
        assert torch.equal(data.flipped, p[..., 0] < p[..., -1])

    def test_loss_decreases_on_oracle_traces(self):
        alm = _alm()
        tr = oracle_traces(alm, n_records=640, n_models=5, seed=3)
        res = train_alm_prime(tr, alm, TrainConfig(lr=3e-3, epochs=1, warmup=2, seed=0))
        tot = [h["total"] for h in res.history]
        assert np.mean(tot[-3:]) < np.mean(tot[:3])

    def test_lambda3_zero_drifts_further(self):
        alm = _alm()
        tr = oracle_traces(alm, n_records=256, n_models=4, seed=4, flat=True)
        l3 = {}
        for lam in (0.0, 0.8):
            res = train_alm_prime(tr, alm, TrainConfig(lambda3=lam, lr=3e-3, epochs=5, warmup=2))
            l3[lam] = res.history[-1]["l3"]
        assert l3[0.0] > l3[0.8]


def test_mlp_checkpoint(tmp_path):
    mlp = EnergyMLP(5, hidden=7, curve="logistic", generator=torch.Generator().manual_seed(3))
    save_mlp(mlp, tmp_path / "m.bin")
    back = load_mlp(tmp_path / "m.bin")
    x = torch.rand(4, 6)
    assert torch.equal(mlp(x), back(x))
    assert back.curve == "logistic"
