"""Unit tests for batch-norm statistics extraction, capture, and the
Gaussian-KL matching loss."""

import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from dfq.bnstats import (BNStatsTable, bns_loss, capture_empirical_stats,
                         extract_reference_stats, gaussian_kl)
from dfq.errors import ContractError, DomainError, StructuralError


class TwoBnNet(nn.Module):
    def __init__(self, c1=16, c2=32):
        super().__init__()
        self.conv1 = nn.Conv2d(1, c1, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(c1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(c2)

    def forward(self, x):
        return self.bn2(self.conv2(torch.relu(self.bn1(self.conv1(x)))))


class TestGaussianKL:
    def test_identical_distributions_zero(self):
        assert float(gaussian_kl(0.0, 1.0, 0.0, 1.0)) == pytest.approx(0.0, abs=1e-9)

    def test_mean_shift_closed_form(self):
        assert float(gaussian_kl(1.0, 1.0, 0.0, 1.0)) == pytest.approx(0.5, abs=1e-9)

    def test_variance_ratio_closed_form(self):
        expected = (0.0 + 4.0) / 2.0 - math.log(2.0 / 1.0) - 0.5
        assert float(gaussian_kl(0.0, 4.0, 0.0, 1.0)) == pytest.approx(expected, abs=1e-9)

    def test_monte_carlo_oracle(self):
        # KL(N(1,1) || N(0,1)) estimated from the log-density ratio
        rng = torch.Generator().manual_seed(12345)
        x = torch.randn(1_000_000, generator=rng, dtype=torch.float64) + 1.0
        log_ratio = (-0.5 * (x - 1.0) ** 2) - (-0.5 * x**2)
        estimate = float(log_ratio.mean())
        assert float(gaussian_kl(1.0, 1.0, 0.0, 1.0)) == pytest.approx(estimate, abs=0.01)

    def test_zero_empirical_variance_is_finite(self):
        v = float(gaussian_kl(0.0, 0.0, 0.0, 1.0))
        assert math.isfinite(v) and v > 0

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            gaussian_kl(0.0, 1.0, 0.0, 0.0)
        with pytest.raises(DomainError):
            gaussian_kl(0.0, 1.0, 0.0, -1.0)
        with pytest.raises(DomainError):
            gaussian_kl(0.0, -0.5, 0.0, 1.0)

    @given(st.floats(-20, 20), st.floats(0, 100), st.floats(-20, 20),
           st.floats(1e-4, 100))
    @settings(max_examples=200, deadline=None)
    def test_nonnegative(self, mu_hat, var_hat, mu, var):
        assert float(gaussian_kl(mu_hat, var_hat, mu, var)) >= 0.0

    def test_zero_iff_equal(self):
        assert float(gaussian_kl(0.7, 2.3, 0.7, 2.3)) == pytest.approx(0.0, abs=1e-12)
        assert float(gaussian_kl(0.7, 2.3, 0.7, 2.4)) > 0.0

    def test_tensor_inputs_elementwise(self):
        mu_hat = torch.tensor([0.0, 1.0])
        var_hat = torch.tensor([1.0, 1.0])
        out = gaussian_kl(mu_hat, var_hat, torch.zeros(2), torch.ones(2))
        assert out.shape == (2,)
        assert out[0].item() == pytest.approx(0.0, abs=1e-6)
        assert out[1].item() == pytest.approx(0.5, abs=1e-6)


class TestExtractReference:
    def test_entry_count(self):
        table = extract_reference_stats(TwoBnNet(16, 32).eval())
        assert table.num_entries() == 48
        assert table.layer_names() == ["bn1", "bn2"]

    def test_fresh_bn_default_stats(self):
        table = extract_reference_stats(TwoBnNet().eval())
        for _, _, mean, var in table.entries():
            assert mean == 0.0 and var == 1.0

    def test_no_bn_model_rejected(self):
        net = nn.Sequential(nn.Conv2d(1, 4, 3), nn.ReLU())
        with pytest.raises(StructuralError, match="no batch normalization"):
            extract_reference_stats(net)


class TestCapture:
    def test_matches_independent_hook_oracle(self):
        torch.manual_seed(0)
        net = TwoBnNet().eval()
        x = torch.randn(8, 1, 14, 14)

        grabbed = {}
        def oracle_hook(mod, inputs, name):
            grabbed[name] = inputs[0].detach().clone()
        h1 = net.bn1.register_forward_pre_hook(
            lambda m, i: oracle_hook(m, i, "bn1"))
        h2 = net.bn2.register_forward_pre_hook(
            lambda m, i: oracle_hook(m, i, "bn2"))
        with torch.no_grad():
            net(x)
        h1.remove(); h2.remove()

        stats = capture_empirical_stats(net, x)
        for name in ("bn1", "bn2"):
            t = grabbed[name]
            mean = t.mean(dim=(0, 2, 3))
            var = t.var(dim=(0, 2, 3), unbiased=False)
            got_mean, got_var = stats.layers[name]
            torch.testing.assert_close(got_mean, mean, rtol=1e-5, atol=1e-7)
            torch.testing.assert_close(got_var, var, rtol=1e-5, atol=1e-7)

    def test_duplication_invariance(self):
        torch.manual_seed(1)
        net = TwoBnNet().eval()
        x = torch.randn(4, 1, 14, 14)
        s1 = capture_empirical_stats(net, x)
        s2 = capture_empirical_stats(net, torch.cat([x, x]))
        for name in s1.layers:
            torch.testing.assert_close(s1.layers[name][0], s2.layers[name][0],
                                       rtol=1e-6, atol=1e-7)
            torch.testing.assert_close(s1.layers[name][1], s2.layers[name][1],
                                       rtol=1e-6, atol=1e-7)

    def test_constant_zero_input_isolated_bn(self):
        bn = nn.BatchNorm2d(3).eval()
        stats = capture_empirical_stats(bn, torch.zeros(4, 3, 5, 5))
        mean, var = stats.layers[""]
        assert torch.equal(mean, torch.zeros(3))
        assert torch.equal(var, torch.zeros(3))

    def test_small_batch_rejected(self):
        net = TwoBnNet().eval()
        with pytest.raises(ContractError, match=">= 2"):
            capture_empirical_stats(net, torch.randn(1, 1, 14, 14))

    def test_running_stats_untouched(self):
        torch.manual_seed(2)
        net = TwoBnNet()
        net.train()
        with torch.no_grad():
            net(torch.randn(8, 1, 14, 14))
        net.eval()
        before = [b.clone() for b in (net.bn1.running_mean, net.bn1.running_var,
                                      net.bn2.running_mean, net.bn2.running_var)]
        capture_empirical_stats(net, torch.randn(8, 1, 14, 14))
        after = [net.bn1.running_mean, net.bn1.running_var,
                 net.bn2.running_mean, net.bn2.running_var]
        for b, a in zip(before, after):
            assert torch.equal(b, a)

    def test_training_mode_rejected(self):
        net = TwoBnNet().train()
        with pytest.raises(ContractError, match="training mode"):
            capture_empirical_stats(net, torch.randn(4, 1, 14, 14))

    def test_gradients_flow_to_batch(self):
        net = TwoBnNet().eval()
        x = torch.randn(4, 1, 14, 14, requires_grad=True)
        stats = capture_empirical_stats(net, x)
        ref = extract_reference_stats(net)
        bns_loss(stats, ref).backward()
        assert x.grad is not None and x.grad.abs().sum() > 0


class TestBnsLoss:
    def make_tables(self):
        emp = BNStatsTable({"bn": (torch.tensor([1.0]), torch.tensor([1.0]))})
        ref = BNStatsTable({"bn": (torch.tensor([0.0]), torch.tensor([1.0]))})
        return emp, ref

    def test_equal_tables_zero(self):
        ref = BNStatsTable({"bn": (torch.tensor([0.3, -1.0]), torch.tensor([2.0, 0.5]))})
        assert float(bns_loss(ref, ref)) == pytest.approx(0.0, abs=1e-6)

    def test_single_entry_value(self):
        emp, ref = self.make_tables()
        assert float(bns_loss(emp, ref)) == pytest.approx(0.5, abs=1e-6)

    def test_key_mismatch_lists_missing(self):
        emp, ref = self.make_tables()
        ref.layers["bn_extra"] = ref.layers["bn"]
        with pytest.raises(StructuralError, match="bn_extra"):
            bns_loss(emp, ref)

    def test_channel_mismatch_rejected(self):
        emp = BNStatsTable({"bn": (torch.zeros(3), torch.ones(3))})
        ref = BNStatsTable({"bn": (torch.zeros(2), torch.ones(2))})
        with pytest.raises(StructuralError, match="channel count"):
            bns_loss(emp, ref)

    def test_additivity_over_disjoint_layer_subsets(self):
        torch.manual_seed(3)
        net = TwoBnNet().eval()
        x = torch.randn(6, 1, 14, 14)
        with torch.no_grad():
            emp = capture_empirical_stats(net, x)
        ref = extract_reference_stats(net)
        whole = float(bns_loss(emp, ref))
        parts = sum(
            float(bns_loss(emp.subset([n]), ref.subset([n])))
            for n in ref.layer_names()
        )
        assert whole == pytest.approx(parts, rel=1e-6)

    def test_gradient_vs_central_finite_differences(self):
        torch.manual_seed(4)
        net = TwoBnNet(4, 6).double().eval()
        ref = extract_reference_stats(net)
        x = torch.randn(3, 1, 10, 10, dtype=torch.float64, requires_grad=True)

        def loss_of(t):
            return bns_loss(capture_empirical_stats(net, t), ref)

        loss_of(x).backward()
        h = 1e-3
        for idx in [(0, 0, 2, 3), (1, 0, 5, 5), (2, 0, 9, 0)]:
            xp = x.detach().clone(); xp[idx] += h
            xm = x.detach().clone(); xm[idx] -= h
            fd = (float(loss_of(xp)) - float(loss_of(xm))) / (2 * h)
            an = float(x.grad[idx])
            assert an == pytest.approx(fd, rel=1e-3, abs=1e-8)

    def test_json_rows(self):
        ref = extract_reference_stats(TwoBnNet(2, 3).eval())
        rows = ref.to_json_rows()
        assert len(rows) == 5
        assert set(rows[0]) == {"layer", "channel", "mean", "variance"}
