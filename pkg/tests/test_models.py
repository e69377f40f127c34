"""Unit tests for the model substrate: frozen teacher, conditional BN,
generator contracts, checkpoints, digests."""

import pytest
import torch

from dfq.data import DeskDataset, normalization_bounds
from dfq.errors import ContractError, IngestionError
from dfq.models import (CondBatchNorm2d, ConditionalGenerator, SmallBnCnn,
                        TeacherConfig, TeacherModel, build_desk_teacher,
                        build_generator_for_teacher, load_generator, load_teacher,
                        param_digest, save_generator, save_teacher)


def make_teacher(seed=0):
    torch.manual_seed(seed)
    net = SmallBnCnn(10, in_channels=1, widths=(8, 16, 32))
    net.train()
    with torch.no_grad():
        for _ in range(2):
            net(torch.randn(8, 1, 28, 28))
    net.eval()
    return TeacherModel(net, "bncnn_narrow", 10, (1, 28, 28), "shapes10", 0.91,
                        (0.2258,), (0.2544,))


def make_generator(teacher, seed=0):
    torch.manual_seed(seed)
    return build_generator_for_teacher(teacher, noise_dim=16, base=8)


class TestTeacher:
    def test_zeros_batch_gives_finite_logits(self):
        teacher = make_teacher()
        logits = teacher(torch.zeros(1, 1, 28, 28))
        assert logits.shape == (1, 10)
        assert torch.isfinite(logits).all()

    def test_forward_deterministic(self):
        teacher = make_teacher()
        x = torch.randn(3, 1, 28, 28, generator=torch.Generator().manual_seed(1))
        assert torch.equal(teacher(x), teacher(x))

    def test_shape_mismatch_names_shapes(self):
        teacher = make_teacher()
        with pytest.raises(ContractError) as exc:
            teacher(torch.zeros(1, 3, 28, 28))
        assert "1, 28, 28" in str(exc.value) and "(1, 3, 28, 28)" in str(exc.value)

    def test_frozen_params_and_eval_pinned(self):
        teacher = make_teacher()
        assert teacher.frozen
        assert all(not p.requires_grad for p in teacher.parameters())
        teacher.train()  # must stay in eval
        assert not teacher.training
        assert not teacher.net.block1.bn.training

    def test_digest_stable_and_sensitive(self):
        teacher = make_teacher()
        d1 = teacher.digest()
        assert d1 == teacher.digest()
        with torch.no_grad():
            teacher.net.head.weight[0, 0] += 1.0
        assert teacher.digest() != d1

    def test_has_bn_layers(self):
        teacher = make_teacher()
        assert teacher.bn_layers == ["block1.bn", "block2.bn", "block3.bn"]

    def test_frozen_teacher_digest_survives_downstream_forward(self):
        teacher = make_teacher()
        d = teacher.digest()
        x = torch.randn(4, 1, 28, 28, requires_grad=True)
        teacher(x).sum().backward()
        assert teacher.digest() == d

    def test_checkpoint_round_trip(self, tmp_path):
        teacher = make_teacher()
        save_teacher(teacher, tmp_path / "t")
        again = load_teacher(tmp_path / "t")
        assert again.digest() == teacher.digest()
        assert again.recorded_accuracy == teacher.recorded_accuracy
        assert again.input_shape == teacher.input_shape
        x = torch.randn(2, 1, 28, 28, generator=torch.Generator().manual_seed(2))
        assert torch.equal(teacher(x), again(x))

    def test_tampered_checkpoint_rejected(self, tmp_path):
        teacher = make_teacher()
        save_teacher(teacher, tmp_path / "t")
        manifest = (tmp_path / "t" / "manifest.json")
        manifest.write_text(manifest.read_text().replace(
            teacher.digest(), "0" * 64))
        with pytest.raises(IngestionError, match="digest mismatch"):
            load_teacher(tmp_path / "t")


class TestConditionalBN:
    def test_holds_one_row_per_class(self):
        cbn = CondBatchNorm2d(6, num_classes=7)
        assert cbn.gamma.num_embeddings == 7
        assert cbn.beta.num_embeddings == 7

    def test_routing_applies_selected_row_analytically(self):
        cbn = CondBatchNorm2d(2, num_classes=3).eval()
        with torch.no_grad():
            cbn.gamma.weight.copy_(torch.tensor([[1.0, 1.0], [2.0, 3.0], [0.5, 0.5]]))
            cbn.beta.weight.copy_(torch.tensor([[0.0, 0.0], [1.0, -1.0], [0.2, 0.2]]))
        x = torch.randn(4, 2, 5, 5, generator=torch.Generator().manual_seed(3))
        normalized = cbn.bn(x)
        for cls in range(3):
            y = torch.full((4,), cls, dtype=torch.long)
            out = cbn(x, y)
            g = cbn.gamma.weight[cls].view(1, 2, 1, 1)
            b = cbn.beta.weight[cls].view(1, 2, 1, 1)
            torch.testing.assert_close(out, g * normalized + b)


class TestGenerator:
    def test_output_within_declared_bounds(self):
        teacher = make_teacher()
        g = make_generator(teacher).eval()
        lo, hi = normalization_bounds("shapes10")
        z = torch.randn(8, 16, generator=torch.Generator().manual_seed(4))
        y = torch.arange(8) % 10
        out = g(z, y)
        assert out.shape == (8, 1, 28, 28)
        assert out.min() >= lo.min().item() - 1e-6
        assert out.max() <= hi.max().item() + 1e-6

    def test_deterministic_for_fixed_inputs(self):
        g = make_generator(make_teacher()).eval()
        z = torch.randn(4, 16, generator=torch.Generator().manual_seed(5))
        y = torch.tensor([0, 1, 2, 3])
        assert torch.equal(g(z, y), g(z, y))

    def test_label_out_of_range_rejected(self):
        g = make_generator(make_teacher())
        z = torch.zeros(2, 16)
        with pytest.raises(ContractError, match=r"\[0, 10\)"):
            g(z, torch.tensor([0, 10]))
        with pytest.raises(ContractError):
            g(z, torch.tensor([-1, 0]))

    def test_nonfinite_noise_rejected(self):
        g = make_generator(make_teacher())
        z = torch.full((2, 16), float("nan"))
        with pytest.raises(ContractError, match="non-finite"):
            g(z, torch.tensor([0, 1]))

    def test_labels_change_output_after_cbn_rows_diverge(self):
        g = make_generator(make_teacher()).eval()
        with torch.no_grad():  # emulate training having separated the rows
            for m in g.modules():
                if isinstance(m, CondBatchNorm2d):
                    m.gamma.weight.add_(
                        0.3 * torch.randn(m.gamma.weight.shape,
                                          generator=torch.Generator().manual_seed(6)))
        z = torch.randn(1, 16, generator=torch.Generator().manual_seed(7))
        a = g(z, torch.tensor([0]))
        b = g(z, torch.tensor([1]))
        assert not torch.equal(a, b)

    def test_checkpoint_round_trip_with_optimizer_state(self, tmp_path):
        g = make_generator(make_teacher())
        opt = torch.optim.Adam(g.parameters(), lr=1e-3, betas=(0.5, 0.999))
        z = torch.randn(4, 16)
        y = torch.tensor([0, 1, 2, 3])
        g.train()
        g(z, y).sum().backward()
        opt.step()
        g.eval()
        save_generator(g, tmp_path / "g", optimizer_state=opt.state_dict(),
                       extra={"loss_mode": "ce+bns"})
        g2, opt_state = load_generator(tmp_path / "g")
        assert opt_state is not None
        assert param_digest(g2) == param_digest(g)
        assert torch.equal(g2.eval()(z, y), g(z, y))


class TestDeskTeacherTraining:
    def tiny_sets(self):
        gen = torch.Generator().manual_seed(8)
        def make(n):
            images = torch.randn(n, 1, 28, 28, generator=gen) * 0.3
            labels = torch.arange(n) % 10
            images += labels.float().view(-1, 1, 1, 1) * 0.1  # weak class signal
            return DeskDataset("shapes10", "train", images, labels,
                               (0.2258,), (0.2544,), [str(i) for i in range(10)])
        return make(80), make(40)

    def test_zero_epochs_rejected(self):
        train, test = self.tiny_sets()
        with pytest.raises(ContractError, match="must be trained before export"):
            build_desk_teacher(TeacherConfig(epochs=0), train, test)

    def test_training_produces_frozen_teacher_with_accuracy(self):
        train, test = self.tiny_sets()
        teacher = build_desk_teacher(
            TeacherConfig(epochs=1, batch_size=16, seed=0), train, test)
        assert isinstance(teacher, TeacherModel)
        assert 0.0 <= teacher.recorded_accuracy <= 1.0
        assert not teacher.training
