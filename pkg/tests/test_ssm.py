import numpy as np
import pytest
import torch

from ssmseg.ssm import (
    ContinuousSSM,
    SingularEvolutionError,
    cross_merge,
    cross_scan,
    selective_scan,
    zoh_discretize,
)
from helpers import zoh_series_oracle


def scalar_model(a=-1.0, b=1.0, c=1.0, d=0.0):
    return ContinuousSSM(A=[a], B=[b], C=[c], D=d)


class TestZohDiscretize:
    def test_scalar_exact_matches_series_oracle(self):
        disc = zoh_discretize(scalar_model(), delta=1.0, mode="exact")
        a_ref, b_ref = zoh_series_oracle(np.array([-1.0]), np.array([1.0]), 1.0)
        assert disc.A_bar.item() == pytest.approx(a_ref[0, 0], rel=1e-12)
        assert disc.B_bar.item() == pytest.approx(b_ref[0], rel=1e-12)
        assert disc.A_bar.item() == pytest.approx(0.36787944117144233, rel=1e-9)
        assert disc.B_bar.item() == pytest.approx(0.6321205588285577, rel=1e-9)

    def test_zero_timescale_limit(self):
        disc = zoh_discretize(scalar_model(), delta=1e-12, mode="exact")
        assert abs(disc.A_bar.item() - 1.0) < 1e-9
        assert abs(disc.B_bar.item()) < 1e-9

    def test_first_order_b(self):
        disc = zoh_discretize(scalar_model(), delta=0.01, mode="first_order")
        assert disc.B_bar.item() == pytest.approx(0.01, abs=1e-15)
        exact = zoh_discretize(scalar_model(), delta=0.01, mode="exact")
        assert torch.allclose(disc.A_bar, exact.A_bar)

    @pytest.mark.parametrize("seed", range(5))
    def test_full_matrix_exact_vs_series(self, seed):
        rng = np.random.default_rng(seed)
        n = 4
        a = rng.standard_normal((n, n)) - 2 * np.eye(n)
        b = rng.standard_normal(n)
        model = ContinuousSSM(A=torch.tensor(a), B=torch.tensor(b),
                              C=torch.tensor(rng.standard_normal(n)),
                              D=torch.tensor(0.5))
        disc = zoh_discretize(model, delta=0.3, mode="exact")
        a_ref, b_ref = zoh_series_oracle(a, b, 0.3)
        assert np.abs(disc.A_bar.numpy() - a_ref).max() < 1e-10 * np.abs(a_ref).max()
        assert np.abs(disc.B_bar.numpy() - b_ref).max() < 1e-10 * max(1.0, np.abs(b_ref).max())

    @pytest.mark.parametrize("delta", [1e-6, 1e-9])
    def test_zoh_small_delta_bounds(self, delta):
        rng = np.random.default_rng(7)
        for trial in range(4):
            diag = trial % 2 == 0
            if diag:
                a = -rng.random(6) * 8
                a_mat = np.diag(a)
            else:
                a = rng.standard_normal((6, 6)) - 3 * np.eye(6)
                a_mat = a
            b = rng.standard_normal(6)
            model = ContinuousSSM(A=torch.tensor(a), B=torch.tensor(b),
                                  C=torch.tensor(b), D=torch.tensor(0.0))
            disc = zoh_discretize(model, delta, mode="exact")
            a_bar = np.diag(disc.A_bar.numpy()) if diag else disc.A_bar.numpy()
            a_inf = np.abs(a_mat).sum(axis=1).max()
            assert np.abs(a_bar - np.eye(6)).sum(axis=1).max() < 10 * delta * a_inf
            assert np.abs(disc.B_bar.numpy()).max() < 10 * delta * np.abs(b).max()

    def test_first_order_error_quadratic_in_delta(self):
        rng = np.random.default_rng(3)
        a = -rng.random(8) * 4 - 0.5
        b = rng.standard_normal(8)
        model = ContinuousSSM(A=torch.tensor(a), B=torch.tensor(b),
                              C=torch.tensor(b), D=torch.tensor(0.0))
        deltas = [1e-1, 1e-2, 1e-3]
        errs = []
        for d in deltas:
            exact = zoh_discretize(model, d, mode="exact").B_bar.numpy()
            errs.append(np.linalg.norm(exact - d * b))
        slope = np.polyfit(np.log(deltas), np.log(errs), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.15)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            zoh_discretize(scalar_model(), delta=0.0)
        with pytest.raises(ValueError):
            zoh_discretize(scalar_model(), delta=-1.0)

    def test_singular_matrix_rejected(self):
        a = torch.zeros(2, 2, dtype=torch.float64)
        a[0, 0] = 1.0
        model = ContinuousSSM(A=a, B=torch.ones(2, dtype=torch.float64),
                              C=torch.ones(2, dtype=torch.float64), D=torch.tensor(0.0))
        with pytest.raises(SingularEvolutionError):
            zoh_discretize(model, delta=1.0, mode="exact")

    def test_zero_diagonal_entry_takes_limit(self):
        model = ContinuousSSM(A=torch.tensor([0.0, -1.0]), B=torch.tensor([1.0, 1.0]),
                              C=torch.tensor([1.0, 1.0]), D=torch.tensor(0.0))
        disc = zoh_discretize(model, delta=0.5, mode="exact")
        assert disc.B_bar[0].item() == pytest.approx(0.5, rel=1e-12)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            zoh_discretize(scalar_model(), delta=1.0, mode="euler")


class TestSelectiveScan:
    def test_zero_inputs_zero_outputs(self):
        model = scalar_model(c=2.0, d=0.5)
        y = selective_scan(torch.zeros(5), torch.full((5,), 0.3), model)
        assert torch.all(y == 0)

    def test_one_step_hand_unrolled(self):
        model = scalar_model(a=-1.0, b=1.0, c=2.0, d=0.5)
        y = selective_scan(torch.tensor([3.0]), torch.tensor([1.0]), model)
        b_bar = 1 - np.exp(-1.0)
        h1 = b_bar * 3.0
        expected = 2.0 * h1 + 0.5 * 3.0
        assert y[0].item() == pytest.approx(expected, rel=1e-12)
        assert y[0].item() == pytest.approx(5.2927234, abs=1e-6)

    def test_linearity_in_inputs(self):
        rng = np.random.default_rng(11)
        n = 4
        model = ContinuousSSM(A=torch.tensor(-rng.random(n) * 3),
                              B=torch.tensor(rng.standard_normal(n)),
                              C=torch.tensor(rng.standard_normal(n)),
                              D=torch.tensor(0.7))
        x = torch.tensor(rng.standard_normal(12))
        z = torch.tensor(rng.standard_normal(12))
        d = torch.tensor(rng.random(12) * 0.5 + 0.01)
        alpha, beta = 1.7, -0.4
        lhs = selective_scan(alpha * x + beta * z, d, model)
        rhs = alpha * selective_scan(x, d, model) + beta * selective_scan(z, d, model)
        assert (lhs - rhs).abs().max().item() < 1e-10 * rhs.abs().max().item()

    def test_doubling_inputs_doubles_outputs(self):
        model = scalar_model(a=-0.5, b=1.2, c=0.8, d=0.3)
        x = torch.tensor([1.0, -2.0, 3.0])
        d = torch.tensor([0.2, 0.4, 0.1])
        y1 = selective_scan(x, d, model)
        y2 = selective_scan(2 * x, d, model)
        assert torch.allclose(y2, 2 * y1, rtol=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            selective_scan(torch.ones(3), torch.ones(4), scalar_model())

    def test_differentiable(self):
        model = ContinuousSSM(A=torch.tensor([-1.0], requires_grad=True),
                              B=torch.tensor([1.0], requires_grad=True),
                              C=torch.tensor([1.0], requires_grad=True),
                              D=torch.tensor(0.5, requires_grad=True))
        x = torch.tensor([1.0, 2.0], requires_grad=True)
        y = selective_scan(x, torch.tensor([0.5, 0.5]), model)
        y.sum().backward()
        assert model.A.grad is not None and x.grad is not None


class TestCrossScanMerge:
    def test_2x2_orders(self):
        x = torch.arange(4.0).reshape(1, 2, 2)
        seqs = cross_scan(x)
        expected = [[0, 1, 2, 3], [3, 2, 1, 0], [0, 2, 1, 3], [3, 1, 2, 0]]
        for i, order in enumerate(expected):
            assert seqs.sequences[i, 0].tolist() == order

    def test_1x1_degenerate(self):
        x = torch.tensor([[[5.0]]])
        seqs = cross_scan(x)
        assert seqs.sequences.shape == (4, 1, 1)
        assert torch.all(seqs.sequences == 5.0)

    def test_multiset_invariance(self):
        x = torch.randn(3, 4, 5)
        seqs = cross_scan(x)
        base = np.sort(seqs.sequences[0].numpy(), axis=-1)
        for i in range(1, 4):
            assert np.array_equal(np.sort(seqs.sequences[i].numpy(), axis=-1), base)

    def test_merge_mean_is_exact_inverse(self):
        torch.manual_seed(0)
        for shape in [(1, 1, 1), (3, 5, 7), (2, 8, 3)]:
            x = torch.randn(*shape, dtype=torch.float64)
            assert torch.equal(cross_merge(cross_scan(x), "mean"), x)

    def test_merge_sum_is_4x(self):
        x = torch.randn(2, 3, 4, dtype=torch.float64)
        assert torch.equal(cross_merge(cross_scan(x), "sum"), 4 * x)

    def test_all_ones_mean(self):
        x = torch.ones(2, 3, 3)
        assert torch.equal(cross_merge(cross_scan(x), "mean"), x)

    def test_length_mismatch_rejected(self):
        seqs = cross_scan(torch.randn(1, 2, 2))
        seqs.width = 3
        with pytest.raises(ValueError):
            cross_merge(seqs)

    def test_bad_reduction_rejected(self):
        with pytest.raises(ValueError):
            cross_merge(cross_scan(torch.randn(1, 2, 2)), "max")
