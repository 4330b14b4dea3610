import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from downscale_lab.losses import EmptyTestSetError, evaluate_metrics, l1_loss, l2_loss
from downscale_lab.tensor import ShapeError, Tensor

from conftest import central_difference, rel_err


def test_hand_values():
    p, g = Tensor([1.0, 3.0]), Tensor([0.0, 1.0])
    assert l1_loss(p, g).item() == 1.5
    assert l2_loss(p, g).item() == 2.5


def test_equal_inputs_zero_loss_and_grad(rng):
    a = rng.standard_normal((2, 1, 4, 4))
    p = Tensor(a.copy(), requires_grad=True)
    loss = l2_loss(p, Tensor(a))
    assert loss.item() == 0.0
    loss.backward()
    assert np.all(p.grad == 0)
    assert l1_loss(Tensor(a), Tensor(a)).item() == 0.0


def test_loop_oracle(rng):
    p, g = rng.standard_normal(37), rng.standard_normal(37)
    acc1 = acc2 = 0.0
    for a, b in zip(p, g):
        acc1 += abs(a - b)
        acc2 += (a - b) ** 2
    assert abs(l1_loss(Tensor(p), Tensor(g)).item() - acc1 / 37) < 1e-12
    assert abs(l2_loss(Tensor(p), Tensor(g)).item() - acc2 / 37) < 1e-12


def test_l2_gradient(rng):
    g = rng.standard_normal((2, 1, 3, 3))
    p = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    l2_loss(p, Tensor(g)).backward()
    assert np.allclose(p.grad, 2 * (p.data - g) / p.size, rtol=1e-14)
    for j in range(0, 18, 5):
        num = central_difference(lambda: l2_loss(p, Tensor(g)).item(), p, j)
        assert rel_err(p.grad.reshape(-1)[j], num) < 1e-6


def test_l1_subgradient_at_ties():
    p = Tensor([1.0, 2.0], requires_grad=True)
    l1_loss(p, Tensor([1.0, 0.0])).backward()
    assert p.grad.tolist() == [0.0, 0.5]


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


@given(arrays(np.float64, 12, elements=st.floats(-100, 100)), st.randoms())
@settings(max_examples=50, deadline=None)
def test_permutation_invariance(x, r):
    gt = np.linspace(-3, 3, 12)
    perm = list(range(12))
    r.shuffle(perm)
    for f in (l1_loss, l2_loss):
        a = f(Tensor(x), Tensor(gt)).item()
        b = f(Tensor(x[perm]), Tensor(gt[perm])).item()
        assert np.isclose(a, b, rtol=1e-12, atol=1e-12)


class TestMetrics:
    def test_identical(self, rng):
        a = rng.standard_normal((3, 1, 4, 4))
        m = evaluate_metrics(a, a, a, a)
        assert (m.avg_abs_diff, m.avg_mse, m.avg_abs_diff_transformed, m.avg_mse_transformed) == (0, 0, 0, 0)
        assert m.n_pixels == 48

    def test_single_pixel(self):
        m = evaluate_metrics(np.array([[[[4.0]]]]), np.array([[[[1.0]]]]))
        assert m.avg_abs_diff == 3.0 and m.avg_mse == 9.0

    def test_concatenation_oracle(self, rng):
        preds = [rng.standard_normal((1, 1, 5, 5)) for _ in range(4)]
        gts = [rng.standard_normal((1, 1, 5, 5)) for _ in range(4)]
        m = evaluate_metrics(np.concatenate(preds), np.concatenate(gts))
        flat_p = np.concatenate([p.ravel() for p in preds])
        flat_g = np.concatenate([g.ravel() for g in gts])
        assert np.isclose(m.avg_abs_diff, np.mean(np.abs(flat_p - flat_g)), rtol=1e-14)
        assert np.isclose(m.avg_mse, np.mean((flat_p - flat_g) ** 2), rtol=1e-14)

    def test_equal_residuals_equality_case(self):
        m = evaluate_metrics(np.full(10, 2.5), np.zeros(10))
        assert m.avg_mse == m.avg_abs_diff**2

    def test_empty(self):
        with pytest.raises(EmptyTestSetError):
            evaluate_metrics(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4, 4)))


def test_constant_minimizers(rng):
    """Over constant predictions, L1 is minimized by the median and L2 by the mean."""
    gt = np.concatenate([rng.exponential(1.0, 60), np.zeros(40)])
    grid = np.linspace(gt.min(), gt.max(), 40001)
    abs_scores = [np.mean(np.abs(c - gt)) for c in grid]
    mse_scores = [np.mean((c - gt) ** 2) for c in grid]
    step = grid[1] - grid[0]
    c_abs = grid[int(np.argmin(abs_scores))]
    c_mse = grid[int(np.argmin(mse_scores))]
    lo, hi = np.sort(gt)[49], np.sort(gt)[50]  # even count: any point between the middle pair
    assert lo - step <= c_abs <= hi + step
    assert abs(c_mse - gt.mean()) <= step
