import itertools
import math
import warnings

import numpy as np
import pytest

from fanbeats import align as al
from fanbeats import model as md
from fanbeats import numcore as nc
from fanbeats.numcore import Tensor

TIGHT = al.SinkhornConfig(epsilon=1e-3, max_iters=20_000, tol=1e-6, unroll_grad=False)


def _brute_w2(X, Y):
    best = math.inf
    for perm in itertools.permutations(range(len(Y))):
        best = min(best, float(np.mean(np.sum((X - Y[list(perm)]) ** 2, axis=1))))
    return best


# normalizers and costs --------------------------------------------------------------


def test_normalize_examples():
    assert al.normalize(Tensor([[0.0, 0.0]]), "softmax").data.tolist() == [[0.5, 0.5]]
    assert al.normalize(Tensor([[0.0, 0.0]]), "tanh").data.tolist() == [[0.0, 0.0]]
    Z = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert al.normalize(Z, "none").data is Z.data
    with pytest.raises(al.AlignmentError):
        al.normalize(Z, "sigmoid")


def test_cost_matrix_examples():
    assert al.cost_matrix([[1.0, 2.0]], [[1.0, 2.0]]).data.tolist() == [[0.0]]
    assert al.cost_matrix([[0.0]], [[1.0]]).data.tolist() == [[1.0]]
    assert al.cost_matrix([[0.0, 0.0]], [[3.0, 4.0]]).data.tolist() == [[25.0]]
    with pytest.raises(nc.DimensionError):
        al.cost_matrix(np.zeros((2, 2)), np.zeros((2, 3)))


def test_cost_matrix_matches_direct_differences():
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    direct = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(al.cost_matrix(X, Y).data, direct, atol=1e-12)


def test_measure_validation():
    with pytest.raises(al.AlignmentError):
        al.EmpiricalMeasure(Tensor(np.zeros((0, 2))))
    with pytest.raises(al.AlignmentError):
        al.EmpiricalMeasure(Tensor([[np.nan, 0.0]]))


# Sinkhorn ---------------------------------------------------------------------------


@pytest.mark.parametrize("eps", [1e-5, 2.5e-3, 1e-1])
def test_single_points_closed_form(eps):
    rng = np.random.default_rng(int(eps * 1e5))
    cfg = al.SinkhornConfig(epsilon=eps, unroll_grad=False)
    for _ in range(20):
        a, b = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        v = al.sinkhorn_ot(a, b, cfg).value.item()
        assert abs(v - float(np.sum((a - b) ** 2))) <= 1e-10


def test_single_points_divergence_is_squared_distance():
    assert abs(al.sinkhorn_divergence([[0.0]], [[1.0]]).item() - 1.0) <= 1e-12


def test_identical_measures_have_equal_potentials():
    X = np.random.default_rng(2).normal(size=(6, 2))
    res = al.sinkhorn_ot(X, X, al.SinkhornConfig(epsilon=1.0, max_iters=5000, tol=1e-13, unroll_grad=False))
    np.testing.assert_allclose(res.f, res.g, atol=1e-9)
    value, f, g = res
    assert value.item() > 0


def test_sinkhorn_close_to_exact_on_small_clouds():
    rng = np.random.default_rng(3)
    for _ in range(10):
        X, Y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        exact = _brute_w2(X, Y)
        v = al.sinkhorn_ot(X, Y, TIGHT).value.item()
        assert abs(v - exact) / exact <= 0.02


def test_epsilon_limit_is_monotone():
    rng = np.random.default_rng(4)
    for _ in range(5):
        X, Y = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        exact = al.exact_w2(X, Y).item()
        vals = [
            al.sinkhorn_ot(X, Y, al.SinkhornConfig(epsilon=e, max_iters=20_000, tol=1e-6, unroll_grad=False)).value.item()
            for e in (1e-1, 1e-2, 1e-3)
        ]
        assert vals[0] >= vals[1] >= vals[2] >= exact - 1e-9
        assert abs(vals[2] - exact) / exact <= 0.05


def test_sinkhorn_rejects_zero_epsilon():
    with pytest.raises(al.AlignmentError):
        al.sinkhorn_ot([[0.0]], [[1.0]], al.SinkhornConfig(epsilon=0.0))
    with pytest.raises(al.AlignmentError):
        al.SinkhornConfig(epsilon=-1.0)


def test_argument_order_gives_identical_values():
    rng = np.random.default_rng(18)
    X, Y = rng.normal(size=(5, 2)), rng.normal(size=(7, 2))
    cfg = al.SinkhornConfig(epsilon=0.5, max_iters=20, unroll_grad=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", al.SinkhornNonConvergence)
        a, b = al.sinkhorn_ot(X, Y, cfg), al.sinkhorn_ot(Y, X, cfg)
    assert a.value.item() == b.value.item()
    assert a.f.shape == (5,) and b.f.shape == (7,)
    np.testing.assert_array_equal(a.f, b.g)


def test_non_convergence_warns_and_returns_value():
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    with pytest.warns(al.SinkhornNonConvergence, match="potential change"):
        res = al.sinkhorn_ot(X, Y, al.SinkhornConfig(epsilon=1e-4, max_iters=2, unroll_grad=False))
    assert math.isfinite(res.value.item())
    assert not res.converged


@pytest.mark.filterwarnings("ignore::fanbeats.align.SinkhornNonConvergence")
def test_divergence_axioms():
    rng = np.random.default_rng(6)
    cfg = al.SinkhornConfig(epsilon=2.5e-3, max_iters=2000, unroll_grad=False)
    for _ in range(10):
        X, Y = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        d_xy = al.sinkhorn_divergence(X, Y, cfg).item()
        d_yx = al.sinkhorn_divergence(Y, X, cfg).item()
        assert abs(d_xy - d_yx) <= 1e-10
        assert abs(al.sinkhorn_divergence(X, X, cfg).item()) <= 1e-8
        assert d_xy >= -1e-8


def test_envelope_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    X0, Y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    cfg = al.SinkhornConfig(epsilon=1.0, max_iters=10_000, tol=1e-14, unroll_grad=False)
    X = Tensor(X0, requires_grad=True)
    g = nc.backward(al.sinkhorn_ot(X, Y, cfg).value)[X.node_id]
    num = nc.finite_difference_grad(lambda t: al.sinkhorn_ot(t, Y, cfg).value, X0, 1e-5)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)


def test_unrolled_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    X0, Y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    cfg = al.SinkhornConfig(epsilon=0.05, unroll_grad=True, unroll_iters=30)
    X = Tensor(X0, requires_grad=True)
    g = nc.backward(al.sinkhorn_divergence(X, Y, cfg))[X.node_id]

    num = nc.finite_difference_grad(lambda t: al.sinkhorn_divergence(t, Y, cfg), X0, 1e-5)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-7)


# exact W2 ---------------------------------------------------------------------------


def test_exact_w2_examples():
    X = np.array([[0.0], [1.0]])
    assert al.exact_w2(X, X).item() == 0.0
    assert al.exact_w2(X, [[2.0], [3.0]]).item() == 4.0
    with pytest.raises(al.AlignmentError):
        al.exact_w2(X, [[1.0]])


def test_exact_w2_matches_permutation_oracle():
    rng = np.random.default_rng(9)
    for B in (2, 3, 5, 6):
        X, Y = rng.normal(size=(B, 3)), rng.normal(size=(B, 3))
        assert abs(al.exact_w2(X, Y).item() - _brute_w2(X, Y)) <= 1e-12
        assert abs(al.exact_w2(X, Y[::-1]).item() - al.exact_w2(X, Y).item()) <= 1e-12


def test_exact_w2_translation_covariance():
    rng = np.random.default_rng(10)
    X, Y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    c = np.array([3.0, -7.0])
    assert abs(al.exact_w2(X + c, Y + c).item() - al.exact_w2(X, Y).item()) <= 1e-10


# MMD / KL ---------------------------------------------------------------------------


def test_mmd_examples():
    X = np.random.default_rng(11).normal(size=(5, 2))
    assert abs(al.mmd(X, X).item()) <= 1e-12
    Y = X + 1.0
    assert abs(al.mmd(X, Y).item() - al.mmd(Y, X).item()) <= 1e-12
    assert abs(al.mmd([[0.0]], [[1.0]], bandwidth=1.0).item() - (2 - 2 * math.exp(-0.5))) <= 1e-12


def test_mmd_degenerate_bandwidth():
    X = np.ones((3, 2))
    assert al.median_bandwidth(X, X) == 1.0
    assert abs(al.mmd(X, X).item()) <= 1e-12


def test_kl_examples():
    p, q = [[0.5, 0.5]], [[0.25, 0.75]]
    forward = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    reverse = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
    assert abs(al.kl_divergence(p, q).item() - forward) <= 1e-12
    assert abs(al.kl_divergence(q, p).item() - reverse) <= 1e-12
    assert abs(al.kl_divergence(p, p).item()) <= 1e-15


def test_kl_rejects_points_off_the_simplex():
    with pytest.raises(nc.DomainError, match="simplex"):
        al.kl_divergence([[0.3, -0.5]], [[0.5, 0.5]])


# alignment loss ---------------------------------------------------------------------


@pytest.mark.parametrize("div", ["sinkhorn", "mmd", "kl", "exact_w2"])
def test_alignment_loss_identical_domains(div):
    Z = Tensor(np.random.default_rng(12).normal(size=(6, 4)))
    loss = al.alignment_loss([[Z, Z], [Z, Z], [Z, Z]], al.AlignmentConfig(divergence=div))
    assert abs(loss.item()) <= 1e-8


def test_alignment_loss_single_pair_equals_divergence():
    rng = np.random.default_rng(13)
    A, B = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
    cfg = al.SinkhornConfig(unroll_grad=False)
    loss = al.alignment_loss([[A], [B]], al.AlignmentConfig(), cfg).item()
    direct = al.sinkhorn_divergence(al.normalize(A), al.normalize(B), cfg).item()
    assert loss == direct


def test_alignment_loss_picks_outlier_pair():
    rng = np.random.default_rng(14)
    base = rng.normal(size=(6, 4))
    far = base + np.array([5.0, -5.0, 0.0, 0.0])
    taps = [[Tensor(base), Tensor(base)], [Tensor(base), Tensor(base)], [Tensor(far), Tensor(far)]]
    cfg = al.AlignmentConfig(divergence="mmd")
    loss, pairs = al.alignment_loss(taps, cfg, return_pairs=True)
    # brute force over the three unordered pairs, per stack
    pts = [al.normalize(Tensor(x)) for x in (base, base, far)]
    vals = {(i, j): al.mmd(pts[i], pts[j]).item() for i, j in itertools.combinations(range(3), 2)}
    best = max(vals.values())
    assert pairs == [(0, 2), (0, 2)]
    assert abs(loss.item() - 2 * best) <= 1e-12


def test_alignment_loss_ties_go_to_lowest_pair():
    Z = Tensor(np.zeros((3, 2)))
    _, pairs = al.alignment_loss([[Z], [Z], [Z]], al.AlignmentConfig(divergence="mmd"), return_pairs=True)
    assert pairs == [(0, 1)]


def test_alignment_loss_errors():
    Z = Tensor(np.zeros((3, 2)))
    with pytest.raises(al.AlignmentError):
        al.alignment_loss([[Z]])
    with pytest.raises(al.AlignmentError):
        al.alignment_loss([[Z], [Tensor(np.zeros((3, 5)))]])
    with pytest.raises(al.AlignmentError):
        al.AlignmentConfig(divergence="js")


def test_softmax_removes_per_row_offsets():
    rng = np.random.default_rng(15)
    A, B = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    cfg = al.SinkhornConfig(unroll_grad=False)
    base = al.alignment_loss([[Tensor(A)], [Tensor(B)]], al.AlignmentConfig(), cfg).item()
    shifted = al.alignment_loss(
        [[Tensor(A + rng.normal(size=(6, 1)) * 50)], [Tensor(B + 100.0)]], al.AlignmentConfig(), cfg
    ).item()
    assert abs(base - shifted) <= 1e-10


def test_kl_takes_larger_direction():
    p, q = Tensor([[0.5, 0.5]]), Tensor([[0.25, 0.75]])
    loss = al.alignment_loss([[p], [q]], al.AlignmentConfig(normalizer="none", divergence="kl"))
    assert abs(loss.item() - (0.5 * math.log(2) + 0.5 * math.log(2 / 3))) <= 1e-12


def test_alignment_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(16)
    A0, B = rng.normal(size=(5, 4)), Tensor(rng.normal(size=(5, 4)))
    cfg = al.SinkhornConfig(epsilon=2.5e-3, unroll_grad=True)
    A = Tensor(A0, requires_grad=True)
    g = nc.backward(al.alignment_loss([[A], [B]], al.AlignmentConfig(), cfg))[A.node_id]

    num = nc.finite_difference_grad(lambda t: al.alignment_loss([[t], [B]], al.AlignmentConfig(), cfg), A0, 1e-5)
    np.testing.assert_allclose(g, num, rtol=1e-3, atol=1e-9)


# theorem check ----------------------------------------------------------------------


def test_gap_check_zero_model():
    model = md.build_model(8, 2, 8, M=2, L=2, seed=0)
    for _, t, _ in model.named_parameters():
        t.data[:] = 0
    rng = np.random.default_rng(0)
    res = al.theorem_gap_check(model, [rng.normal(size=(8, 8)), rng.normal(size=(8, 8)) + 1])
    assert res.lhs == pytest.approx(0.0, abs=1e-12)
    assert res.holds


def test_gap_check_identical_batches():
    model = md.build_model(8, 2, 8, M=2, L=2, seed=1)
    X = np.random.default_rng(1).normal(size=(8, 8))
    lhs, rhs, holds = al.theorem_gap_check(model, [X, X])
    assert abs(lhs) <= 1e-8 and holds


def test_gap_check_random_models():
    rng = np.random.default_rng(17)
    for seed in range(10):
        model = md.build_model(8, 2, 8, M=2, L=2, seed=seed, head_init="uniform")
        batches = [rng.normal(loc=k, size=(16, 8)) for k in range(3)]
        res = al.theorem_gap_check(model, batches)
        assert res.holds, (res.lhs, res.rhs)
