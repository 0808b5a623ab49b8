"""Divergences between empirical feature measures and the stack-wise alignment loss."""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numcore as nc
from .numcore import Tensor

logger = logging.getLogger(__name__)

NORMALIZERS = ("softmax", "tanh", "none")
DIVERGENCES = ("sinkhorn", "exact_w2", "mmd", "kl")
GRANULARITIES = ("stack_wise", "block_wise")


class AlignmentError(ValueError):
    pass


class SinkhornNonConvergence(RuntimeWarning):
    pass


@dataclass
class SinkhornConfig:
    epsilon: float = 0.0025
    max_iters: int = 200
    tol: float = 1e-6
    unroll_grad: bool = True
    unroll_iters: int = 100

    def __post_init__(self):
        if self.epsilon < 0:
            raise AlignmentError("epsilon must be >= 0")
        if self.max_iters < 1 or self.unroll_iters < 1:
            raise AlignmentError("iteration budgets must be >= 1")


@dataclass
class AlignmentConfig:
    normalizer: str = "softmax"
    divergence: str = "sinkhorn"
    granularity: str = "stack_wise"
    mmd_bandwidth: float | None = None

    def __post_init__(self):
        if self.normalizer not in NORMALIZERS:
            raise AlignmentError(f"unknown normalizer {self.normalizer!r}")
        if self.divergence not in DIVERGENCES:
            raise AlignmentError(f"unknown divergence {self.divergence!r}")
        if self.granularity not in GRANULARITIES:
            raise AlignmentError(f"unknown granularity {self.granularity!r}")


def _points(mu) -> Tensor:
    if isinstance(mu, EmpiricalMeasure):
        return mu.points
    t = nc.as_tensor(mu)
    if t.ndim == 1:
        t = t.reshape(-1, 1)
    return t


@dataclass
class EmpiricalMeasure:
    """Uniformly weighted Dirac masses at the rows of ``points``."""

    points: Tensor

    def __post_init__(self):
        self.points = _points(self.points)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise AlignmentError(f"a measure needs at least one point, got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points.data)):
            raise AlignmentError("measure contains non-finite points")

    @property
    def n(self) -> int:
        return self.points.shape[0]


def normalize(Z: Tensor, kind: str = "softmax") -> Tensor:
    if kind == "softmax":
        return nc.softmax_rows(Z)
    if kind == "tanh":
        return nc.tanh(Z)
    if kind == "none":
        return nc.as_tensor(Z)
    raise AlignmentError(f"unknown normalizer {kind!r}")


def cost_matrix(X, Y) -> Tensor:
    """Squared Euclidean distances, expanded and clamped at zero."""
    X, Y = _points(X), _points(Y)
    if X.shape[1] != Y.shape[1]:
        raise nc.DimensionError(f"point dimensions differ: {X.shape} vs {Y.shape}")
    xx = nc.square(X).sum(axis=1, keepdims=True)
    yy = nc.square(Y).sum(axis=1, keepdims=True)
    C = xx + yy.T - 2.0 * (X @ Y.T)
    return nc.maximum(C, 0.0)


# Sinkhorn ---------------------------------------------------------------------------


@dataclass
class SinkhornResult:
    value: Tensor
    f: np.ndarray
    g: np.ndarray
    converged: bool
    n_iter: int
    last_change: float

    def __iter__(self):
        return iter((self.value, self.f, self.g))


def _lse_rows(M: np.ndarray) -> np.ndarray:
    m = M.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(M - m).sum(axis=1, keepdims=True)))[:, 0]


def _solve(C: np.ndarray, eps: float, max_iters: int, tol: float):
    """Alternating log-domain updates from zero potentials; stops on potential change."""
    n, m = C.shape
    log_a, log_b = -math.log(n), -math.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    change = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        f_new = -eps * _lse_rows((g[None, :] - C) / eps + log_b)
        g_new = -eps * _lse_rows((f_new[:, None] - C).T / eps + log_a)
        change = max(np.abs(f_new - f).max(), np.abs(g_new - g).max())
        f, g = f_new, g_new
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise FloatingPointError("NaN/Inf in Sinkhorn potentials")
        if change < tol:
            return f, g, True, it, change
    return f, g, False, it, change


def _transport_plan(C: np.ndarray, f: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    n, m = C.shape
    return np.exp((f[:, None] + g[None, :] - C) / eps) / (n * m)


def _recenter(f: np.ndarray, g: np.ndarray):
    c = 0.5 * (g.mean() - f.mean())
    return f + c, g - c


def sinkhorn_ot(mu, nu, cfg: SinkhornConfig | None = None) -> SinkhornResult:
    """Entropic OT between uniform empirical measures by log-domain Sinkhorn.

    Each run alternates f- and g-updates and reports the dual objective
    mean(f) + mean(g). A truncated run is biased toward the side updated last,
    so the value averages the runs in both orientations; swapping the
    arguments then gives the identical value. A measure paired with itself
    needs one run. With ``unroll_grad`` every run has the fixed budget
    ``unroll_iters`` and is recorded on the tape when the points require
    gradients. Otherwise a run stops at ``tol`` or ``max_iters`` and its value
    is a fused op whose adjoint with respect to the cost matrix is the
    transport plan at the last iterate.
    """
    cfg = cfg or SinkhornConfig()
    if cfg.epsilon <= 0:
        raise AlignmentError("sinkhorn_ot needs epsilon > 0; use exact_w2 for epsilon = 0")
    X, Y = _points(mu), _points(nu)
    fwd = _sinkhorn_run(X, Y, cfg)
    if X is Y:
        res = fwd
    else:
        bwd = _sinkhorn_run(Y, X, cfg)
        res = SinkhornResult(
            0.5 * (fwd.value + bwd.value),
            0.5 * (fwd.f + bwd.g),
            0.5 * (fwd.g + bwd.f),
            fwd.converged and bwd.converged,
            max(fwd.n_iter, bwd.n_iter),
            max(fwd.last_change, bwd.last_change),
        )
    if not res.converged and not cfg.unroll_grad:
        warnings.warn(
            f"Sinkhorn stopped after {res.n_iter} iterations, last potential change {res.last_change:.3e}",
            SinkhornNonConvergence,
            stacklevel=2,
        )
    if not (np.all(np.isfinite(res.f)) and np.all(np.isfinite(res.g))):
        raise FloatingPointError("NaN/Inf in Sinkhorn potentials")
    res.f, res.g = _recenter(res.f, res.g)
    return res


def _sinkhorn_run(X: Tensor, Y: Tensor, cfg: SinkhornConfig) -> SinkhornResult:
    C = cost_matrix(X, Y)
    eps = cfg.epsilon
    if cfg.unroll_grad:
        return _sinkhorn_unrolled(C, eps, cfg.unroll_iters, cfg.tol)
    f, g, converged, n_iter, change = _solve(C.data, eps, cfg.max_iters, cfg.tol)
    value = f.mean() + g.mean()
    plan = _transport_plan(C.data, f, g, eps) if C.requires_grad else None

    def adjoint(gr):
        return (gr * plan,)

    out = nc.custom_op(np.array(value), (C,), adjoint, "sinkhorn")
    return SinkhornResult(out, f, g, converged, n_iter, float(change))


def _sinkhorn_unrolled(C: Tensor, eps: float, n_iters: int, tol: float) -> SinkhornResult:
    n, m = C.shape
    log_a, log_b = -math.log(n), -math.log(m)
    neg_c = C * (-1.0 / eps)
    g = Tensor(np.zeros((1, m)))
    f = None
    change = math.inf
    for _ in range(n_iters):
        f_new = nc.reduce("logsumexp", neg_c + g * (1.0 / eps) + log_b, axis=1, keepdims=True) * (-eps)
        g_new = nc.reduce("logsumexp", neg_c + f_new * (1.0 / eps) + log_a, axis=0, keepdims=True) * (-eps)
        if f is not None:
            change = max(np.abs(f_new.data - f.data).max(), np.abs(g_new.data - g.data).max())
        f, g = f_new, g_new
    value = f.mean() + g.mean()
    return SinkhornResult(value, f.data[:, 0].copy(), g.data[0].copy(), bool(change < tol), n_iters, float(change))


def sinkhorn_divergence(mu, nu, cfg: SinkhornConfig | None = None, self_terms: tuple | None = None) -> Tensor:
    """Debiased entropic OT: W(mu, nu) - (W(mu, mu) + W(nu, nu)) / 2.

    ``self_terms`` may carry precomputed ``(W(mu, mu), W(nu, nu))``.
    """
    cfg = cfg or SinkhornConfig()
    cross = sinkhorn_ot(mu, nu, cfg).value
    if self_terms is None:
        self_terms = (sinkhorn_ot(mu, mu, cfg).value, sinkhorn_ot(nu, nu, cfg).value)
    return cross - 0.5 * (self_terms[0] + self_terms[1])


# exact oracle, MMD, KL --------------------------------------------------------------


def exact_w2(mu, nu) -> Tensor:
    """Unregularized squared W2 between equal-size uniform clouds via optimal assignment."""
    X, Y = _points(mu), _points(nu)
    if X.shape[0] != Y.shape[0]:
        raise AlignmentError(f"exact_w2 needs equal sample counts, got {X.shape[0]} and {Y.shape[0]}")
    C = cost_matrix(X, Y)
    rows, cols = linear_sum_assignment(C.data)
    return C[rows, cols].mean()


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    Z = np.concatenate([X, Y], axis=0)
    sq = (Z * Z).sum(axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T, 0.0)
    iu = np.triu_indices(len(Z), k=1)
    if len(iu[0]) == 0:
        return 1.0
    h = float(np.median(np.sqrt(D[iu])))
    return h if h > 0 else 1.0


def mmd(mu, nu, bandwidth: float | None = None) -> Tensor:
    """Biased squared MMD with a Gaussian kernel (median-heuristic bandwidth)."""
    X, Y = _points(mu), _points(nu)
    h = bandwidth if bandwidth is not None else median_bandwidth(X.data, Y.data)
    if h <= 0:
        h = 1.0
    scale = -1.0 / (2.0 * h * h)

    def k(A, B):
        return nc.exp(cost_matrix(A, B) * scale).mean()

    return k(X, X) + k(Y, Y) - 2.0 * k(X, Y)


SIMPLEX_TOL = 1e-6
KL_FLOOR = 1e-12


def _check_simplex(P: np.ndarray, which: str) -> None:
    if np.any(P < -SIMPLEX_TOL) or np.any(np.abs(P.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise nc.DomainError(f"KL divergence needs softmax-normalized rows; {which} is off the simplex")


def kl_divergence(mu, nu) -> Tensor:
    """KL between the mean rows of two sets of categorical distributions."""
    X, Y = _points(mu), _points(nu)
    _check_simplex(X.data, "first measure")
    _check_simplex(Y.data, "second measure")
    p = nc.maximum(X.mean(axis=0), KL_FLOOR)
    q = nc.maximum(Y.mean(axis=0), KL_FLOOR)
    return (p * (nc.log(p) - nc.log(q))).sum()


# alignment loss ---------------------------------------------------------------------


def _pair_divergences(points: list[Tensor], cfg: AlignmentConfig, scfg: SinkhornConfig) -> list[tuple[tuple[int, int], Tensor]]:
    K = len(points)
    pairs = list(itertools.combinations(range(K), 2))
    out = []
    if cfg.divergence == "sinkhorn":
        if scfg.epsilon == 0:
            return [((i, j), exact_w2(points[i], points[j])) for i, j in pairs]
        selfs = [sinkhorn_ot(p, p, scfg).value for p in points]
        for i, j in pairs:
            out.append(((i, j), sinkhorn_divergence(points[i], points[j], scfg, (selfs[i], selfs[j]))))
    elif cfg.divergence == "exact_w2":
        out = [((i, j), exact_w2(points[i], points[j])) for i, j in pairs]
    elif cfg.divergence == "mmd":
        out = [((i, j), mmd(points[i], points[j], cfg.mmd_bandwidth)) for i, j in pairs]
    else:
        for i, j in pairs:
            a, b = kl_divergence(points[i], points[j]), kl_divergence(points[j], points[i])
            out.append(((i, j), a if a.item() >= b.item() else b))
    return out


def max_pair(points: list[Tensor], cfg: AlignmentConfig, scfg: SinkhornConfig) -> tuple[tuple[int, int], Tensor]:
    """The largest pairwise divergence; ties go to the lowest pair index."""
    best = None
    for pair, d in _pair_divergences(points, cfg, scfg):
        if best is None or d.item() > best[1].item():
            best = (pair, d)
    return best


def alignment_loss(
    taps: Sequence[Sequence[Tensor]],
    cfg: AlignmentConfig | None = None,
    scfg: SinkhornConfig | None = None,
    return_pairs: bool = False,
):
    """Sum over stacks of the maximum pairwise divergence between domains.

    ``taps[k][m]`` is the raw feature batch of domain ``k`` at stack (or block)
    ``m``. The normalizer is applied here.
    """
    cfg = cfg or AlignmentConfig()
    scfg = scfg or SinkhornConfig()
    K = len(taps)
    if K < 2:
        raise AlignmentError(f"alignment needs at least two domains, got {K}")
    n_units = len(taps[0])
    if any(len(t) != n_units for t in taps):
        raise AlignmentError("every domain must provide the same number of taps")
    total = None
    chosen = []
    for m in range(n_units):
        widths = {taps[k][m].shape[1] for k in range(K)}
        if len(widths) != 1:
            raise AlignmentError(f"inconsistent feature widths {sorted(widths)} at tap {m}")
        pts = [normalize(taps[k][m], cfg.normalizer) for k in range(K)]
        pair, d = max_pair(pts, cfg, scfg)
        chosen.append(pair)
        total = d if total is None else total + d
    return (total, chosen) if return_pairs else total


# theorem check ----------------------------------------------------------------------


@dataclass
class GapCheck:
    lhs: float
    rhs: float
    holds: bool
    constant: float
    input_w: float

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.holds))


def theorem_gap_check(
    model,
    batches: Sequence[np.ndarray],
    cfg: AlignmentConfig | None = None,
    scfg: SinkhornConfig | None = None,
) -> GapCheck:
    """Compare the stack-wise Sinkhorn alignment with its input-space bound.

    lhs: sum over stacks of the max pairwise Sinkhorn divergence of normalized
    features. rhs: sum_m max(C_m^2, 1) times the max pairwise entropic OT
    between the raw input batches, with C_m from ``lipschitz_bound``.

    Raw inputs have large costs relative to epsilon, so their Sinkhorn runs
    converge slowly. A truncated run returns a dual-feasible value, which
    bounds W_eps from below, so truncation can only make rhs smaller and the
    check stricter.
    """
    from .model import g_m, lipschitz_bound

    cfg = cfg or AlignmentConfig()
    scfg = scfg or SinkhornConfig(unroll_grad=False, max_iters=1000, tol=1e-9)
    if scfg.epsilon <= 0:
        raise AlignmentError("theorem_gap_check needs epsilon > 0")
    sd_cfg = AlignmentConfig(normalizer=cfg.normalizer, divergence="sinkhorn")
    with nc.no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", SinkhornNonConvergence)
        xs = [Tensor(np.asarray(b, dtype=np.float64)) for b in batches]
        taps = [[g_m(x, model, m) for m in range(1, model.M + 1)] for x in xs]
        lhs = alignment_loss(taps, sd_cfg, scfg).item()
        c_sigma = 1.0
        const = sum(max(lipschitz_bound(model, m, c_sigma) ** 2, 1.0) for m in range(1, model.M + 1))
        w_in = max(sinkhorn_ot(xs[i], xs[j], scfg).value.item() for i, j in itertools.combinations(range(len(xs)), 2))
    rhs = const * w_in
    holds = lhs <= rhs + 1e-9 * max(1.0, abs(rhs))
    return GapCheck(lhs, rhs, bool(holds), const, w_in)
