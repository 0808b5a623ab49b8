"""Doubly residual stacking networks (N-BEATS-G/I, N-HiTS) and linear baselines.

Row convention: a batch is a ``(B, width)`` matrix and every linear map is
applied on the right, ``x @ W`` with ``W`` of shape ``(in, out)``. A column-convention
operator ``V W z`` therefore appears here as ``z @ W @ V`` with both matrices
stored transposed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

CHECKPOINT_FORMAT = "fanbeats-checkpoint/1"

VARIANTS = ("generic", "interpretable", "nhits")
STACK_KINDS = ("generic", "trend", "seasonality")
HEAD_INITS = ("zero", "uniform")


class ConfigError(ValueError):
    pass


# bases ------------------------------------------------------------------------------


def _grid(horizon: int) -> np.ndarray:
    return np.arange(horizon, dtype=np.float64) / horizon


def make_trend_basis(horizon: int, degree: int) -> np.ndarray:
    """Polynomial basis with column ``j`` equal to ``t**j``, ``t = arange(h)/h``."""
    if horizon < 1 or degree < 0:
        raise ConfigError(f"trend basis needs horizon >= 1 and degree >= 0, got {horizon}, {degree}")
    t = _grid(horizon)
    return np.stack([t**j for j in range(degree + 1)], axis=1)


def make_seasonality_basis(horizon: int, n_harmonics: int) -> np.ndarray:
    """Fourier basis: a ones column, then cos(2 pi k t) and sin(2 pi k t) for k = 1..n."""
    if horizon < 1 or n_harmonics < 1:
        raise ConfigError(f"seasonality basis needs horizon >= 1 and n_harmonics >= 1, got {horizon}, {n_harmonics}")
    t = _grid(horizon)
    k = np.arange(1, n_harmonics + 1, dtype=np.float64)
    angles = 2.0 * np.pi * np.outer(t, k)
    return np.concatenate([np.ones((horizon, 1)), np.cos(angles), np.sin(angles)], axis=1)


def interpolation_matrix(n_knots: int, n_points: int) -> np.ndarray:
    """Linear interpolation from ``n_knots`` uniform knots onto ``n_points`` positions.

    Knots sit at uniform positions spanning ``[0, n_points - 1]`` with both ends
    included. Returned with shape ``(n_knots, n_points)`` so that
    ``values @ M`` interpolates row vectors.
    """
    if n_knots < 1 or n_points < 1:
        raise ConfigError("interpolation needs at least one knot and one point")
    M = np.zeros((n_knots, n_points))
    if n_knots == 1:
        M[0, :] = 1.0
        return M
    pos = np.arange(n_points) * (n_knots - 1) / max(n_points - 1, 1)
    for p, u in enumerate(pos):
        lo = min(int(math.floor(u)), n_knots - 2)
        w = u - lo
        M[lo, p] += 1.0 - w
        M[lo + 1, p] += w
    return M


def maxpool(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping max pooling along rows; the tail is right-padded with zeros."""
    x = nc.as_tensor(x)
    B, width = x.shape
    if kernel < 1:
        raise ConfigError("pooling kernel must be >= 1")
    if kernel > width:
        raise ConfigError(f"pooling kernel {kernel} exceeds input width {width}")
    if kernel == 1:
        return x
    n_out = -(-width // kernel)
    pad = n_out * kernel - width
    if pad:
        x = nc.concat([x, Tensor(np.zeros((B, pad)))], axis=1)
    return nc.reduce("max", x.reshape(B, n_out, kernel), axis=2)


# parameters -------------------------------------------------------------------------


@dataclass
class BlockParams:
    """Weights shared by every block of one stack.

    ``fc_weights`` holds ``(W, b)`` pairs for the feature extractor, first
    ``in -> gamma`` then ``gamma -> gamma``. ``basis_down``/``basis_up`` of None
    stand for identity bases.
    """

    fc_weights: list[tuple[Tensor, Tensor]]
    proj_down: Tensor
    proj_up: Tensor
    basis_down: Tensor | None = None
    basis_up: Tensor | None = None
    basis_trainable: bool = False
    kind: str = "generic"
    kernel: int = 1

    @property
    def input_width(self) -> int:
        return self.fc_weights[0][0].shape[0]

    @property
    def gamma(self) -> int:
        return self.fc_weights[-1][0].shape[1]

    def named_tensors(self, prefix: str = "") -> list[tuple[str, Tensor, str]]:
        """``(name, tensor, group)`` with group in phi/theta_down/theta_up/basis."""
        out = []
        for i, (W, b) in enumerate(self.fc_weights):
            out.append((f"{prefix}fc{i}.weight", W, "phi"))
            out.append((f"{prefix}fc{i}.bias", b, "phi"))
        out.append((f"{prefix}proj_down", self.proj_down, "theta_down"))
        out.append((f"{prefix}proj_up", self.proj_up, "theta_up"))
        if self.basis_down is not None:
            out.append((f"{prefix}basis_down", self.basis_down, "theta_down" if self.basis_trainable else "basis"))
        if self.basis_up is not None:
            out.append((f"{prefix}basis_up", self.basis_up, "theta_up" if self.basis_trainable else "basis"))
        return out


# gain sqrt(1/3) reproduces the common nn.Linear default bound 1/sqrt(fan_in)
INIT_GAIN = math.sqrt(1.0 / 3.0)


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = INIT_GAIN) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_block_params(
    rng: np.random.Generator,
    alpha: int,
    beta: int,
    gamma: int,
    n_layers: int = 4,
    kind: str = "generic",
    degree: int = 2,
    n_harmonics: int = 2,
    kernel: int = 1,
    basis_trainable: bool = False,
    head_init: str = "zero",
) -> BlockParams:
    if kind not in STACK_KINDS:
        raise ConfigError(f"unknown stack kind {kind!r}")
    if head_init not in HEAD_INITS:
        raise ConfigError(f"unknown head_init {head_init!r}")
    if n_layers < 1:
        raise ConfigError("feature extractor needs at least one layer")
    in_width = -(-alpha // kernel)
    fc = []
    fan_in = in_width
    for _ in range(n_layers):
        W = Tensor(_kaiming_uniform(rng, fan_in, gamma), requires_grad=True)
        b = Tensor(np.zeros(gamma), requires_grad=True)
        fc.append((W, b))
        fan_in = gamma
    if kind == "generic":
        # reduced-resolution knots for pooled variants; identity bases otherwise
        down_w, up_w = -(-beta // kernel), -(-alpha // kernel)
        basis_down = basis_up = None
        if kernel > 1:
            basis_down = Tensor(interpolation_matrix(down_w, beta))
            basis_up = Tensor(interpolation_matrix(up_w, alpha))
    elif kind == "trend":
        basis_down = Tensor(make_trend_basis(beta, degree).T)
        basis_up = Tensor(make_trend_basis(alpha, degree).T)
        down_w = up_w = degree + 1
    else:
        basis_down = Tensor(make_seasonality_basis(beta, n_harmonics).T)
        basis_up = Tensor(make_seasonality_basis(alpha, n_harmonics).T)
        down_w = up_w = 2 * n_harmonics + 1
    if basis_trainable:
        for t in (basis_down, basis_up):
            if t is not None:
                t.requires_grad = True
                t.node_id = next(nc._ids)
    # A zero forecast head starts every horizon at 0, where the SMAPE slope
    # points toward the target. A random head can start a horizon on the wrong
    # side of zero for all inputs, where SMAPE is flat at 2 and never recovers.
    down = _kaiming_uniform(rng, gamma, down_w)
    proj_down = Tensor(np.zeros_like(down) if head_init == "zero" else down, requires_grad=True)
    proj_up = Tensor(_kaiming_uniform(rng, gamma, up_w), requires_grad=True)
    return BlockParams(fc, proj_down, proj_up, basis_down, basis_up, basis_trainable, kind, kernel)


@dataclass
class NBeatsModel:
    stacks: list[BlockParams]
    L: int
    alpha: int
    beta: int
    gamma: int
    variant: str = "generic"
    nhits_kernel: int = 1
    legacy_residual: bool = False
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stacks:
            raise ConfigError("model needs at least one stack")
        if self.L < 1:
            raise ConfigError("stacks need at least one block")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    @property
    def M(self) -> int:
        return len(self.stacks)

    def named_parameters(self) -> list[tuple[str, Tensor, str]]:
        out = []
        for m, p in enumerate(self.stacks):
            out.extend(p.named_tensors(f"stack{m}."))
        return out

    def parameters(self, groups: Sequence[str] = ("phi", "theta_down", "theta_up")) -> list[Tensor]:
        return [t for _, t, g in self.named_parameters() if g in groups]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t, _ in self.named_parameters():
            if name not in state:
                raise ConfigError(f"missing array {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ConfigError(f"array {name!r} has shape {arr.shape}, model expects {t.data.shape}")
            t.data = arr.copy()

    def manifest(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "variant": self.variant,
            "M": self.M,
            "L": self.L,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "n_layers": len(self.stacks[0].fc_weights),
            "stack_kinds": [p.kind for p in self.stacks],
            "nhits_kernel": self.nhits_kernel,
            "legacy_residual": self.legacy_residual,
            "seed": self.seed,
            "shapes": {name: list(t.shape) for name, t, _ in self.named_parameters()},
            **({"meta": self.meta} if self.meta else {}),
        }


def build_model(
    alpha: int,
    beta: int,
    gamma: int = 512,
    M: int = 3,
    L: int = 4,
    n_layers: int = 4,
    variant: str = "generic",
    stack_kinds: Sequence[str] | None = None,
    degree: int = 2,
    n_harmonics: int = 2,
    nhits_kernel: int = 2,
    legacy_residual: bool = False,
    seed: int = 0,
    head_init: str = "zero",
) -> NBeatsModel:
    """Seeded model construction.

    ``interpretable`` defaults to ``[trend, seasonality, seasonality]`` and
    ignores ``M`` unless ``stack_kinds`` is given.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if alpha < 1 or beta < 1 or gamma < 1:
        raise ConfigError("alpha, beta and gamma must be positive")
    if stack_kinds is None:
        stack_kinds = ["trend", "seasonality", "seasonality"] if variant == "interpretable" else ["generic"] * M
    kernel = nhits_kernel if variant == "nhits" else 1
    if kernel > alpha:
        raise ConfigError(f"pooling kernel {kernel} exceeds lookback {alpha}")
    rng = np.random.default_rng(seed)
    stacks = [
        init_block_params(rng, alpha, beta, gamma, n_layers, kind, degree, n_harmonics, kernel, head_init=head_init)
        for kind in stack_kinds
    ]
    return NBeatsModel(stacks, L, alpha, beta, gamma, variant, kernel, legacy_residual, seed)


# forward passes ---------------------------------------------------------------------


def _check_width(x: Tensor, width: int) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise nc.DimensionError(f"expected input of shape (B, {width}), got {x.shape}")


def feature(x: Tensor, p: BlockParams) -> Tensor:
    """The ReLU MLP feature extractor (pooling first for N-HiTS stacks)."""
    h = maxpool(x, p.kernel) if p.kernel > 1 else x
    for W, b in p.fc_weights:
        h = nc.relu(h @ W + b)
    return h


def _heads(z: Tensor, p: BlockParams) -> tuple[Tensor, Tensor]:
    forecast = z @ p.proj_down
    if p.basis_down is not None:
        forecast = forecast @ p.basis_down
    backcast = z @ p.proj_up
    if p.basis_up is not None:
        backcast = backcast @ p.basis_up
    return backcast, forecast


def block_forward(x: Tensor, p: BlockParams) -> tuple[Tensor, Tensor, Tensor]:
    """One block: ``(feature, backcast, forecast)``."""
    x = nc.as_tensor(x)
    alpha = p.proj_up.shape[1] if p.basis_up is None else p.basis_up.shape[1]
    _check_width(x, alpha)
    z = feature(x, p)
    backcast, forecast = _heads(z, p)
    return z, backcast, forecast


def nhits_block_forward(x: Tensor, p: BlockParams, kernel: int | None = None):
    """Block forward with pooled input and interpolated outputs.

    ``p`` must have been built for the same kernel; ``kernel`` is accepted to
    validate that.
    """
    if kernel is not None and kernel != p.kernel:
        raise ConfigError(f"block was built for kernel {p.kernel}, got {kernel}")
    return block_forward(x, p)


def residual_map(x: Tensor, p: BlockParams) -> Tensor:
    """r(x) = x - backcast(psi(x))."""
    _, backcast, _ = block_forward(x, p)
    return x - backcast


@dataclass
class StackOutput:
    residual_out: Tensor
    forecast: Tensor
    tap_raw: Tensor
    block_features: list[Tensor]


def stack_forward(x_in: Tensor, p: BlockParams, L: int, legacy_residual: bool = False):
    """Run ``L`` weight-shared blocks with the residual recursion.

    Returns ``(residual_out, stack_forecast, tap_raw)``; use
    :func:`stack_forward_full` to also get every block's feature.
    """
    out = stack_forward_full(x_in, p, L, legacy_residual)
    return out.residual_out, out.forecast, out.tap_raw


def stack_forward_full(x_in: Tensor, p: BlockParams, L: int, legacy_residual: bool = False) -> StackOutput:
    if L < 1:
        raise ConfigError("L must be >= 1")
    x = nc.as_tensor(x_in)
    forecast = None
    feats = []
    for l in range(L):
        z, backcast, f = block_forward(x, p)
        feats.append(z)
        forecast = f if forecast is None else forecast + f
        if l < L - 1 or not legacy_residual:
            x = x - backcast
    return StackOutput(x, forecast, feats[-1], feats)


@dataclass
class ForwardResult:
    forecast: Tensor
    taps: list[Tensor]
    block_features: list[list[Tensor]]


def model_forward_full(x: Tensor, model: NBeatsModel) -> ForwardResult:
    x = nc.as_tensor(x)
    _check_width(x, model.alpha)
    total = None
    taps, blocks = [], []
    for p in model.stacks:
        out = stack_forward_full(x, p, model.L, model.legacy_residual)
        total = out.forecast if total is None else total + out.forecast
        taps.append(out.tap_raw)
        blocks.append(out.block_features)
        x = out.residual_out
    return ForwardResult(total, taps, blocks)


def model_forward(x: Tensor, model: NBeatsModel) -> tuple[Tensor, list[Tensor]]:
    """Summed forecast of all stacks plus each stack's tap.

    The tap of stack m is the feature of its last block, psi^m(x_{m,L}), which
    is exactly what :func:`g_m` composes.
    """
    res = model_forward_full(x, model)
    return res.forecast, res.taps


def g_m(x: Tensor, model: NBeatsModel, m: int) -> Tensor:
    """Stack-``m`` feature map (1-based) built by explicit composition.

    psi^m after (L-1) residual maps of stack m, after L residual maps of each
    earlier stack (L-1 of them under ``legacy_residual``).
    """
    if not 1 <= m <= model.M:
        raise IndexError(f"stack index {m} outside 1..{model.M}")
    x = nc.as_tensor(x)
    _check_width(x, model.alpha)
    prev_reps = model.L - 1 if model.legacy_residual else model.L
    for n in range(m - 1):
        for _ in range(prev_reps):
            x = residual_map(x, model.stacks[n])
    p = model.stacks[m - 1]
    for _ in range(model.L - 1):
        x = residual_map(x, p)
    return feature(x, p)


def predict(model: NBeatsModel, X: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = []
    with nc.no_grad():
        for i in range(0, len(X), batch_size):
            out.append(model_forward(Tensor(X[i : i + batch_size]), model)[0].data)
    if not out:
        return np.zeros((0, model.beta))
    return np.concatenate(out, axis=0)


# Lipschitz constants ----------------------------------------------------------------


def spectral_norm(A: np.ndarray, max_iter: int = 64, rtol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``A^T A``."""
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise FloatingPointError("non-finite matrix in spectral norm")
    if A.size == 0 or not np.any(A):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = math.sqrt(nw)
        if sigma > 0 and abs(new - sigma) <= rtol * new:
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(A @ v)) if sigma else 0.0


def _effective(p: BlockParams, which: str) -> np.ndarray:
    proj, basis = (p.proj_up, p.basis_up) if which == "up" else (p.proj_down, p.basis_down)
    return proj.data if basis is None else proj.data @ basis.data


def stack_constants(p: BlockParams) -> tuple[float, float]:
    """(C_psi, C_up): product of FC spectral norms and backcast operator norm."""
    c = 1.0
    for W, _ in p.fc_weights:
        c *= spectral_norm(W.data)
    return c, spectral_norm(_effective(p, "up"))


def lipschitz_bound(model: NBeatsModel, m: int, c_sigma: float = 1.0) -> float:
    """Lipschitz constant of ``sigma o g_m`` (1-based ``m``) from per-stack norms.

    Pooling is 1-Lipschitz and adds no factor.
    """
    if not 1 <= m <= model.M:
        raise IndexError(f"stack index {m} outside 1..{model.M}")
    consts = [stack_constants(p) for p in model.stacks[:m]]
    cm, cm_up = consts[-1]
    prev_reps = model.L - 1 if model.legacy_residual else model.L
    bound = c_sigma * cm * (1.0 + cm * cm_up) ** (model.L - 1)
    for cn, cn_up in consts[:-1]:
        bound *= (1.0 + cn * cn_up) ** prev_reps
    if not math.isfinite(bound):
        raise FloatingPointError("Lipschitz bound overflowed")
    return bound


# checkpoints ------------------------------------------------------------------------


def save_checkpoint(model: NBeatsModel, path: str | Path) -> Path:
    """Write named f64 arrays plus a JSON manifest into one ``.npz`` file."""
    path = Path(path)
    arrays = model.state_dict()
    arrays["__manifest__"] = np.array(json.dumps(model.manifest(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> NBeatsModel:
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(str(z["__manifest__"]))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {manifest.get('format')!r}")
        state = {k: z[k] for k in z.files if k != "__manifest__"}
    model = build_model(
        manifest["alpha"],
        manifest["beta"],
        manifest["gamma"],
        M=manifest["M"],
        L=manifest["L"],
        n_layers=manifest["n_layers"],
        variant=manifest["variant"],
        stack_kinds=manifest["stack_kinds"],
        nhits_kernel=manifest["nhits_kernel"] if manifest["variant"] == "nhits" else 2,
        legacy_residual=manifest["legacy_residual"],
        seed=manifest["seed"],
    )
    model.load_state_dict(state)
    model.meta = manifest.get("meta", {})
    return model


# linear baselines -------------------------------------------------------------------


def moving_average_matrix(alpha: int, window: int) -> np.ndarray:
    """Row-convention averaging operator for the trend part of DLinear.

    Position ``t`` averages the ``window`` values starting at
    ``clip(t - (window - 1) // 2, 0, alpha - window)`` so edges shift the window
    inward instead of padding.
    """
    if not 1 <= window <= alpha:
        raise ConfigError(f"moving-average window {window} must lie in 1..{alpha}")
    A = np.zeros((alpha, alpha))
    for t in range(alpha):
        s = min(max(t - (window - 1) // 2, 0), alpha - window)
        A[s : s + window, t] = 1.0 / window
    return A


@dataclass
class LinearParams:
    kind: str
    weight: Tensor
    bias: Tensor
    weight_trend: Tensor | None = None
    bias_trend: Tensor | None = None
    window: int = 25

    def parameters(self) -> list[Tensor]:
        ps = [self.weight, self.bias]
        if self.weight_trend is not None:
            ps += [self.weight_trend, self.bias_trend]
        return ps


def init_linear_params(alpha: int, beta: int, kind: str = "nlinear", window: int = 25, seed: int = 0) -> LinearParams:
    if kind not in ("nlinear", "dlinear"):
        raise ConfigError(f"unknown linear baseline {kind!r}")
    rng = np.random.default_rng(seed)

    def w():
        return Tensor(_kaiming_uniform(rng, alpha, beta), requires_grad=True)

    def b():
        return Tensor(np.zeros(beta), requires_grad=True)

    if kind == "nlinear":
        return LinearParams(kind, w(), b())
    return LinearParams(kind, w(), b(), w(), b(), min(window, alpha))


def linear_baseline_forward(x: Tensor, kind: str, params: LinearParams) -> Tensor:
    x = nc.as_tensor(x)
    alpha = params.weight.shape[0]
    _check_width(x, alpha)
    if kind != params.kind:
        raise ConfigError(f"parameters are for {params.kind!r}, not {kind!r}")
    if kind == "nlinear":
        last = x[:, alpha - 1 : alpha]
        return (x - last) @ params.weight + params.bias + last
    trend = x @ Tensor(moving_average_matrix(alpha, params.window))
    remainder = x - trend
    return remainder @ params.weight + params.bias + trend @ params.weight_trend + params.bias_trend
