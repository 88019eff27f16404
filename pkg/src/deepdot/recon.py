"""Classical reconstructions: damped Gauss-Newton (Levenberg-Marquardt) with
re-linearization about the current estimate, and lp-penalized least squares
by majorization-minimization with a cooled regularization weight.

Complex data are handled by stacking real and imaginary parts, so every
normal-equation system is real.  Because the Jacobian is short and wide
(``#MEAS << N``), systems ``(J^T J + lam W) x = J^T y`` are solved in the
dual form ``x = W^-1 J^T (J W^-1 J^T + lam I)^-1 y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateInput, DivergenceError, InvalidArgument, SolverFailure
from .forward import ForwardModel, all_pairs
from .geometry import DeltaMuVolume


@dataclass(frozen=True)
class LMConfig:
    lambda_constant: float = 10.0
    max_outer_iterations: int = 20
    stall_window: int = 2
    nonnegative: bool = True

    def __post_init__(self):
        if not self.lambda_constant > 0:
            raise InvalidArgument("lambda constant must be positive")


@dataclass(frozen=True)
class SparseConfig:
    p: float = 1.0
    lambda_constant: float = 10.0
    cooling_factor: float = 0.5
    stages: int = 5
    inner_iterations: int = 10
    epsilon_smoothing: float = 1e-6
    stall_window: int = 2
    nonnegative: bool = True

    def __post_init__(self):
        if self.p not in (1, 2):
            raise InvalidArgument("p must be 1 or 2")
        if not 0 < self.cooling_factor < 1:
            raise InvalidArgument("cooling factor must lie in (0, 1)")
        if self.lambda_constant < 0 or self.epsilon_smoothing < 0:
            raise InvalidArgument("lambda and epsilon must be non-negative")


@dataclass
class ReconResult:
    delta_mu: DeltaMuVolume
    residual_history: list = field(default_factory=list)
    iterations_used: int = 0
    converged: bool = False


def _stack(J):
    J = np.asarray(J)
    if np.iscomplexobj(J):
        return np.vstack([J.real, J.imag])
    return J


def _stack_vec(y):
    y = np.asarray(y)
    if np.iscomplexobj(y):
        return np.concatenate([y.real, y.imag])
    return y


def gram_diagonal(J):
    """``Re diag(J^H J)`` as squared column norms."""
    J = np.asarray(J)
    return np.einsum("ij,ij->j", J.real, J.real) + np.einsum("ij,ij->j", J.imag, J.imag) \
        if np.iscomplexobj(J) else np.einsum("ij,ij->j", J, J)


def lambda_rule(J, c):
    """``c * max_i Re (J^H J)_ii``."""
    d = gram_diagonal(J)
    if d.size == 0 or d.max() == 0:
        raise DegenerateInput("Jacobian is zero")
    return float(c * d.max())


def weighted_ridge(J, y, lam, weights=None):
    """Minimizer of ``||y - J x||^2 + lam x^T W x`` for diagonal ``W > 0`` (dual form)."""
    Js = _stack(J)
    ys = _stack_vec(y)
    winv = np.ones(Js.shape[1]) if weights is None else 1.0 / np.asarray(weights, dtype=float)
    JW = Js * winv
    G = JW @ Js.T
    G[np.diag_indices_from(G)] += lam
    try:
        alpha = sla.solve(G, ys, assume_a="pos" if lam > 0 else "sym")
    except (sla.LinAlgError, ValueError) as exc:
        raise SolverFailure(f"normal equations could not be solved: {exc}") from exc
    if not np.all(np.isfinite(alpha)):
        raise SolverFailure("normal equations produced non-finite values")
    return JW.T @ alpha


class _Linearizer:
    """Exact data and Born Jacobian about ``background + delta_mu`` on a pair list."""

    def __init__(self, background, config, pairs):
        self.base = ForwardModel(background, config)
        self.background = background
        self.config = config
        self.pairs = pairs

    def __call__(self, delta_mu):
        if not np.any(delta_mu):
            model = self.base
            data = np.zeros(self.pairs.shape[0], dtype=complex)
        else:
            model = self.base.perturbed_model(delta_mu)
            u = model.incident_at_detectors() - self.base.incident_at_detectors()
            data = u[self.pairs[:, 1], self.pairs[:, 0]]
        return data, model.jacobian(self.pairs)


def _data_vector(data, pairs):
    if hasattr(data, "vector"):
        return data.vector(pairs)
    return np.asarray(data, dtype=complex).ravel()


def _stalled(history, window):
    """True when none of the last ``window`` residuals beat the best before them."""
    if len(history) <= window:
        return False
    return min(history[-window:]) >= min(history[:-window])


def lm_reconstruct(data, background, config, lm=LMConfig(), pairs=None):
    """Levenberg-Marquardt reconstruction with re-linearization per iteration.

    Parameters
    ----------
    data : MultiStaticMatrix or ndarray
        Measured scattered data; an array must already be ordered like ``pairs``.
    background : OpticalMedium
        Homogeneous background the perturbation is added to.
    config : SourceDetectorConfig
    lm : LMConfig
    pairs : (K, 2) int array, optional
        ``(source, detector)`` rows used; all pairs by default.

    Returns
    -------
    ReconResult
        The iterate with the smallest data residual.
    """
    pairs = all_pairs(config) if pairs is None else np.asarray(pairs, dtype=int).reshape(-1, 2)
    g = _data_vector(data, pairs)
    lin = _Linearizer(background, config, pairs)
    N = background.grid.n_voxels
    x = np.zeros(N)
    history = []
    best_x, best_r = x.copy(), np.inf
    converged = False
    it = 0
    for it in range(1, lm.max_outer_iterations + 1):
        model_data, J = lin(x)
        r = g - model_data
        rn = float(np.linalg.norm(r))
        history.append(rn)
        if rn < best_r:
            best_r, best_x = rn, x.copy()
        if rn > 10.0 * history[0] and history[0] > 0:
            raise DivergenceError(f"residual grew from {history[0]:.3e} to {rn:.3e}")
        if rn == 0 or _stalled(history, lm.stall_window):
            converged = True
            break
        lam = lambda_rule(J, lm.lambda_constant)
        x = x + weighted_ridge(J, r, lam)
        if lm.nonnegative:
            x = np.maximum(x, 0.0)
    else:
        model_data, _ = lin(x)
        rn = float(np.linalg.norm(g - model_data))
        history.append(rn)
        if rn < best_r:
            best_r, best_x = rn, x.copy()
    return ReconResult(DeltaMuVolume(background.grid, np.maximum(best_x, 0.0)), history, it, converged)


def mm_sparse_solve(J, y, lam, p=1.0, epsilon=1e-6, inner_iterations=10, x0=None,
                    nonnegative=True):
    """Majorization-minimization for ``||y - J x||^2 + lam sum (x_i^2 + eps)^(p/2)``.

    Each inner step solves the reweighted ridge system with weights
    ``(p/2) (x_i^2 + eps)^(p/2 - 1)``, which for ``p = 2`` are all one so that a
    single step is the ridge solution.  Without ``x0`` the iteration starts
    from that ridge solution.
    """
    if p == 2:
        x = weighted_ridge(J, y, lam)
        return np.maximum(x, 0.0) if nonnegative else x
    x = weighted_ridge(J, y, lam) if x0 is None else np.asarray(x0, dtype=float)
    if nonnegative:
        x = np.maximum(x, 0.0)
    for _ in range(inner_iterations):
        w = 0.5 * p * (x * x + epsilon) ** (0.5 * p - 1.0)
        x = weighted_ridge(J, y, lam, w)
        if nonnegative:
            x = np.maximum(x, 0.0)
    return x


def mm_sparse_reconstruct(data, background, config, sparse=SparseConfig(), pairs=None):
    """lp reconstruction with ``lam_k = c * max diag(J^T J) * gamma^k`` over outer stages.

    Each stage re-linearizes about the current estimate and solves the
    linearized penalized problem for the full perturbation with
    :func:`mm_sparse_solve`.
    """
    pairs = all_pairs(config) if pairs is None else np.asarray(pairs, dtype=int).reshape(-1, 2)
    g = _data_vector(data, pairs)
    lin = _Linearizer(background, config, pairs)
    x = np.zeros(background.grid.n_voxels)
    history, best_x, best_r = [], x.copy(), np.inf
    converged = False
    stage = 0
    lam0 = None
    for stage in range(sparse.stages + 1):
        model_data, J = lin(x)
        r = g - model_data
        rn = float(np.linalg.norm(r))
        history.append(rn)
        if rn < best_r:
            best_r, best_x = rn, x.copy()
        if history[0] > 0 and rn > 10.0 * history[0]:
            raise DivergenceError(f"residual grew from {history[0]:.3e} to {rn:.3e}")
        if stage == sparse.stages or rn == 0 or _stalled(history, sparse.stall_window):
            converged = stage < sparse.stages or rn == 0
            break
        if lam0 is None:
            lam0 = lambda_rule(J, sparse.lambda_constant)
        lam = lam0 * sparse.cooling_factor**stage
        y = r + J @ x
        x = mm_sparse_solve(J, y, lam, sparse.p, sparse.epsilon_smoothing,
                            sparse.inner_iterations, x0=x if np.any(x) else None,
                            nonnegative=sparse.nonnegative)
    return ReconResult(DeltaMuVolume(background.grid, np.maximum(best_x, 0.0)), history, stage,
                       converged)

