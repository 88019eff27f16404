"""Frequency-domain diffusion forward model on a voxel grid.

The discretized operator is ``A = -div(D grad) + k^2`` with
``k^2 = mu - i*omega/c0``, so that ``A u = S`` is the diffusion equation
``div(D grad u) - k^2 u = -S``.  Cell-centered 7-point finite volumes with
harmonic-mean face coefficients; the Robin condition ``u + l du/dn = 0`` is
eliminated through a ghost value extrapolated linearly across the half cell,
which adds ``D / (h (l + h/2))`` to the diagonal of every boundary face.
A point source of strength ``S0`` is ``S0 / h^3`` at its nearest voxel.

Two exact solution routes exist:

* :func:`solve` on an assembled :class:`DiffusionOperator` (sparse LU below a
  size threshold, Jacobi-preconditioned BiCGSTAB above).
* :class:`SeparableSolver` for homogeneous media, where the operator is a
  Kronecker sum of three tridiagonal matrices and can be inverted by
  diagonalizing each of them.  Perturbed media are then handled on the
  perturbation support only (discrete Lippmann-Schwinger system).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .errors import InvalidArgument, SolverFailure
from .geometry import DeltaMuVolume

C_VACUUM = 2.998e11  # mm/s
DIRECT_THRESHOLD = 50_000
SOLVER_TOL = 1e-8


def groenhuis_reff(n):
    """Effective reflection coefficient for relative refractive index ``n``."""
    if n < 1:
        raise InvalidArgument("polynomial fit is only valid for n >= 1")
    if n == 1:
        return 0.0
    return -1.440 / n**2 + 0.710 / n + 0.668 + 0.0636 * n


def extrapolation_length(D, reff):
    return 2.0 * D * (1.0 + reff) / (1.0 - reff)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


@dataclass(frozen=True)
class OpticalMedium:
    """Absorption/scattering maps on a grid.

    ``diffusion`` overrides the default ``1 / (3 (mu + musp))``; perturbed media
    built with :meth:`perturbed` keep the background diffusion map, since only
    absorption is reconstructed.  ``reff`` overrides the boundary reflection
    computed from ``refractive_index``.
    """

    grid: object
    mu: np.ndarray = field(repr=False)
    musp: np.ndarray = field(repr=False)
    refractive_index: float = 1.33
    reff: float | None = None
    diffusion: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.grid.n_voxels
        mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (n,)).copy()
        musp = np.broadcast_to(np.asarray(self.musp, dtype=float), (n,)).copy()
        if np.any(mu <= 0) or np.any(musp <= 0):
            raise InvalidArgument("mu and musp must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "musp", musp)
        if self.diffusion is not None:
            D = np.broadcast_to(np.asarray(self.diffusion, dtype=float), (n,)).copy()
            if np.any(~np.isfinite(D)) or np.any(D <= 0):
                raise InvalidArgument("diffusion coefficient must be finite and positive")
            object.__setattr__(self, "diffusion", D)

    @classmethod
    def homogeneous(cls, grid, mu, musp, refractive_index=1.33, reff=None):
        return cls(grid, np.full(grid.n_voxels, float(mu)), np.full(grid.n_voxels, float(musp)),
                   refractive_index, reff)

    @property
    def D(self):
        if self.diffusion is not None:
            return self.diffusion
        return 1.0 / (3.0 * (self.mu + self.musp))

    @property
    def c0(self):
        return C_VACUUM / self.refractive_index

    @property
    def boundary_reflection(self):
        return groenhuis_reff(self.refractive_index) if self.reff is None else self.reff

    def k2(self, omega):
        return self.mu - 1j * omega / self.c0

    def perturbed(self, delta_mu):
        dm = delta_mu.values if isinstance(delta_mu, DeltaMuVolume) else np.asarray(delta_mu)
        return OpticalMedium(self.grid, self.mu + dm, self.musp, self.refractive_index,
                             self.reff, self.D)

    def is_homogeneous(self):
        D = self.D
        return bool(np.all(self.mu == self.mu[0]) and np.all(D == D[0]))


@dataclass
class DiffusionOperator:
    matrix: sp.csc_matrix
    grid: object
    omega: float
    boundary_voxels: np.ndarray
    extrapolation_length: np.ndarray
    _lu: object = field(default=None, repr=False)

    @property
    def n(self):
        return self.matrix.shape[0]

    def factorized(self):
        if self._lu is None:
            self._lu = sla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A",
                                options={"SymmetricMode": True})
        return self._lu


def _axis_faces(shape, axis):
    """Linear indices of neighbouring voxel pairs along ``axis``."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()


def _boundary_faces(shape):
    """Boundary voxel index for every exterior face (a corner voxel appears 3 times)."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    out = []
    for axis in range(3):
        for end in (0, -1):
            sl = [slice(None)] * 3
            sl[axis] = end
            out.append(idx[tuple(sl)].ravel())
    return np.concatenate(out)


def assemble_operator(medium, omega):
    """Sparse complex-symmetric discretization of ``-div(D grad) + k^2``."""
    grid = medium.grid
    h = grid.resolution
    D = medium.D
    rows, cols, vals = [], [], []
    diag = medium.k2(omega).astype(complex)
    for axis in range(3):
        a, b = _axis_faces(grid.shape, axis)
        c = _harmonic(D[a], D[b]) / h**2
        rows += [a, b]
        cols += [b, a]
        vals += [-c, -c]
        np.add.at(diag, a, c)
        np.add.at(diag, b, c)
    bvox = _boundary_faces(grid.shape)
    ell = extrapolation_length(D[bvox], medium.boundary_reflection)
    np.add.at(diag, bvox, D[bvox] / (h * (ell + 0.5 * h)))
    n = grid.n_voxels
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sp.coo_matrix((np.concatenate(vals).astype(complex),
                       (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsc()
    A.sort_indices()
    return DiffusionOperator(A, grid, omega, bvox, ell)


def _relative_residual(A, u, s):
    num = np.linalg.norm(A @ u - s, axis=0)
    den = np.linalg.norm(s, axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), num)


def solve(operator, source, *, method="auto", tol=SOLVER_TOL, maxiter=5000,
          direct_threshold=DIRECT_THRESHOLD):
    """Solve ``A u = s`` for one (``(N,)``) or several (``(N, r)``) right-hand sides.

    Raises
    ------
    SolverFailure
        If the relative residual of any column exceeds ``tol``.
    """
    s = np.asarray(source, dtype=complex)
    if not np.all(np.isfinite(s)):
        raise InvalidArgument("source vector must be finite")
    A = operator.matrix
    if method == "auto":
        method = "direct" if operator.n <= direct_threshold else "krylov"
    if method == "direct":
        u = operator.factorized().solve(s)
    elif method == "krylov":
        inv_diag = 1.0 / A.diagonal()
        M = sla.LinearOperator(A.shape, matvec=lambda x: inv_diag * x, dtype=complex)
        cols = s.reshape(operator.n, -1)
        u = np.zeros_like(cols)
        for j in range(cols.shape[1]):
            if not np.any(cols[:, j]):
                continue
            u[:, j], _ = sla.bicgstab(A, cols[:, j], rtol=0.1 * tol, atol=0.0,
                                      maxiter=maxiter, M=M)
        u = u.reshape(s.shape)
    else:
        raise InvalidArgument(f"unknown solve method {method!r}")
    res = _relative_residual(A, u, s)
    worst = float(np.max(res))
    if not worst <= tol:
        raise SolverFailure(f"{method} solve did not converge", worst)
    return u


def point_source(grid, point, strength=1.0):
    s = np.zeros(grid.n_voxels, dtype=complex)
    s[grid.nearest_voxel(point)] = strength / grid.voxel_volume
    return s


def green_function(operator, point, **kw):
    """Background Green's function ``G0(., y)`` for a unit point source at ``y``."""
    grid = operator.grid
    if not grid.contains(point):
        raise InvalidArgument(f"point {point} outside the grid")
    return solve(operator, point_source(grid, point), **kw)


def green_table(operator, indices, **kw):
    """Columns ``G0(., x_i)`` for the voxel indices ``indices``."""
    grid = operator.grid
    idx = np.asarray(indices, dtype=int)
    E = np.zeros((grid.n_voxels, idx.size), dtype=complex)
    E[idx, np.arange(idx.size)] = 1.0 / grid.voxel_volume
    return solve(operator, E, **kw)


class SeparableSolver:
    """Exact inverse of the operator of a homogeneous medium by fast diagonalization.

    The 3-D operator is ``K_x (+) K_y (+) K_z + k^2 I`` with real symmetric
    tridiagonal ``K``; eigendecomposing each ``K`` gives ``A^-1`` in
    ``O(N (nx + ny + nz))`` per right-hand side.
    """

    def __init__(self, medium, omega):
        if not medium.is_homogeneous():
            raise InvalidArgument("separable solver needs a homogeneous medium")
        grid = medium.grid
        h = grid.resolution
        D = float(medium.D[0])
        ell = float(extrapolation_length(D, medium.boundary_reflection))
        c = _harmonic(D, D) / h**2
        cb = D / (h * (ell + 0.5 * h))
        self.grid = grid
        self.k2 = complex(medium.k2(omega)[0])
        evals, self.Q = [], []
        for n in grid.shape:
            K = np.zeros((n, n))
            i = np.arange(n - 1)
            K[i, i] += c
            K[i + 1, i + 1] += c
            K[i, i + 1] = -c
            K[i + 1, i] = -c
            K[0, 0] += cb
            K[-1, -1] += cb
            w, Q = np.linalg.eigh(K)
            evals.append(w)
            self.Q.append(Q)
        self.lam = (evals[0][:, None, None] + evals[1][None, :, None]
                    + evals[2][None, None, :] + self.k2)

    def _transform(self, x, transpose):
        Qx, Qy, Qz = (Q.T if transpose else Q for Q in self.Q)
        nx, ny, nz = self.grid.shape
        r = x.shape[-1]
        y = (Qx @ x.reshape(nx, -1)).reshape(nx, ny, nz, r)
        y = np.einsum("ab,ibkr->iakr", Qy, y, optimize=True)
        y = np.einsum("ab,ijbr->ijar", Qz, y, optimize=True)
        return y

    def solve(self, rhs):
        b = np.asarray(rhs, dtype=complex)
        single = b.ndim == 1
        x = b.reshape(*self.grid.shape, -1)
        y = self._transform(x, transpose=True) / self.lam[..., None]
        y = self._transform(y, transpose=False)
        y = y.reshape(self.grid.n_voxels, -1)
        return y[:, 0] if single else y


def block_gmres(matvec, b, *, tol=1e-10, restart=60, max_restarts=20):
    """GMRES run independently on every column of ``b`` (vectorized over columns)."""
    b = np.asarray(b, dtype=complex)
    n, r = b.shape
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b, axis=0)
    bnorm_safe = np.where(bnorm > 0, bnorm, 1.0)
    for _ in range(max_restarts):
        res = b - matvec(x)
        beta = np.linalg.norm(res, axis=0)
        if np.all(beta <= tol * bnorm_safe):
            return x
        m = restart
        V = np.zeros((m + 1, n, r), dtype=complex)
        H = np.zeros((r, m + 1, m), dtype=complex)
        V[0] = res / np.where(beta > 0, beta, 1.0)
        g = np.zeros((r, m + 1), dtype=complex)
        g[:, 0] = beta
        cs = np.zeros((r, m), dtype=complex)
        sn = np.zeros((r, m), dtype=complex)
        k_used = 0
        k_col = np.zeros(r, dtype=int)
        for k in range(m):
            w = matvec(V[k])
            for j in range(k + 1):
                hjk = np.einsum("nr,nr->r", V[j].conj(), w)
                H[:, j, k] = hjk
                w = w - hjk * V[j]
            hn = np.linalg.norm(w, axis=0)
            H[:, k + 1, k] = hn
            V[k + 1] = w / np.where(hn > 0, hn, 1.0)
            for j in range(k):
                t = cs[:, j] * H[:, j, k] + sn[:, j] * H[:, j + 1, k]
                H[:, j + 1, k] = -np.conj(sn[:, j]) * H[:, j, k] + np.conj(cs[:, j]) * H[:, j + 1, k]
                H[:, j, k] = t
            # complex Givens rotation zeroing H[k+1, k]
            a, bb = H[:, k, k], H[:, k + 1, k]
            absa = np.abs(a)
            den = np.sqrt(absa**2 + np.abs(bb) ** 2)
            den = np.where(den > 0, den, 1.0)
            phase = np.where(absa > 0, a / np.where(absa > 0, absa, 1.0), 1.0)
            cs[:, k] = absa / den
            sn[:, k] = phase * np.conj(bb) / den
            H[:, k, k] = cs[:, k] * a + sn[:, k] * bb
            H[:, k + 1, k] = 0.0
            g[:, k + 1] = -np.conj(sn[:, k]) * g[:, k]
            g[:, k] = cs[:, k] * g[:, k]
            k_used = k + 1
            done = np.abs(g[:, k + 1]) <= 0.1 * tol * bnorm_safe
            k_col[(k_col == 0) & done] = k_used
            if np.all(done):
                break
        k_col[k_col == 0] = k_used
        for c in range(r):
            if beta[c] == 0:
                continue
            kc = k_col[c]
            y = np.linalg.solve(np.triu(H[c, :kc, :kc]), g[c, :kc])
            x[:, c] += np.tensordot(y, V[:kc, :, c], axes=(0, 0))
    res = b - matvec(x)
    worst = float(np.max(np.linalg.norm(res, axis=0) / bnorm_safe))
    if worst > tol:
        raise SolverFailure("block GMRES did not converge", worst)
    return x


@dataclass(frozen=True)
class MultiStaticMatrix:
    """Scattered fluence ``g[n, m] = u_s^m(d_n)`` with its probe geometry."""

    values: np.ndarray
    config: object

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (self.config.n_detectors, self.config.n_sources):
            raise InvalidArgument(f"data shape {v.shape} does not match the probe config")
        object.__setattr__(self, "values", v)

    def separations(self):
        return self.config.separations()

    def vector(self, pairs):
        """Entries for the ``(source, detector)`` rows of ``pairs``."""
        pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        return self.values[pairs[:, 1], pairs[:, 0]]


def all_pairs(config):
    """Every ``(source, detector)`` pair in detector-major order."""
    m, n = np.meshgrid(np.arange(config.n_sources), np.arange(config.n_detectors))
    return np.stack([m.ravel(), n.ravel()], axis=1)


class ForwardModel:
    """Fields and data of one medium under one probe configuration.

    Parameters
    ----------
    medium : OpticalMedium
        The medium about which everything is computed (the "background").
    config : SourceDetectorConfig
    solver : {"auto", "separable", "direct", "krylov"}
        "auto" picks the separable solver for homogeneous media and
        :func:`solve` otherwise.
    """

    def __init__(self, medium, config, solver="auto", tol=SOLVER_TOL):
        config.check_inside(medium.grid)
        self.medium = medium
        self.config = config
        self.grid = medium.grid
        self.omega = config.omega
        self.tol = tol
        if solver == "auto":
            solver = "separable" if medium.is_homogeneous() else "operator"
        self.solver = solver
        self.src_idx = np.array([self.grid.nearest_voxel(p) for p in config.sources])
        self.det_idx = np.array([self.grid.nearest_voxel(p) for p in config.detectors])

    @cached_property
    def operator(self):
        return assemble_operator(self.medium, self.omega)

    @cached_property
    def separable(self):
        return SeparableSolver(self.medium, self.omega)

    def apply_inverse(self, rhs):
        if self.solver == "separable":
            return self.separable.solve(rhs)
        method = "auto" if self.solver == "operator" else self.solver
        return solve(self.operator, rhs, method=method, tol=self.tol)

    def _point_sources(self, idx, strength):
        E = np.zeros((self.grid.n_voxels, idx.size), dtype=complex)
        E[idx, np.arange(idx.size)] = strength / self.grid.voxel_volume
        return E

    @cached_property
    def _fields(self):
        S0 = self.config.source_intensity
        ns = self.config.n_sources
        E = np.hstack([self._point_sources(self.src_idx, S0), self._point_sources(self.det_idx, 1.0)])
        U = self.apply_inverse(E)
        return U[:, :ns], U[:, ns:]

    @property
    def incident(self):
        """``(N, N_t)`` fields ``u0^m = S0 G0(., t_m)``."""
        return self._fields[0]

    @property
    def detector_green(self):
        """``(N, N_d)`` adjoint fields ``G0(., d_n)`` (equal to ``G0(d_n, .)`` by reciprocity)."""
        return self._fields[1]

    def incident_at_detectors(self):
        return self.incident[self.det_idx, :]

    # -- exact nonlinear map ------------------------------------------------

    def _support_fields(self, delta_mu):
        """Total fields restricted to the perturbation support.

        Solves ``(I + [A0^-1 R^T diag(dmu)]_S) u_S = u0_S``, the discrete
        Lippmann-Schwinger equation, with GMRES.
        """
        S = np.flatnonzero(delta_mu)
        dS = delta_mu[S]
        u0S = self.incident[S, :]
        N = self.grid.n_voxels

        def matvec(X):
            full = np.zeros((N, X.shape[1]), dtype=complex)
            full[S] = dS[:, None] * X
            return X + self.apply_inverse(full)[S]

        return S, dS, block_gmres(matvec, u0S, tol=1e-3 * self.tol)

    def scattered(self, delta_mu, method="auto"):
        """Exact scattered data ``M[dmu]`` as a :class:`MultiStaticMatrix`.

        ``method="direct"`` re-assembles and factorizes the perturbed operator;
        ``"support"`` solves on the perturbation support with the background
        inverse (requires the separable background); "auto" picks the latter
        when available.
        """
        dm = delta_mu.values if isinstance(delta_mu, DeltaMuVolume) else np.asarray(delta_mu, float)
        if not np.any(dm):
            return MultiStaticMatrix(np.zeros((self.config.n_detectors, self.config.n_sources)),
                                     self.config)
        if method == "auto":
            method = "support" if self.solver == "separable" else "direct"
        if method == "support":
            S, dS, uS = self._support_fields(dm)
            h3 = self.grid.voxel_volume
            g = -h3 * self.detector_green[S, :].T @ (dS[:, None] * uS)
        elif method == "direct":
            u = self.perturbed_model(dm).incident
            g = u[self.det_idx, :] - self.incident_at_detectors()
        else:
            raise InvalidArgument(f"unknown method {method!r}")
        return MultiStaticMatrix(g, self.config)

    def total_field(self, delta_mu):
        """Full-grid total fields ``(N, N_t)`` for the perturbed medium."""
        dm = delta_mu.values if isinstance(delta_mu, DeltaMuVolume) else np.asarray(delta_mu, float)
        if not np.any(dm):
            return self.incident.copy()
        if self.solver != "separable":
            return self.perturbed_model(dm).incident
        S, dS, uS = self._support_fields(dm)
        full = np.zeros((self.grid.n_voxels, uS.shape[1]), dtype=complex)
        full[S] = dS[:, None] * uS
        return self.incident - self.apply_inverse(full)

    def perturbed_model(self, delta_mu, solver="operator"):
        return ForwardModel(self.medium.perturbed(delta_mu), self.config, solver=solver, tol=self.tol)

    # -- linearization -------------------------------------------------------

    def jacobian(self, pairs=None):
        """Dense Born Jacobian, rows ordered like ``pairs`` (default: all, detector-major).

        ``J[(m, n), i] = -G0(d_n, x_i) u0^m(x_i) h^3``.
        """
        pairs = all_pairs(self.config) if pairs is None else np.asarray(pairs, dtype=int).reshape(-1, 2)
        h3 = self.grid.voxel_volume
        return -h3 * (self.detector_green[:, pairs[:, 1]].T * self.incident[:, pairs[:, 0]].T)

    def jacobian_matvec(self, x):
        """``J x`` reshaped as an ``(N_d, N_t)`` matrix, without forming ``J``."""
        h3 = self.grid.voxel_volume
        return -h3 * self.detector_green.T @ (np.asarray(x)[:, None] * self.incident)

    def jacobian_rmatvec(self, y):
        """``J^H y`` for ``y`` of shape ``(N_d, N_t)``."""
        h3 = self.grid.voxel_volume
        Gc = self.detector_green.conj()
        Uc = self.incident.conj()
        return -h3 * np.einsum("in,im,nm->i", Gc, Uc, np.asarray(y), optimize=True)


def multistatic(medium_background, delta_mu, config, method="auto"):
    """Exact multi-static scattered-data matrix for ``mu0 + delta_mu``."""
    return ForwardModel(medium_background, config).scattered(delta_mu, method=method)


def born_jacobian(medium_background, config, grid=None, pairs=None):
    """Born-linearized operator of :func:`multistatic` about the background."""
    if grid is not None and grid != medium_background.grid:
        raise InvalidArgument("grid does not match the medium")
    return ForwardModel(medium_background, config).jacobian(pairs)


def lippman_schwinger_residual(u, u0, delta_mu, green_table, voxel_volume, support=None):
    """Relative residual of the integral form ``u - u0 = -sum_i G0(., x_i) dmu_i u(x_i) h^3``.

    ``green_table`` holds the columns ``G0(., x_i)``: either all ``N`` of them or
    only those listed in ``support``.
    """
    dm = delta_mu.values if isinstance(delta_mu, DeltaMuVolume) else np.asarray(delta_mu, float)
    u = np.asarray(u)
    u0 = np.asarray(u0)
    G = np.asarray(green_table)
    if support is None:
        support = np.arange(dm.size) if G.shape[1] == dm.size else np.flatnonzero(dm)
    support = np.asarray(support, dtype=int)
    if G.shape[1] != support.size:
        raise InvalidArgument("green table columns do not match the support")
    r = (u - u0) + G @ (dm[support] * u[support] * voxel_volume)
    return float(np.linalg.norm(r) / np.linalg.norm(u0))
