"""Network-level certificate assembly.

The per-subsystem supply-rate blocks are arranged, weighted by mu, into one
symmetric matrix X_cmp; the single inequality

    [M; I]^T X_cmp [M; I]  <=  0

then certifies that the weighted sum of subsystem storage functions is a
simulation function for the coupled network, and the subsystem constants
aggregate in closed form.  For networks whose blocks are identical scalar
multiples of the identity, a Gershgorin row-sum bound certifies the
inequality without an eigensolve, independently of the network size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .certificates import SstfConstants, StorageCertificate, psd_tolerance, _max_eig
from .errors import (
    DimensionMismatch,
    NonLinearRho,
    NonQuadraticAlpha,
    StructureMismatch,
    WeightNotPositive,
)
from .model import as_matrix, as_vector

CONDITION_NETWORK_LMI = "Con_1a"
CONDITION_COUPLING_EQ = "Con_2a"
CONDITION_ABSTRACT_WELL_POSED = "Con111"


@dataclass(frozen=True)
class LmiCheck:
    ok: bool
    margin: float  # largest eigenvalue of [M; I]^T X_cmp [M; I]
    tol: float


@dataclass(frozen=True)
class GershgorinCheck:
    ok: bool  # False means inconclusive, not violated
    bound: float
    row_sum: float


@dataclass(frozen=True)
class NetworkSsf:
    """Aggregated simulation-function constants for the coupled network."""

    alpha_mode: str  # "general" | "stacked"
    alpha_coeff: float
    kappa: float
    rho_ext_slope: float
    psi: float

    def alpha(self, s: float) -> float:
        return self.alpha_coeff * s * s

    def to_dict(self) -> dict:
        return {
            "alpha_mode": self.alpha_mode,
            "alpha_coeff": self.alpha_coeff,
            "kappa": self.kappa,
            "rho_ext_slope": self.rho_ext_slope,
            "psi": self.psi,
        }


@dataclass(eq=False)
class CompositionResult:
    x_cmp: np.ndarray
    lmi_margin: float  # minimum eigenvalue of -[M; I]^T X_cmp [M; I]
    ssf: NetworkSsf
    q_tilde: int

    def to_dict(self, include_matrix: bool = True) -> dict:
        out = {
            "lmi_margin": self.lmi_margin,
            "q_tilde": self.q_tilde,
            "ssf": self.ssf.to_dict(),
            "x_cmp_shape": list(self.x_cmp.shape),
        }
        if include_matrix:
            out["x_cmp"] = self.x_cmp.tolist()
        return out


def build_x_cmp(certs: list[StorageCertificate], mu) -> np.ndarray:
    """Arrange the weighted supply-rate blocks into the network matrix.

    The (1,1) super-block is blkdiag(mu_i Xbar11_i), the (1,2) super-block
    blkdiag(mu_i Xbar12_i), and symmetrically for the rest; total size is
    sum(p_i) + sum(q2_i).
    """
    mu = as_vector(mu)
    if len(certs) != mu.size or len(certs) == 0:
        raise DimensionMismatch("mu", "one positive weight per certificate")
    for i, w in enumerate(mu):
        if not w > 0:
            raise WeightNotPositive(i)
    p_dims = [c.Xbar11.shape[0] for c in certs]
    q_dims = [c.Xbar22.shape[0] for c in certs]
    p_tot, q_tot = sum(p_dims), sum(q_dims)
    x = np.zeros((p_tot + q_tot, p_tot + q_tot))
    p_off = np.concatenate(([0], np.cumsum(p_dims)))
    q_off = np.concatenate(([0], np.cumsum(q_dims)))
    for i, (c, w) in enumerate(zip(certs, mu)):
        rp = slice(p_off[i], p_off[i + 1])
        rq = slice(p_tot + q_off[i], p_tot + q_off[i + 1])
        x[rp, rp] = w * c.Xbar11
        x[rp, rq] = w * c.Xbar12
        x[rq, rp] = w * c.Xbar21
        x[rq, rq] = w * c.Xbar22
    return x


def check_compositional_lmi(M, x_cmp) -> LmiCheck:
    """Verify [M; I]^T X_cmp [M; I] <= 0; the margin is its largest eigenvalue."""
    M = as_matrix(M)
    x_cmp = as_matrix(x_cmp)
    q = M.shape[1]
    if x_cmp.shape != (M.shape[0] + q, M.shape[0] + q):
        raise DimensionMismatch(
            "x_cmp", f"expected {(M.shape[0] + q,) * 2}, got {x_cmp.shape}"
        )
    stacked = np.vstack([M, np.eye(q)])
    quad = stacked.T @ x_cmp @ stacked
    quad = 0.5 * (quad + quad.T)
    tol = psd_tolerance(quad)
    margin = _max_eig(quad)
    return LmiCheck(ok=margin <= tol, margin=margin, tol=tol)


def scalar_block_params(certs: list[StorageCertificate], mu) -> tuple[float, float]:
    """Extract (a, d) when every weighted block pair is (a I, d I) with zero coupling.

    Raises StructureMismatch when the blocks are not in that shared scalar form.
    """
    mu = as_vector(mu)
    if len(certs) != mu.size or not certs:
        raise DimensionMismatch("mu", "one weight per certificate")
    a = d = None
    for c, w in zip(certs, mu):
        p, q = c.Xbar11.shape[0], c.Xbar22.shape[0]
        if p == 0 or q == 0:
            raise StructureMismatch("scalar fast path needs nonempty internal blocks")
        if np.any(c.Xbar12) or np.any(c.Xbar21):
            raise StructureMismatch("off-diagonal supply-rate blocks must be zero")
        a0, d0 = c.Xbar11[0, 0], c.Xbar22[0, 0]
        if np.any(c.Xbar11 != a0 * np.eye(p)) or np.any(c.Xbar22 != d0 * np.eye(q)):
            raise StructureMismatch("blocks must be scalar multiples of the identity")
        ai, di = w * a0, w * d0
        if a is None:
            a, d = ai, di
        elif ai != a or di != d:
            raise StructureMismatch("all subsystems must share identical weighted blocks")
    return float(a), float(d)


def gershgorin_fast_check(M, a: float, d: float) -> GershgorinCheck:
    """Row-sum certificate for a M^T M + d I <= 0; False means inconclusive.

    r = max_i sum_j |M_ij| bounds ||M||, so a r^2 + d <= 0 suffices when
    a >= 0 (for a < 0 the d term alone is binding).
    """
    M = as_matrix(M)
    r = float(np.max(np.sum(np.abs(M), axis=1))) if M.size else 0.0
    bound = a * r * r + d if a >= 0 else d
    tol = 1e-12 * (1.0 + abs(a) * r * r + abs(d))
    return GershgorinCheck(ok=bound <= tol, bound=bound, row_sum=r)


def compose_ssf(
    constants: list[SstfConstants],
    mu,
    mode: str = "general",
    output_maps: list[np.ndarray] | None = None,
) -> NetworkSsf:
    """Aggregate verified per-subsystem constants into network constants.

    kappa is the exact maximum of the subsystem kappas; psi the weighted sum;
    the external gain slope is the Euclidean norm of the weighted subsystem
    slopes (the linear maximum over a sphere in closed form).  The quadratic
    alpha aggregates in one of two modes:

      * "general":  alpha(s) = s^2 / sum_i 1/(a_i mu_i), the closed-form
        inverse of the worst-case split over the weighted simplex -- valid
        for any quadratic subsystem alphas;
      * "stacked":  alpha(s) = min_i(mu_i a_i) s^2, enabled only when every
        external output map is square and nonsingular so the summed storage
        function is itself a quadratic in the stacked output error.

    Stacked mode requires `output_maps` (the C1 matrices) for that gate.
    """
    mu = as_vector(mu)
    n = len(constants)
    if n == 0 or mu.size != n:
        raise DimensionMismatch("mu", "one weight per subsystem")
    for i, w in enumerate(mu):
        if not w > 0:
            raise WeightNotPositive(i)
    for c in constants:
        if not (np.isfinite(c.rho_ext_slope) and c.rho_ext_slope >= 0):
            raise NonLinearRho(f"subsystem gain slope {c.rho_ext_slope!r} is not a valid linear gain")
        if not (np.isfinite(c.alpha_coeff) and c.alpha_coeff > 0):
            raise NonQuadraticAlpha(f"subsystem alpha coefficient {c.alpha_coeff!r} is not quadratic-positive")

    kappa = max(c.kappa for c in constants)
    psi = math.fsum(w * c.psi for w, c in zip(mu, constants))
    slope = math.sqrt(math.fsum((w * c.rho_ext_slope) ** 2 for w, c in zip(mu, constants)))

    if mode == "general":
        alpha_coeff = 1.0 / math.fsum(1.0 / (c.alpha_coeff * w) for w, c in zip(mu, constants))
    elif mode == "stacked":
        if output_maps is None:
            raise StructureMismatch("stacked mode needs the external output maps to validate")
        for i, c1 in enumerate(output_maps):
            c1 = as_matrix(c1)
            if c1.shape[0] != c1.shape[1] or np.linalg.matrix_rank(c1) < c1.shape[0]:
                raise StructureMismatch(
                    f"stacked mode needs square nonsingular output maps (subsystem {i})"
                )
        alpha_coeff = min(w * c.alpha_coeff for w, c in zip(mu, constants))
    else:
        raise ValueError(f"unknown alpha aggregation mode {mode!r}")

    return NetworkSsf(alpha_mode=mode, alpha_coeff=float(alpha_coeff),
                      kappa=float(kappa), rho_ext_slope=float(slope),
                      psi=float(psi))
