"""Probabilistic closeness bounds between network and abstraction outputs.

Given simulation-function constants, the chance that the output mismatch
ever exceeds eps over a finite horizon is bounded by one of two closed
forms, selected by whether alpha(eps) clears psi_hat / kappa:

  case-1 (alpha(eps) >= psi_hat/kappa):
      1 - (1 - v0/alpha(eps)) (1 - psi_hat/alpha(eps))^T
  case-2:
      (v0/alpha(eps)) (1-kappa)^T + (psi_hat/(kappa alpha(eps))) (1 - (1-kappa)^T)

with psi_hat >= rho_ext(sup-norm of the abstract input) + psi.  Both branch
values are always evaluated and reported; the two bounds are distinct at the
regime boundary and no continuity is assumed.  Inverse queries recover the
extremal radius (bisection) or horizon (integer scan) for a target level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import InvalidKappa, NegativeInput, Unachievable

logger = logging.getLogger(__name__)

_BISECT_TOL = 1e-12


@dataclass(frozen=True)
class ViolationResult:
    violation_bound: float
    success_bound: float
    regime: str  # "case-1" | "case-2"
    case1: float
    case2: float
    clamped: bool


@dataclass(frozen=True)
class ClosenessBound:
    epsilon: float
    horizon: int
    psi_hat: float
    v0: float
    regime: str
    violation_bound: float
    success_bound: float

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "horizon": self.horizon,
            "psi_hat": self.psi_hat,
            "v0": self.v0,
            "regime": self.regime,
            "violation_bound": self.violation_bound,
            "success_bound": self.success_bound,
        }


@dataclass(frozen=True)
class EpsilonQuery:
    epsilon: float
    degenerate: bool  # any positive radius already meets the target


@dataclass(frozen=True)
class HorizonQuery:
    horizon: int
    saturated: bool  # the bound never reaches the target; horizon is the scan cap


def psi_hat(rho_ext_slope: float, nu_hat_sup: float, psi: float) -> float:
    """Minimal admissible defect: rho_ext_slope * nu_hat_sup + psi."""
    for name, v in (("rho_ext_slope", rho_ext_slope), ("nu_hat_sup", nu_hat_sup),
                    ("psi", psi)):
        if v < 0:
            raise NegativeInput(name, v)
    return rho_ext_slope * nu_hat_sup + psi


def violation_probability(
    alpha_of_eps: float,
    kappa: float,
    psi_hat: float,
    v0: float,
    horizon: int,
) -> ViolationResult:
    """Upper bound on the probability that the sup output error reaches eps.

    Both closed forms are computed; the regime test alpha(eps) >= psi_hat/kappa
    is strict (ties select case-1).  The selected value is clamped to [0, 1]
    and clamping events are logged.
    """
    if not 0.0 < kappa < 1.0:
        raise InvalidKappa(kappa)
    if alpha_of_eps <= 0:
        raise NegativeInput("alpha_of_eps", alpha_of_eps)
    for name, v in (("psi_hat", psi_hat), ("v0", v0), ("horizon", horizon)):
        if v < 0:
            raise NegativeInput(name, v)
    horizon = int(horizon)

    case1 = 1.0 - (1.0 - v0 / alpha_of_eps) * (1.0 - psi_hat / alpha_of_eps) ** horizon
    decay = (1.0 - kappa) ** horizon
    case2 = (v0 / alpha_of_eps) * decay + (psi_hat / (kappa * alpha_of_eps)) * (1.0 - decay)

    regime = "case-1" if alpha_of_eps >= psi_hat / kappa else "case-2"
    raw = case1 if regime == "case-1" else case2
    clamped = not 0.0 <= raw <= 1.0
    if clamped:
        logger.info("violation bound %.6g clamped to [0, 1]", raw)
    value = min(1.0, max(0.0, raw))
    return ViolationResult(violation_bound=value, success_bound=1.0 - value,
                           regime=regime, case1=case1, case2=case2, clamped=clamped)


def closeness_bound(
    epsilon: float,
    alpha_of_eps: float,
    kappa: float,
    psi_hat: float,
    v0: float,
    horizon: int,
) -> ClosenessBound:
    res = violation_probability(alpha_of_eps, kappa, psi_hat, v0, horizon)
    return ClosenessBound(epsilon=epsilon, horizon=int(horizon), psi_hat=psi_hat,
                          v0=v0, regime=res.regime,
                          violation_bound=res.violation_bound,
                          success_bound=res.success_bound)


def epsilon_for_target(
    target_violation: float,
    alpha_coeff: float,
    kappa: float,
    psi_hat: float,
    v0: float,
    horizon: int,
    eps_max: float | None = None,
) -> EpsilonQuery:
    """Smallest radius whose violation bound meets the target (quadratic alpha).

    Bisection to 1e-12 on eps; the bound is nonincreasing in eps.  Raises
    Unachievable when even the largest admissible radius misses the target.
    """
    if target_violation < 0:
        raise NegativeInput("target_violation", target_violation)
    if alpha_coeff <= 0:
        raise NegativeInput("alpha_coeff", alpha_coeff)

    def value(eps: float) -> float:
        return violation_probability(alpha_coeff * eps * eps, kappa, psi_hat,
                                     v0, horizon).violation_bound

    if psi_hat == 0.0 and v0 == 0.0:
        return EpsilonQuery(epsilon=0.0, degenerate=True)

    if eps_max is not None:
        hi = eps_max
        if value(hi) > target_violation:
            raise Unachievable(
                f"violation bound {value(hi):.6g} at eps={hi!r} exceeds target"
            )
    else:
        hi = 1.0
        while value(hi) > target_violation:
            hi *= 2.0
            if hi > 1e18:
                raise Unachievable("target not reached for any finite radius")
    lo = 0.0
    while hi - lo > _BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if value(mid) <= target_violation:
            hi = mid
        else:
            lo = mid
    return EpsilonQuery(epsilon=hi, degenerate=False)


def horizon_for_target(
    target_violation: float,
    alpha_of_eps: float,
    kappa: float,
    psi_hat: float,
    v0: float,
    max_horizon: int = 10**6,
) -> HorizonQuery:
    """Largest horizon whose violation bound stays within the target.

    Integer search (doubling then bisection) over the nondecreasing bound.
    Raises Unachievable when even a zero-length horizon misses the target.
    """

    def value(t: int) -> float:
        return violation_probability(alpha_of_eps, kappa, psi_hat, v0, t).violation_bound

    if value(0) > target_violation:
        raise Unachievable("initial mismatch alone exceeds the target")
    if value(max_horizon) <= target_violation:
        return HorizonQuery(horizon=max_horizon, saturated=True)
    lo, hi = 0, 1
    while value(hi) <= target_violation:
        lo, hi = hi, min(2 * hi, max_horizon)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if value(mid) <= target_violation:
            lo = mid
        else:
            hi = mid
    return HorizonQuery(horizon=lo, saturated=False)
