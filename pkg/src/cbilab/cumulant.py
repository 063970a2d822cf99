"""Cumulant flow, extinction envelopes, and the moment semigroup.

The transition law of the branching process is characterized by its
log-Laplace (cumulant) flow v(t, lam), the solution of

    dv_i/dt = -phi_i(v),   v(0) = lam,

so everything analytic downstream reduces to integrating this system
accurately: Laplace transforms, extinction-probability envelopes
(vbar = lim of v as lam -> infinity), and the first-moment semigroup
pi_t = exp(t(-diag(b) + gamma)).

The integrator is a hand-rolled adaptive Dormand-Prince 5(4) pair.  We
need (i) positivity clamping (the flow lives on the nonnegative orthant
and phi is only defined there), (ii) strict relative error control on
values that decay through many orders of magnitude, and (iii) exact
landing on requested output times; keeping the stepper local makes those
three behaviours explicit and testable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from .errors import BlowUpError, GreyConditionError, NumericError, ValidationError
from .mechanism import (
    BranchingMechanism,
    ImmigrationMechanism,
    ScalarMechanism,
    beta_star,
    dominating_mechanism,
    eval_phi,
    eval_psi,
    gamma_matrix,
    grey_condition,
    mass_vector,
    phi_star_tail_integral,
)

__all__ = [
    "CumulantPath",
    "MomentMatrix",
    "solve_cumulant",
    "solve_scalar_cumulant",
    "closed_form_quadratic",
    "discount_integral",
    "vbar_scalar",
    "vbar_vector",
    "moment_semigroup",
    "integrated_moment_matrix",
    "mean_vector",
    "stationary_mean",
    "tail_immigrant_mass",
]


def discount_integral(rate: float, t) -> float:
    """int_0^t e^{-rate*s} ds, with the rate=0 limit handled exactly.

    Evaluates to (1 - e^{-rate*t})/rate for rate != 0 and to t at rate=0;
    uses expm1 so small |rate*t| keeps full precision.
    """
    t = np.asarray(t, dtype=float)
    if rate == 0.0:
        out = t.copy()
    else:
        out = -np.expm1(-rate * t) / rate
    return out if out.ndim else float(out)


def closed_form_quadratic(b_star: float, c_star: float, lam, t):
    """Cumulant of the scalar quadratic mechanism phi(z) = b z + c z^2.

    v(t) = e^{-b t} lam / (1 + c q(b,t) lam) with q(b,t) = int_0^t e^{-bs} ds.
    Broadcasts over lam and t; scalar in, scalar out.
    """
    if c_star < 0:
        raise ValidationError(f"quadratic coefficient must be >= 0, got {c_star}")
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValidationError("cumulant argument lam must be >= 0")
    t = np.asarray(t, dtype=float)
    q = discount_integral(b_star, t)
    out = np.exp(-b_star * t) * lam / (1.0 + c_star * q * lam)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# adaptive Dormand-Prince 5(4) stepper
# ---------------------------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
# fifth-order weights coincide with the last tableau row (FSAL)
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])

_MAX_STEPS = 1_000_000


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _initial_step(f, y0, f0, t_end, rtol, atol):
    """Standard two-probe starting-step heuristic, capped at the horizon."""
    scale = atol + rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = f(y1)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, t_end)


def _integrate(f, y0, t_end, rtol, atol, t_record, ceiling):
    """Integrate y' = f(y) from 0 to t_end, recording y at t_record exactly.

    f must accept (and internally clamp) slightly-negative stage values.
    Returns (values at t_record, accepted steps, rejected steps).
    """
    y = np.array(y0, dtype=float)
    n = y.size
    out = np.empty((len(t_record), n))
    idx = 0
    if t_record[0] == 0.0:
        out[0] = y
        idx = 1
    if t_end == 0.0:
        return out, 0, 0
    k = np.empty((7, n))
    k[0] = f(y)
    h = _initial_step(f, y, k[0], t_end, rtol, atol)
    t = 0.0
    n_acc = n_rej = 0
    while t < t_end:
        if n_acc + n_rej > _MAX_STEPS:
            raise NumericError(f"cumulant integration exceeded {_MAX_STEPS} steps at t={t:.6g}")
        h = min(h, t_end - t)
        # land exactly on the next requested output time
        hit_record = idx < len(t_record) and t + h >= t_record[idx] - 1e-15 * max(1.0, t_record[idx])
        if hit_record:
            h = t_record[idx] - t
        if h <= 1e-14 * max(1.0, t):
            raise NumericError(f"step size underflow at t={t:.6g}")
        for s in range(1, 7):
            y_stage = y + h * (k[:s].T @ np.asarray(_DP_A[s]))
            k[s] = f(y_stage)
        y5 = y + h * (k.T @ _DP_B5)
        y4 = y + h * (k.T @ _DP_B4)
        scale = atol + rtol * np.maximum(np.abs(y), np.maximum(np.abs(y5), np.abs(y4)))
        err = _rms((y5 - y4) / scale)
        if err <= 1.0:
            t = t + h
            y_new = np.maximum(y5, 0.0)  # positivity clamp: the flow is invariant on the orthant
            if np.any(np.abs(y_new) > ceiling):
                raise BlowUpError(f"cumulant flow exceeded ceiling {ceiling:g} at t={t:.6g}")
            if np.array_equal(y_new, y5):
                k[0] = k[6]  # first-same-as-last: reuse the final stage
            else:
                k[0] = f(y_new)
            y = y_new
            if hit_record:
                out[idx] = y
                idx += 1
            n_acc += 1
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        else:
            n_rej += 1
            factor = max(0.2, 0.9 * err ** -0.2)
        h = h * factor
    if idx != len(t_record):
        raise NumericError("integration finished without hitting all output times")
    return out, n_acc, n_rej


# ---------------------------------------------------------------------------
# cumulant paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CumulantPath:
    """Solution of the cumulant system on a time grid.

    Fields:
        t_grid: increasing times, starting at 0.
        v_values: (len(t_grid), d) nonnegative cumulant values; v_values[0] = lambda0.
        lambda0: initial condition.
        tol: relative tolerance the solver ran at.
        imm_integral: optional accumulated int_0^t psi(v(s)) ds per grid time.
    """

    t_grid: np.ndarray
    v_values: np.ndarray
    lambda0: np.ndarray
    tol: float
    imm_integral: Optional[np.ndarray] = None
    n_steps: int = 0
    n_rejected: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.v_values[-1]

    def to_csv(self, path) -> None:
        """Write the path as CSV with columns t, v_1, ..., v_d."""
        d = self.v_values.shape[1]
        header = "t," + ",".join(f"v_{i + 1}" for i in range(d))
        np.savetxt(path, np.column_stack([self.t_grid, self.v_values]),
                   delimiter=",", header=header, comments="")


def _record_times(t_end: float, t_eval) -> np.ndarray:
    if t_eval is None:
        grid = np.array([0.0, t_end]) if t_end > 0 else np.array([0.0])
    else:
        grid = np.atleast_1d(np.asarray(t_eval, dtype=float))
        if np.any(np.diff(grid) <= 0):
            raise ValidationError("t_eval must be strictly increasing")
        if grid[0] < 0 or grid[-1] > t_end + 1e-12:
            raise ValidationError("t_eval must lie inside [0, t_end]")
        if grid[0] != 0.0:
            grid = np.concatenate([[0.0], grid])
        if grid[-1] < t_end:
            grid = np.concatenate([grid, [t_end]])
    return grid


def solve_cumulant(
    mech: BranchingMechanism,
    lambda0,
    t_end: float,
    tol: float = 1e-10,
    *,
    t_eval=None,
    imm: Optional[ImmigrationMechanism] = None,
    ceiling: float = 1e12,
) -> CumulantPath:
    """Integrate dv/dt = -phi(v) from v(0) = lambda0 up to t_end.

    Args:
        mech: branching mechanism (fold any motion first).
        lambda0: nonnegative initial vector.
        t_end: horizon, >= 0.
        tol: relative local error target per step.
        t_eval: optional increasing output times in [0, t_end]; the stepper
            lands on them exactly (no interpolation).
        imm: when given, co-integrate int_0^t psi(v(s)) ds and expose it as
            imm_integral on the returned path.
        ceiling: abort threshold for blow-up detection.

    Returns:
        CumulantPath over t_eval (plus 0 and t_end) or just {0, t_end}.
    """
    lam0 = mass_vector(lambda0, d=mech.d)
    if t_end < 0:
        raise ValidationError(f"t_end must be >= 0, got {t_end}")
    if not tol > 0:
        raise ValidationError(f"tol must be > 0, got {tol}")
    if imm is not None and imm.d != mech.d:
        raise ValidationError(f"immigration dimension {imm.d} != mechanism dimension {mech.d}")
    grid = _record_times(float(t_end), t_eval)
    atol = tol * 1e-6 + 1e-300  # tiny absolute floor; control is effectively relative
    d = mech.d

    if imm is None:
        def rhs(y):
            return -eval_phi(mech, np.maximum(y, 0.0))

        vals, n_acc, n_rej = _integrate(rhs, lam0, float(t_end), tol, atol, grid, ceiling)
        return CumulantPath(grid, vals, lam0, tol, None, n_acc, n_rej)

    def rhs_aug(y):
        v = np.maximum(y[:d], 0.0)
        out = np.empty(d + 1)
        out[:d] = -eval_phi(mech, v)
        out[d] = eval_psi(imm, v)
        return out

    y0 = np.concatenate([lam0, [0.0]])
    vals, n_acc, n_rej = _integrate(rhs_aug, y0, float(t_end), tol, atol, grid, ceiling)
    return CumulantPath(grid, vals[:, :d], lam0, tol, vals[:, d], n_acc, n_rej)


def solve_scalar_cumulant(
    phi_star: ScalarMechanism,
    lambda0: float,
    t_end: float,
    tol: float = 1e-10,
    *,
    t_eval=None,
    ceiling: float = 1e12,
) -> CumulantPath:
    """Integrate the scalar dominating flow dv/dt = -phi_*(v)."""
    if lambda0 < 0:
        raise ValidationError(f"lambda0 must be >= 0, got {lambda0}")
    if t_end < 0:
        raise ValidationError(f"t_end must be >= 0, got {t_end}")
    grid = _record_times(float(t_end), t_eval)
    atol = tol * 1e-6 + 1e-300

    def rhs(y):
        return -np.atleast_1d(phi_star(np.maximum(y, 0.0)))

    lam0 = np.array([float(lambda0)])
    vals, n_acc, n_rej = _integrate(rhs, lam0, float(t_end), tol, atol, grid, ceiling)
    return CumulantPath(grid, vals, lam0, tol, None, n_acc, n_rej)


# ---------------------------------------------------------------------------
# extinction envelopes
# ---------------------------------------------------------------------------


def _positive_threshold(phi_star: ScalarMechanism) -> float:
    """Largest root of phi_*(z) = 0; the tail integral only exists above it."""
    if phi_star.b_star >= 0:
        return 0.0
    z = 1.0
    for _ in range(200):
        if phi_star(z) > 0:
            break
        z *= 2.0
    else:
        raise NumericError("could not find where the dominating mechanism turns positive")
    lo = 1e-12
    if phi_star(lo) > 0:  # negative drift but jumps dominate immediately
        return 0.0
    return float(brentq(phi_star, lo, z, xtol=1e-15, rtol=1e-14))


def vbar_scalar(phi_star: ScalarMechanism, t: float) -> float:
    """Limit of the scalar cumulant as the initial value tends to infinity.

    Computed by root-finding x in  int_x^inf dz / phi_*(z) = t,  and for
    purely quadratic mechanisms cross-checked against the exact
    e^{-b t} / (c q(b,t)); the two routes must agree to 1e-8 relative.

    Raises:
        GreyConditionError: the tail integral diverges (envelope infinite).
        NumericError: the two evaluation routes disagree.
    """
    if not t > 0:
        raise ValidationError(f"vbar needs t > 0, got {t}")
    if not grey_condition(phi_star):
        raise GreyConditionError(
            "extinction envelope is infinite: the dominating mechanism has no "
            "quadratic or stable part, so int dz/phi_*(z) diverges at infinity"
        )
    thr = _positive_threshold(phi_star)

    def gap(x):
        return phi_star_tail_integral(phi_star, x) - t

    # bracket the root: gap decreases from +inf (near thr) to -t (x -> inf)
    hi = max(1.0, 2.0 * thr + 1.0)
    for _ in range(200):
        if gap(hi) < 0:
            break
        hi *= 2.0
    else:
        raise NumericError("vbar bracketing failed: tail integral stays above t")
    lo = 0.5 * (thr + hi)
    for _ in range(200):
        if gap(lo) > 0:
            break
        lo = 0.5 * (thr + lo)
    else:
        raise NumericError("vbar bracketing failed near the positivity threshold")
    root = float(brentq(gap, lo, hi, xtol=1e-14, rtol=1e-12))

    if phi_star.c_star > 0 and not phi_star.m_star:
        exact = math.exp(-phi_star.b_star * t) / (
            phi_star.c_star * discount_integral(phi_star.b_star, t)
        )
        if abs(root - exact) > 1e-8 * abs(exact):
            raise NumericError(
                f"vbar cross-check failed: root-finding gives {root!r}, "
                f"closed form gives {exact!r}"
            )
        return exact
    return root


def vbar_vector(mech: BranchingMechanism, t: float, tol: float = 1e-8) -> np.ndarray:
    """Componentwise extinction envelope: limit of v(t, L*(1,..,1)) as L grows.

    Runs the cumulant flow over the geometric ladder L in {10, 100, ...},
    stopping when successive values differ by less than tol.  Every iterate
    is certified against the scalar envelope of the dominating mechanism
    (the flow started from any L is bounded by the scalar flow started at
    its sup-norm, hence by the scalar envelope).

    Raises:
        GreyConditionError: dominating mechanism fails the tail-integrability test.
        NumericError: ladder exhausted without stabilizing, or certificate violated.
    """
    if not t > 0:
        raise ValidationError(f"vbar needs t > 0, got {t}")
    phi_star = dominating_mechanism(mech)
    cap = vbar_scalar(phi_star, t)  # raises GreyConditionError when infinite
    ode_tol = min(tol * 1e-2, 1e-10)
    prev = None
    ones = np.ones(mech.d)
    ladder = 10.0 ** np.arange(1, 13)
    for lam in ladder:
        v = solve_cumulant(mech, lam * ones, t, ode_tol).final
        if np.any(v > cap * (1.0 + 1e-6) + tol):
            raise NumericError(
                f"envelope certificate violated at ladder value {lam:g}: "
                f"{v} exceeds scalar envelope {cap:.12g}"
            )
        if prev is not None and float(np.max(np.abs(v - prev))) < tol:
            return v
        prev = v
    raise NumericError(f"extinction envelope ladder failed to stabilize within tol={tol:g}")


# ---------------------------------------------------------------------------
# moment semigroup and mean flows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentMatrix:
    """First-moment semigroup at a fixed time: mean of X_t(f) from X_0=mu is <mu, P f>."""

    t: float
    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)


def _mean_matrix(mech: BranchingMechanism) -> np.ndarray:
    """Generator of the mean flow: M = -diag(b) + gamma."""
    return -np.diag(mech.b) + gamma_matrix(mech)


def moment_semigroup(mech: BranchingMechanism, t: float) -> MomentMatrix:
    """First-moment semigroup exp(tM), M = -diag(b) + gamma."""
    if t < 0:
        raise ValidationError(f"moment semigroup needs t >= 0, got {t}")
    return MomentMatrix(t=float(t), P=expm(float(t) * _mean_matrix(mech)))


def integrated_moment_matrix(mech: BranchingMechanism, t: float) -> np.ndarray:
    """int_0^t exp(sM) ds via the block-triangular matrix exponential.

    exp(t [[M, I], [0, 0]]) has the integral in its upper-right block; this
    avoids special-casing singular M (e.g. critical mechanisms).
    """
    if t < 0:
        raise ValidationError(f"integrated semigroup needs t >= 0, got {t}")
    d = mech.d
    M = _mean_matrix(mech)
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = M
    block[:d, d:] = np.eye(d)
    return expm(float(t) * block)[:d, d:]


def mean_vector(
    mech: BranchingMechanism,
    mu,
    t: float,
    imm: Optional[ImmigrationMechanism] = None,
) -> np.ndarray:
    """Exact mean of the state at time t from initial mass mu.

    E[X_t] = pi_t^T mu, plus the accumulated immigration mean
    (int_0^t pi_s ds)^T (beta + first moment of nu) when imm is given.
    """
    mu = mass_vector(mu, d=mech.d)
    out = moment_semigroup(mech, t).P.T @ mu
    if imm is not None:
        influx = imm.beta + imm.first_moment()
        out = out + integrated_moment_matrix(mech, t).T @ influx
    return out


def stationary_mean(mech: BranchingMechanism, imm: ImmigrationMechanism) -> np.ndarray:
    """Mean of the stationary law: (-M^T)^{-1}(beta + first moment of nu).

    Requires a strictly positive uniform decay rate so the mean integral
    int_0^inf pi_s ds converges.
    """
    bs = beta_star(mech)
    if bs <= 0:
        raise ValidationError(f"stationary mean needs beta_star > 0, got {bs:.6g}")
    influx = imm.beta + imm.first_moment()
    return np.linalg.solve(-_mean_matrix(mech).T, influx)


def tail_immigrant_mass(mech: BranchingMechanism, imm: ImmigrationMechanism, t: float) -> float:
    """int_t^inf <beta + nu-mean, pi_s 1> ds, the expected surviving mass of
    all immigration arriving after time lag t.

    Uses int_t^inf e^{sM} ds = e^{tM} (-M)^{-1}, valid when beta_star > 0.
    """
    bs = beta_star(mech)
    if bs <= 0:
        raise ValidationError(f"tail mass integral needs beta_star > 0, got {bs:.6g}")
    if t < 0:
        raise ValidationError(f"needs t >= 0, got {t}")
    M = _mean_matrix(mech)
    influx = imm.beta + imm.first_moment()
    tail = expm(float(t) * M) @ np.linalg.solve(-M, np.ones(mech.d))
    return float(influx @ tail)
