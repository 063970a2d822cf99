"""Samplers for transition, immigration, and stationary laws.

Exact paths exist where the law has a closed form:

  * quadratic scalar branching: the transition law started from x is an atom
    at 0 plus a compound Poisson of exponentials — with a = e^{-b t} and
    theta = c int_0^t e^{-bs} ds, draw K ~ Poisson(x a / theta) and return a
    Gamma(K, theta) variable.  (Identity behind it: x v(t,lam) equals
    (x a/theta)(1 - 1/(1 + theta lam)), checked in the tests.)
  * continuous immigration into a quadratic scalar mechanism: the time-t
    immigration mass is Gamma(beta/c, c int_0^t e^{-bs} ds) exactly, because
    int_0^t beta v(s,lam) ds = (beta/c) log(1 + c q(b,t) lam).
  * jump immigrants into a scalar quadratic mechanism: Poisson arrivals on
    [0,t], each evolved over its remaining time by the exact sampler above.

Everything else runs a symmetric (Strang) operator-split step: half-step of
exact per-type quadratic branching, a middle first-order block carrying
inter-type drift, compensators, compound-Poisson jumps above the mass
threshold, compensated stable increments, and immigration influx, then the
second branching half-step.  Jumps below the threshold enter the middle
block as drift through their means; stable jump parts are never truncated —
their compensated one-step increment (X_i a dt)^{1/(1+alpha)} Z is sampled
exactly with a Chambers–Mallows–Stuck draw of the spectrally positive
stable variable Z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .cumulant import discount_integral
from .errors import BlowUpError, ValidationError
from .mechanism import (
    BranchingMechanism,
    ExponentialAxis,
    ImmigrationMechanism,
    PointMass,
    StableAxis,
    beta_star,
    mass_vector,
    stable_constant,
)

__all__ = [
    "SimConfig",
    "sample_cb_quadratic",
    "sample_transition",
    "sample_immigration",
    "sample_cbi_transition",
    "sample_stationary",
    "worker_rngs",
    "save_samples_csv",
]


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo configuration.

    Fields:
        n_samples: batch size (every sampler returns (n_samples, d)).
        dt: operator-splitting step for mechanisms without an exact path.
        jump_threshold: jumps of total mass <= this are folded into drift.
        seed: stream seed recorded for reproducibility (samplers take an
            explicit Generator; the seed is what report metadata captures).
        ceiling: per-coordinate mass cap checked by the stepped integrators;
            exceeding it aborts with BlowUpError (exact samplers draw from
            the true law and need no runaway trap).
    """

    n_samples: int
    dt: float = 1e-3
    jump_threshold: float = 1e-3
    seed: Optional[int] = None
    ceiling: float = 1e12

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError(f"n_samples must be >= 1, got {self.n_samples}")
        if not self.dt > 0:
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if self.jump_threshold < 0:
            raise ValidationError(f"jump_threshold must be >= 0, got {self.jump_threshold}")
        if not self.ceiling > 0:
            raise ValidationError(f"ceiling must be > 0, got {self.ceiling}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def worker_rngs(seed, n_workers: int):
    """Independent, reproducible per-worker generators from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_workers)]


def save_samples_csv(path, samples: np.ndarray) -> None:
    """Write a sample batch as CSV, one row per sample, d columns."""
    samples = np.atleast_2d(samples)
    header = ",".join(f"x_{i + 1}" for i in range(samples.shape[1]))
    np.savetxt(path, samples, delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# exact scalar quadratic sampler
# ---------------------------------------------------------------------------


def _cb_quadratic_batch(x: np.ndarray, b: float, c: float, t, rng) -> np.ndarray:
    """Exact transition draw per entry of x; t may be scalar or per-entry."""
    t = np.asarray(t, dtype=float)
    a = np.exp(-b * t)
    if c == 0.0:
        # no branching noise: deterministic exponential decay
        return x * a
    theta = c * discount_integral(b, t)
    theta_safe = np.where(theta > 0, theta, 1.0)
    mean_counts = np.where(theta > 0, x * a / theta_safe, 0.0)
    out = rng.gamma(shape=rng.poisson(mean_counts), scale=theta_safe)
    if np.any(t <= 0):
        out = np.where(t > 0, out, x)
    return out


def sample_cb_quadratic(x: float, b: float, c: float, t: float, rng) -> float:
    """One exact draw from the scalar quadratic transition law started at x."""
    if x < 0:
        raise ValidationError(f"initial mass must be >= 0, got {x}")
    if c < 0:
        raise ValidationError(f"branching coefficient c must be >= 0, got {c}")
    if t < 0:
        raise ValidationError(f"time must be >= 0, got {t}")
    return float(_cb_quadratic_batch(np.asarray([float(x)]), b, c, float(t), rng)[0])


# ---------------------------------------------------------------------------
# spectrally positive stable increments
# ---------------------------------------------------------------------------


def _stable_positive_batch(alpha: float, n: int, rng) -> np.ndarray:
    """Zero-mean spectrally positive (1+alpha)-stable draws, normalized so
    that E[e^{-lam Z}] = exp(stable_constant(alpha) * lam^{1+alpha}).

    Chambers–Mallows–Stuck with skewness 1; the index 1+alpha lies in (1,2)
    so the mean exists and is zero.
    """
    ap = 1.0 + alpha
    ta = math.tan(0.5 * math.pi * ap)
    B = math.atan(ta) / ap
    S = (1.0 + ta * ta) ** (0.5 / ap)
    U = rng.uniform(-0.5 * math.pi, 0.5 * math.pi, size=n)
    W = rng.standard_exponential(size=n)
    Z = (
        S
        * np.sin(ap * (U + B))
        / np.cos(U) ** (1.0 / ap)
        * (np.cos(U - ap * (U + B)) / W) ** ((1.0 - ap) / ap)
    )
    # scale so the Laplace exponent constant matches the jump integral
    sigma = (stable_constant(alpha) * abs(math.cos(0.5 * math.pi * ap))) ** (1.0 / ap)
    return sigma * Z


# ---------------------------------------------------------------------------
# operator-split stepping
# ---------------------------------------------------------------------------


def _step_tables(mech: BranchingMechanism, eps: float):
    """Precompute the middle-block drift matrix and jump draw specs.

    Returns (D, atoms, exps, stables):
        D: (d,d), per-unit-mass drift — row i is the flow created by type i
           (inter-type transfer, folded small-jump means, compensators).
        atoms: (i, rate, u) point-mass jumps above the threshold.
        exps: (i, axis, rate_large, mean, eps) exponential tails above eps.
        stables: (i, alpha, scale) compensated stable parts.
    """
    d = mech.d
    D = mech.eta.copy()
    atoms, exps, stables = [], [], []
    for i in range(d):
        for comp in mech.jumps[i]:
            if isinstance(comp, PointMass):
                D[i, i] -= comp.weight * comp.u[i]  # own-axis compensator
                if float(np.sum(comp.u)) > eps:
                    atoms.append((i, comp.weight, comp.u))
                else:
                    D[i] += comp.weight * comp.u  # folded as its mean
            elif isinstance(comp, ExponentialAxis):
                m, th, r = comp.axis, comp.mean, comp.rate
                if m == i:
                    D[i, i] -= r * th  # own-axis compensator (all sizes)
                surv = math.exp(-eps / th)
                rate_large = r * surv
                if rate_large > 0:
                    # memorylessness: a size conditioned > eps is eps + Exp(mean)
                    exps.append((i, m, rate_large, th, eps))
                D[i, m] += r * (th - (th + eps) * surv)  # mean of folded small sizes
            elif isinstance(comp, StableAxis):
                stables.append((i, comp.alpha, comp.scale))
    return D, atoms, exps, stables


def _nu_tables(imm: ImmigrationMechanism):
    """Immigrant jump specs: finite-activity components of the measure nu."""
    atoms, exps = [], []
    for comp in imm.nu:
        if isinstance(comp, PointMass):
            atoms.append((comp.weight, comp.u))
        elif isinstance(comp, ExponentialAxis):
            exps.append((comp.axis, comp.rate, comp.mean))
    return atoms, exps


def _stepped_batch(
    states: np.ndarray,
    mech: BranchingMechanism,
    imm: Optional[ImmigrationMechanism],
    t: float,
    cfg: SimConfig,
    rng,
) -> np.ndarray:
    """Evolve (n,d) initial states over [0,t] with symmetric splitting."""
    X = np.array(states, dtype=float)
    if t == 0.0:
        return X
    n, d = X.shape
    n_steps = max(1, math.ceil(t / cfg.dt))
    h = t / n_steps
    D, atoms, exps, stables = _step_tables(mech, cfg.jump_threshold)
    drift_flow = expm(h * D)  # exact one-step linear flow of the middle block
    if imm is not None:
        imm_atoms, imm_exps = _nu_tables(imm)
    half = 0.5 * h
    for _ in range(n_steps):
        for i in range(d):
            X[:, i] = _cb_quadratic_batch(X[:, i], mech.b[i], mech.c[i], half, rng)
        if imm is not None:
            # trapezoid arrival placement: half the influx rides this step's
            # drift flow, half lands after it, so an immigrant sees on
            # average half a step of inter-type drift
            X = X + half * imm.beta
            for rate, u in imm_atoms:
                K = rng.poisson(rate * half, size=n)
                X = X + np.outer(K, u)
            for axis, rate, th in imm_exps:
                K = rng.poisson(rate * half, size=n)
                X[:, axis] += rng.gamma(shape=K, scale=th)
        incr = np.zeros_like(X)
        for i, rate, u in atoms:
            K = rng.poisson(X[:, i] * rate * h)
            incr += np.outer(K, u)
        for i, m, rate, th, eps in exps:
            K = rng.poisson(X[:, i] * rate * h)
            incr[:, m] += K * eps + rng.gamma(shape=K, scale=th)
        for i, alpha, scale in stables:
            Z = _stable_positive_batch(alpha, n, rng)
            incr[:, i] += (X[:, i] * scale * h) ** (1.0 / (1.0 + alpha)) * Z
        if imm is not None:
            incr += half * imm.beta
            for rate, u in imm_atoms:
                K = rng.poisson(rate * half, size=n)
                incr += np.outer(K, u)
            for axis, rate, th in imm_exps:
                K = rng.poisson(rate * half, size=n)
                incr[:, axis] += rng.gamma(shape=K, scale=th)
        X = np.maximum(X @ drift_flow + incr, 0.0)
        if np.any(X > cfg.ceiling):
            raise BlowUpError(f"simulated mass exceeded ceiling {cfg.ceiling:g}")
        for i in range(d):
            X[:, i] = _cb_quadratic_batch(X[:, i], mech.b[i], mech.c[i], half, rng)
    return X


def _has_exact_transition(mech: BranchingMechanism) -> bool:
    # no jumps and no inter-type transfer: independent scalar quadratic laws
    return mech.is_quadratic() and not np.any(mech.eta > 0)


def _transition_batch(states: np.ndarray, mech, t, cfg, rng) -> np.ndarray:
    if _has_exact_transition(mech):
        out = np.empty_like(states, dtype=float)
        for i in range(mech.d):
            out[:, i] = _cb_quadratic_batch(states[:, i].astype(float), mech.b[i], mech.c[i], t, rng)
        return out
    return _stepped_batch(states, mech, None, t, cfg, rng)


# ---------------------------------------------------------------------------
# public samplers (batch-first: (n_samples, d) arrays)
# ---------------------------------------------------------------------------


def sample_transition(mu, mech: BranchingMechanism, t: float, cfg: SimConfig, rng) -> np.ndarray:
    """Sample the branching transition law started from the mass vector mu.

    Returns an (n_samples, d) array of independent draws.  mu may also be an
    (n_samples, d) array giving each run its own initial state (the coupling
    constructions need that).  Scalar quadratic mechanisms (and diagonal
    quadratic systems) use the exact sampler; all others take dt-steps of
    the symmetric split scheme.
    """
    if t < 0:
        raise ValidationError(f"time must be >= 0, got {t}")
    mu = np.asarray(mu, dtype=float)
    if mu.ndim == 2:
        if mu.shape != (cfg.n_samples, mech.d):
            raise ValidationError(
                f"per-run initial states must be ({cfg.n_samples}, {mech.d}), got {mu.shape}")
        if np.any(mu < 0) or not np.all(np.isfinite(mu)):
            raise ValidationError("initial states must be finite and >= 0")
        states = mu.copy()
    else:
        states = np.tile(mass_vector(mu, d=mech.d), (cfg.n_samples, 1))
    return _transition_batch(states, mech, float(t), cfg, rng)


def sample_immigration(imm: ImmigrationMechanism, mech: BranchingMechanism,
                       t: float, cfg: SimConfig, rng) -> np.ndarray:
    """Sample the time-t immigration mass (the process started empty).

    Exact for scalar quadratic mechanisms: Gamma(beta/c, c q(b,t)) for the
    continuous part, plus Poisson jump immigrants each evolved exactly over
    its remaining time.  Other mechanisms run the split stepper with the
    immigration influx in the middle block.
    """
    if imm.d != mech.d:
        raise ValidationError(f"immigration dimension {imm.d} != mechanism dimension {mech.d}")
    if t < 0:
        raise ValidationError(f"time must be >= 0, got {t}")
    n = cfg.n_samples
    if t == 0.0 or imm.is_trivial():
        return np.zeros((n, mech.d))
    if mech.d == 1 and mech.is_quadratic():
        b, c = float(mech.b[0]), float(mech.c[0])
        out = np.zeros((n, 1))
        beta = float(imm.beta[0])
        if beta > 0:
            if c > 0:
                out[:, 0] = rng.gamma(shape=beta / c, scale=c * discount_integral(b, t), size=n)
            else:
                out[:, 0] = beta * discount_integral(b, t)  # deterministic influx-decay
        for comp in imm.nu:
            rate = comp.weight if isinstance(comp, PointMass) else comp.rate
            counts = rng.poisson(rate * t, size=n)
            total = int(counts.sum())
            if total == 0:
                continue
            arrive = rng.uniform(0.0, t, size=total)
            if isinstance(comp, PointMass):
                sizes = np.full(total, float(comp.u[0]))
            else:
                sizes = rng.exponential(comp.mean, size=total)
            evolved = _cb_quadratic_batch(sizes, b, c, t - arrive, rng)
            rows = np.repeat(np.arange(n), counts)
            np.add.at(out[:, 0], rows, evolved)
        return out
    states = np.zeros((n, mech.d))
    return _stepped_batch(states, mech, imm, float(t), cfg, rng)


def sample_cbi_transition(mu, imm: ImmigrationMechanism, mech: BranchingMechanism,
                          t: float, cfg: SimConfig, rng) -> np.ndarray:
    """Transition of the process with immigration: independent sum of the
    branching transition from mu and the immigration mass."""
    return sample_transition(mu, mech, t, cfg, rng) + sample_immigration(imm, mech, t, cfg, rng)


def stationary_horizon(mech: BranchingMechanism, bias: float = 1e-3) -> float:
    """Horizon T with e^{-beta* T} <= bias: the mean of mass immigrated after
    lag T is below `bias` relative to the stationary mean."""
    bs = beta_star(mech)
    if bs <= 0:
        raise ValidationError(f"stationary law needs beta_star > 0, got {bs:.6g}")
    return math.log(1.0 / bias) / bs


def sample_stationary(imm: ImmigrationMechanism, mech: BranchingMechanism,
                      cfg: SimConfig, rng, bias: float = 1e-3) -> np.ndarray:
    """Sample the stationary law of the process with immigration.

    Exact for the scalar quadratic mechanism with continuous-only
    immigration: Gamma(beta/c, c/b).  Otherwise the immigration sampler is
    run to a horizon where the missing tail mean is below `bias` relative
    (the scalar-quadratic-with-jumps case stays exact within that horizon).
    """
    bs = beta_star(mech)
    if bs <= 0:
        raise ValidationError(f"stationary law needs beta_star > 0, got {bs:.6g}")
    if imm.d != mech.d:
        raise ValidationError(f"immigration dimension {imm.d} != mechanism dimension {mech.d}")
    n = cfg.n_samples
    if imm.is_trivial():
        return np.zeros((n, mech.d))
    if mech.d == 1 and mech.is_quadratic() and not imm.nu:
        b, c = float(mech.b[0]), float(mech.c[0])
        beta = float(imm.beta[0])
        out = np.zeros((n, 1))
        if c > 0:
            out[:, 0] = rng.gamma(shape=beta / c, scale=c / b, size=n)
        else:
            out[:, 0] = beta / b
        return out
    return sample_immigration(imm, mech, stationary_horizon(mech, bias), cfg, rng)
