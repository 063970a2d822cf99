"""Explicit couplings of transition and stationary laws.

Each construction here is the branching-property trick in some form: split
the initial states by the componentwise Jordan decomposition mu = meet + pos,
nu = meet + neg, evolve the three pieces independently, and recombine as
(shared + pos-part, shared + neg-part).  The marginals are the right
transition laws, the legs agree on the shared piece, and the expected l1
gap between the legs upper-bounds the Wasserstein distance while the
fraction of unequal rows upper-bounds half the total-variation distance.

Immigration variants add one shared immigration draw to both legs (zero
extra cost by construction).  The stationary couplings use the flow
decomposition of the stationary law: a stationary state is an independent
sum of the time-t immigration mass and a time-t evolution of a stationary
state, so pairing a fresh immigration draw with that decomposition couples
the time-t law with its limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .mechanism import BranchingMechanism, ImmigrationMechanism, mass_vector
from .simulate import (
    SimConfig,
    sample_immigration,
    sample_stationary,
    sample_transition,
)

__all__ = [
    "CoupledPair",
    "jordan_decompose",
    "couple_transitions",
    "couple_cbi",
    "couple_stationary",
    "couple_cbi_to_stationary",
]


@dataclass(frozen=True)
class CoupledPair:
    """A batch of coupled draws: row k of left and right is one coupled pair.

    cost() is the Monte Carlo coupling cost E||left - right||_1 — an upper
    estimate of the Wasserstein distance between the marginal laws.
    differ() is the fraction of rows whose legs are not identical; twice it
    upper-estimates the total-variation distance (in the [0,2] convention).
    """

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = np.atleast_2d(np.asarray(self.left, dtype=float))
        right = np.atleast_2d(np.asarray(self.right, dtype=float))
        if left.shape != right.shape:
            raise ValidationError(f"leg shapes differ: {left.shape} vs {right.shape}")
        if np.any(left < 0) or np.any(right < 0):
            raise ValidationError("coupled states must be >= 0")
        left.setflags(write=False)
        right.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def n(self) -> int:
        return self.left.shape[0]

    @property
    def d(self) -> int:
        return self.left.shape[1]

    def row_costs(self) -> np.ndarray:
        return np.abs(self.left - self.right).sum(axis=1)

    def cost(self) -> float:
        return float(self.row_costs().mean())

    def cost_se(self) -> float:
        return float(self.row_costs().std() / np.sqrt(self.n))

    def differ(self) -> float:
        return float(np.any(self.left != self.right, axis=1).mean())

    def differ_se(self) -> float:
        p = self.differ()
        return float(np.sqrt(p * (1.0 - p) / self.n))

    def save_csv(self, path) -> None:
        d = self.d
        header = ",".join([f"left_{i + 1}" for i in range(d)] + [f"right_{i + 1}" for i in range(d)])
        np.savetxt(path, np.hstack([self.left, self.right]), delimiter=",",
                   header=header, comments="")


def jordan_decompose(mu, nu):
    """Componentwise Jordan decomposition of the signed vector mu - nu.

    Returns (meet, pos, neg) with mu = meet + pos, nu = meet + neg,
    pos * neg = 0 componentwise, and ||mu - nu||_1 = sum(pos + neg).
    Accepts single vectors or (n, d) batches of rows.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if mu.shape != nu.shape:
        raise ValidationError(f"shapes differ: {mu.shape} vs {nu.shape}")
    meet = np.minimum(mu, nu)
    return meet, mu - meet, nu - meet


def couple_transitions(mu, nu, mech: BranchingMechanism, t: float,
                       cfg: SimConfig, rng) -> CoupledPair:
    """Couple the transition laws from mu and from nu over time t.

    Draws independent batches from the meet, positive, and negative parts of
    the Jordan decomposition and recombines; each leg is a true transition
    sample by the branching property, and the legs share the meet part.
    """
    mu = mass_vector(mu, d=mech.d)
    nu = mass_vector(nu, d=mech.d)
    meet, pos, neg = jordan_decompose(mu, nu)
    shared = sample_transition(meet, mech, t, cfg, rng)
    upper = sample_transition(pos, mech, t, cfg, rng)
    lower = sample_transition(neg, mech, t, cfg, rng)
    return CoupledPair(shared + upper, shared + lower)


def couple_cbi(mu, nu, imm: ImmigrationMechanism, mech: BranchingMechanism,
               t: float, cfg: SimConfig, rng) -> CoupledPair:
    """Couple the with-immigration transition laws from mu and nu.

    One shared immigration draw is added to both legs of the branching
    coupling, so left - right is unchanged: immigration is free."""
    pair = couple_transitions(mu, nu, mech, t, cfg, rng)
    influx = sample_immigration(imm, mech, t, cfg, rng)
    return CoupledPair(pair.left + influx, pair.right + influx)


def couple_stationary(imm: ImmigrationMechanism, mech: BranchingMechanism,
                      t: float, cfg: SimConfig, rng, bias: float = 1e-3) -> CoupledPair:
    """Couple the time-t immigration law with the stationary law.

    left is a time-t immigration draw; right adds to it an independent
    stationary state evolved over t, which by the flow decomposition of the
    stationary law makes right stationary.  The cost E||left - right||_1 is
    exactly the mean mass remaining from immigration older than t.

    Requires a subcritical mechanism (propagated from the stationary
    sampler); `bias` is its horizon-truncation tolerance.
    """
    fresh = sample_immigration(imm, mech, t, cfg, rng)
    old = sample_stationary(imm, mech, cfg, rng, bias=bias)
    evolved = sample_transition(old, mech, t, cfg, rng)
    return CoupledPair(fresh, fresh + evolved)


def couple_cbi_to_stationary(mu, imm: ImmigrationMechanism, mech: BranchingMechanism,
                             t: float, cfg: SimConfig, rng, bias: float = 1e-3) -> CoupledPair:
    """Couple the with-immigration transition law from mu with the stationary law.

    Each row draws its own stationary state eta, Jordan-decomposes (mu, eta)
    rowwise, evolves the three parts independently, and adds one shared
    immigration draw to both legs.  left is then the time-t law started from
    mu, right is stationary, and both the cost and the fraction of unequal
    rows decay at the subcriticality rate — this is the pair the ergodicity
    rate fits regress on.
    """
    mu = mass_vector(mu, d=mech.d)
    if imm.d != mech.d:
        raise ValidationError(f"immigration dimension {imm.d} != mechanism dimension {mech.d}")
    eta = sample_stationary(imm, mech, cfg, rng, bias=bias)
    rows = np.tile(mu, (cfg.n_samples, 1))
    meet, pos, neg = jordan_decompose(rows, eta)
    shared = sample_transition(meet, mech, t, cfg, rng)
    upper = sample_transition(pos, mech, t, cfg, rng)
    lower = sample_transition(neg, mech, t, cfg, rng)
    influx = sample_immigration(imm, mech, t, cfg, rng)
    return CoupledPair(shared + upper + influx, shared + lower + influx)
