"""Coupling constructions: marginal laws, cost identities, sandwich bounds.

Frozen targets:
  * ordered quadratic cost at t=ln2: (mu-nu) e^{-t} = 0.5
  * stationary coupling cost: 2 e^{-t} (mean mass from immigration older than t)
  * d=1 transition-to-stationary cost at mu=2: E|2-eta| e^{-t} = 8e^{-2} e^{-t}
    (Jordan parts are orthogonal in d=1, so the upper bound is attained)
  * its pair-differ TV estimate at t=1: 2(1 - E[e^{-|2-eta| vbar_1}])
    = 0.8198134136 by quadrature against the Gamma(2,1) stationary density
"""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cbilab.coupling import (
    CoupledPair,
    couple_cbi,
    couple_cbi_to_stationary,
    couple_stationary,
    couple_transitions,
    jordan_decompose,
)
from cbilab.cumulant import moment_semigroup
from cbilab.errors import ValidationError
from cbilab.mechanism import (
    BranchingMechanism,
    ImmigrationMechanism,
    MotionGenerator,
    fold_motion,
)
from cbilab.simulate import (
    SimConfig,
    sample_cbi_transition,
    sample_immigration,
    sample_transition,
)

LN2 = math.log(2.0)


def quad_mech():
    return BranchingMechanism(b=[1.0], c=[1.0])


def folded_mech():
    return fold_motion(
        BranchingMechanism(b=[1.0, 2.0], c=[1.0, 3.0]),
        MotionGenerator([[-1.0, 1.0], [1.0, -1.0]]),
    )


# ---------------------------------------------------------------------------
# jordan decomposition
# ---------------------------------------------------------------------------


def test_jordan_examples():
    meet, pos, neg = jordan_decompose([3.0, 1.0], [1.0, 2.0])
    assert np.array_equal(meet, [1.0, 1.0])
    assert np.array_equal(pos, [2.0, 0.0])
    assert np.array_equal(neg, [0.0, 1.0])
    m, p, q = jordan_decompose([2.0, 2.0], [0.0, 0.0])
    assert np.array_equal(m, [0.0, 0.0]) and np.array_equal(p, [2.0, 2.0]) and np.array_equal(q, [0.0, 0.0])
    m, p, q = jordan_decompose([1.5], [1.5])
    assert np.array_equal(p, [0.0]) and np.array_equal(q, [0.0])
    with pytest.raises(ValidationError):
        jordan_decompose([1.0], [1.0, 2.0])


@given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 1e6)), min_size=1, max_size=5))
def test_jordan_reconstruction(pairs):
    mu = np.array([p[0] for p in pairs])
    nu = np.array([p[1] for p in pairs])
    meet, pos, neg = jordan_decompose(mu, nu)
    # reconstruction is exact up to one rounding of min + (max - min)
    np.testing.assert_allclose(meet + pos, mu, rtol=1e-12, atol=0.0)
    np.testing.assert_allclose(meet + neg, nu, rtol=1e-12, atol=0.0)
    assert np.all(pos * neg == 0.0)
    assert np.sum(pos + neg) == pytest.approx(np.abs(mu - nu).sum())


def test_jordan_batched_rows():
    mu = np.array([[3.0, 1.0], [0.0, 5.0]])
    nu = np.array([[1.0, 2.0], [2.0, 2.0]])
    meet, pos, neg = jordan_decompose(mu, nu)
    assert np.array_equal(meet, [[1.0, 1.0], [0.0, 2.0]])
    assert np.array_equal(pos, [[2.0, 0.0], [0.0, 3.0]])
    assert np.array_equal(neg, [[0.0, 1.0], [2.0, 0.0]])


# ---------------------------------------------------------------------------
# pair container
# ---------------------------------------------------------------------------


def test_pair_statistics_small():
    pair = CoupledPair(np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([[2.0, 2.0], [0.0, 0.0]]))
    assert pair.n == 2 and pair.d == 2
    assert pair.cost() == pytest.approx(0.5)
    assert pair.differ() == pytest.approx(0.5)
    assert np.array_equal(pair.row_costs(), [1.0, 0.0])


def test_pair_validation():
    with pytest.raises(ValidationError):
        CoupledPair(np.zeros((2, 1)), np.zeros((3, 1)))
    with pytest.raises(ValidationError):
        CoupledPair(np.array([[-1.0]]), np.array([[0.0]]))


def test_pair_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    pair = couple_transitions([2.0], [1.0], quad_mech(), 0.5, SimConfig(n_samples=40), rng)
    path = tmp_path / "pair.csv"
    pair.save_csv(path)
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    assert back.shape == (40, 2)
    assert np.allclose(back[:, :1], pair.left)
    assert np.allclose(back[:, 1:], pair.right)


# ---------------------------------------------------------------------------
# transition coupling
# ---------------------------------------------------------------------------


def test_equal_starts_identical_legs():
    rng = np.random.default_rng(8)
    pair = couple_transitions([1.0, 2.0], [1.0, 2.0], folded_mech(), 0.4,
                              SimConfig(n_samples=200, dt=0.02), rng)
    assert np.array_equal(pair.left, pair.right)
    assert pair.cost() == 0.0 and pair.differ() == 0.0


def test_ordered_cost_exactness():
    # ordered starts collapse the sandwich: cost = (mu - nu) e^{-t} = 0.5
    rng = np.random.default_rng(12)
    pair = couple_transitions([2.0], [1.0], quad_mech(), LN2, SimConfig(n_samples=100_000), rng)
    assert abs(pair.cost() - 0.5) < 4 * pair.cost_se()
    # legs stay ordered: the lower leg rides inside the upper one
    assert np.all(pair.left >= pair.right)


def test_cost_sandwich_non_ordered():
    mech = folded_mech()
    mu, nu = np.array([1.0, 2.0]), np.array([2.0, 0.5])
    t = 0.7
    P = moment_semigroup(mech, t).P
    ones = np.ones(2)
    lower = abs((mu - nu) @ (P @ ones))
    upper = np.abs(mu - nu) @ (P @ ones)
    rng = np.random.default_rng(21)
    pair = couple_transitions(mu, nu, mech, t, SimConfig(n_samples=20_000, dt=0.01), rng)
    se = pair.cost_se()
    assert lower - 4 * se <= pair.cost() <= upper + 4 * se
    assert lower < upper  # non-ordered: the bracket is genuinely open


def test_transition_marginals_match_direct_sampler():
    mech = folded_mech()
    mu, nu = [1.0, 2.0], [2.0, 0.5]
    cfg = SimConfig(n_samples=10_000, dt=0.02)
    rng = np.random.default_rng(33)
    pair = couple_transitions(mu, nu, mech, 0.5, cfg, rng)
    ref_left = sample_transition(mu, mech, 0.5, cfg, rng)
    ref_right = sample_transition(nu, mech, 0.5, cfg, rng)
    for leg, ref in ((pair.left, ref_left), (pair.right, ref_right)):
        for j in range(2):
            assert stats.ks_2samp(leg[:, j], ref[:, j]).pvalue > 0.01
        assert stats.ks_2samp(leg.sum(axis=1), ref.sum(axis=1)).pvalue > 0.01


# ---------------------------------------------------------------------------
# immigration couplings
# ---------------------------------------------------------------------------


def test_cbi_immigration_cancels_exactly():
    mech = quad_mech()
    imm = ImmigrationMechanism(beta=[2.0])
    cfg = SimConfig(n_samples=5_000)
    plain = couple_transitions([2.0], [1.0], mech, LN2, cfg, np.random.default_rng(77))
    with_imm = couple_cbi([2.0], [1.0], imm, mech, LN2, cfg, np.random.default_rng(77))
    # same seed: the transition draws coincide and the shared influx drops
    # out of the gap (up to one rounding per addition); rows with equal
    # transition legs stay equal exactly
    np.testing.assert_allclose(with_imm.left - with_imm.right,
                               plain.left - plain.right, rtol=0, atol=1e-12)
    equal_before = np.all(plain.left == plain.right, axis=1)
    equal_after = np.all(with_imm.left == with_imm.right, axis=1)
    assert np.all(equal_after[equal_before])
    assert abs(with_imm.cost() - 0.5) < 4 * with_imm.cost_se()


def test_cbi_equal_starts_identical_legs():
    imm = ImmigrationMechanism(beta=[2.0])
    pair = couple_cbi([1.5], [1.5], imm, quad_mech(), 1.0, SimConfig(n_samples=100),
                      np.random.default_rng(1))
    assert np.array_equal(pair.left, pair.right)


def test_stationary_coupling_cost_identity():
    # cost = mean mass remaining from immigration older than t = 2 e^{-t}
    imm = ImmigrationMechanism(beta=[2.0])
    rng = np.random.default_rng(55)
    for t in (1.0, 4.0):
        pair = couple_stationary(imm, quad_mech(), t, SimConfig(n_samples=100_000), rng)
        target = 2 * math.exp(-t)
        assert abs(pair.cost() - target) < 4 * pair.cost_se(), f"t={t}"
        assert np.all(pair.right >= pair.left)


def test_stationary_coupling_marginals():
    imm = ImmigrationMechanism(beta=[2.0])
    cfg = SimConfig(n_samples=10_000)
    rng = np.random.default_rng(66)
    pair = couple_stationary(imm, quad_mech(), 1.0, cfg, rng)
    ref_left = sample_immigration(imm, quad_mech(), 1.0, cfg, rng)[:, 0]
    assert stats.ks_2samp(pair.left[:, 0], ref_left).pvalue > 0.01
    assert stats.kstest(pair.right[:, 0], stats.gamma(a=2.0, scale=1.0).cdf).pvalue > 0.01


def test_stationary_coupling_refuses_supercritical():
    imm = ImmigrationMechanism(beta=[1.0])
    with pytest.raises(ValidationError):
        couple_stationary(imm, BranchingMechanism(b=[-0.5], c=[1.0]), 1.0,
                          SimConfig(n_samples=10), np.random.default_rng(0))


def test_transition_to_stationary_cost_and_tv():
    # d=1: the Jordan parts never coexist, so cost = E|mu - eta| e^{-t}
    # = 8 e^{-2} e^{-t}; the pair-differ TV estimate at t=1 equals
    # 2(1 - E[e^{-|2-eta| vbar_1}]) = 0.8198134136 (quadrature oracle)
    mech = quad_mech()
    imm = ImmigrationMechanism(beta=[2.0])
    rng = np.random.default_rng(88)
    cfg = SimConfig(n_samples=100_000)
    pair = couple_cbi_to_stationary([2.0], imm, mech, 1.0, cfg, rng)
    cost_target = 8 * math.exp(-3.0)
    assert abs(pair.cost() - cost_target) < 4 * pair.cost_se()
    tv_hat = 2 * pair.differ()
    assert abs(tv_hat - 0.8198134136) < 4 * 2 * pair.differ_se()


def test_transition_to_stationary_marginals():
    mech = quad_mech()
    imm = ImmigrationMechanism(beta=[2.0])
    cfg = SimConfig(n_samples=10_000)
    rng = np.random.default_rng(99)
    pair = couple_cbi_to_stationary([2.0], imm, mech, 1.0, cfg, rng)
    ref_left = sample_cbi_transition([2.0], imm, mech, 1.0, cfg, rng)[:, 0]
    assert stats.ks_2samp(pair.left[:, 0], ref_left).pvalue > 0.01
    assert stats.kstest(pair.right[:, 0], stats.gamma(a=2.0, scale=1.0).cdf).pvalue > 0.01


def test_transition_to_stationary_cost_decays():
    mech = quad_mech()
    imm = ImmigrationMechanism(beta=[2.0])
    rng = np.random.default_rng(111)
    cfg = SimConfig(n_samples=20_000)
    costs = [couple_cbi_to_stationary([2.0], imm, mech, t, cfg, rng).cost()
             for t in (1.0, 2.0, 4.0)]
    assert costs[0] > costs[1] > costs[2]
    assert costs[2] < 0.05
