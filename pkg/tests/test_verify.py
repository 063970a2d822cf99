"""Scenario runner: verdict logic, skip paths, report round-trips."""

import json
import math

import numpy as np
import pytest

from cbilab.errors import ValidationError
from cbilab.mechanism import BranchingMechanism, ImmigrationMechanism, PointMass
from cbilab.simulate import SimConfig
from cbilab.verify import (
    CHECKS,
    Scenario,
    VerificationReport,
    _stationary_laplace_exponent,
    run_scenario,
)

MECH = BranchingMechanism(b=[1.0], c=[1.0])
IMM = ImmigrationMechanism(beta=[2.0])


def reference_scenario(**overrides):
    base = dict(
        name="ref",
        mech=MECH,
        imm=IMM,
        cfg=SimConfig(n_samples=6_000, dt=0.01, seed=20),
        mu=[2.0],
        nu=[1.0],
        times=(0.5, 1.0, 2.0, 3.0),
    )
    base.update(overrides)
    return Scenario(**base)


class TestScenario:
    def test_times_must_increase(self):
        with pytest.raises(ValidationError):
            reference_scenario(times=(1.0, 1.0))
        with pytest.raises(ValidationError):
            reference_scenario(times=(0.0, 1.0))

    def test_unknown_check_rejected(self):
        with pytest.raises(ValidationError, match="unknown checks"):
            reference_scenario(checks=("laplace", "nonsense"))

    def test_defaults(self):
        sc = reference_scenario()
        assert sc.checks == tuple(CHECKS)
        np.testing.assert_array_equal(sc.lambda_probe, [1.0])
        np.testing.assert_array_equal(sc.nu, [1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            reference_scenario(imm=ImmigrationMechanism(beta=[1.0, 1.0]))


@pytest.fixture(scope="module")
def report():
    return run_scenario(reference_scenario())


@pytest.fixture(scope="module")
def small_report():
    sc = reference_scenario(cfg=SimConfig(n_samples=2_000, dt=0.02, seed=9),
                            times=(1.0,), checks=("laplace", "tv_sandwich"))
    return run_scenario(sc)


class TestReferenceScenario:
    def test_all_rows_pass(self, report):
        failed = [r for r in report.rows if r.verdict == "fail"]
        assert report.passed, [(r.check, r.t, r.reason) for r in failed]
        assert report.counts()["skipped"] == 0

    def test_every_check_produced_rows(self, report):
        names = {r.check for r in report.rows}
        assert {"laplace", "extinction_atom", "wasserstein_sandwich",
                "wasserstein_sandwich_imm", "tv_sandwich",
                "lipschitz_contraction", "stationary_mean",
                "stationary_laplace", "stationary_w1_identity",
                "stationary_tv_bound", "stationary_w1_rate",
                "stationary_tv_rate"} <= names

    def test_rows_are_self_describing(self, report):
        for r in report.rows:
            assert r.claim
            assert r.verdict in ("pass", "fail", "skipped")

    def test_estimates_inside_widened_sandwich(self, report):
        # a passing sandwich row's estimate never sits past the bounds by
        # more than its own reported uncertainty times a small factor
        for r in report.rows:
            if r.check.startswith("wasserstein_sandwich") and r.verdict == "pass":
                slack = 5 * (r.ci or 0.0) + 0.02 * r.analytic["upper"]
                assert r.analytic["lower"] - slack <= r.estimate <= r.analytic["upper"] + slack

    def test_exact_tv_route_on_scalar_quadratic(self, report):
        rows = [r for r in report.rows if r.check == "tv_sandwich"]
        assert rows and all(r.details.get("route") == 0.0 for r in rows)
        for r in rows:
            assert r.analytic["lower"] - 1e-9 <= r.estimate <= r.analytic["upper"] + 1e-9

    def test_rate_fits_find_unit_rate(self, report):
        for name in ("stationary_w1_rate", "stationary_tv_rate"):
            row = next(r for r in report.rows if r.check == name)
            assert row.analytic["rate"] == pytest.approx(1.0)
            assert row.analytic["beta_star"] == pytest.approx(1.0)
            assert row.estimate == pytest.approx(-1.0, abs=0.12)

    def test_metadata(self, report):
        assert report.metadata["seed"] == 20
        assert report.metadata["replicates"] == 3
        assert report.metadata["runtime_s"] > 0


class TestNegativeControl:
    def test_tampered_lower_bound_fails(self):
        sc = reference_scenario(cfg=SimConfig(n_samples=3_000, dt=0.01, seed=20),
                                times=(1.0,), checks=("wasserstein_sandwich",),
                                tamper=5.0)
        report = run_scenario(sc)
        assert not report.passed
        assert all(r.verdict == "fail" for r in report.rows)

    def test_untampered_twin_passes(self):
        sc = reference_scenario(cfg=SimConfig(n_samples=3_000, dt=0.01, seed=20),
                                times=(1.0,), checks=("wasserstein_sandwich",))
        assert run_scenario(sc).passed


class TestSkipPaths:
    def test_supercritical_skips_stationary_runs_sandwiches(self):
        sc = Scenario(name="sup", mech=BranchingMechanism(b=[-0.5], c=[1.0]),
                      cfg=SimConfig(n_samples=3_000, dt=0.01, seed=4),
                      mu=[1.0], nu=[0.25], times=(0.5,),
                      checks=("wasserstein_sandwich", "tv_sandwich", "stationary"))
        report = run_scenario(sc)
        assert report.passed
        by_check = {r.check: r for r in report.rows}
        assert by_check["stationary"].verdict == "skipped"
        assert "beta_star" in by_check["stationary"].reason
        assert by_check["wasserstein_sandwich"].verdict == "pass"
        assert by_check["tv_sandwich"].verdict == "pass"

    def test_no_immigration_limit_is_zero_state(self):
        sc = Scenario(name="noimm", mech=MECH,
                      cfg=SimConfig(n_samples=3_000, dt=0.01, seed=4),
                      mu=[1.0], times=(2.0,), checks=("stationary",))
        report = run_scenario(sc)
        assert report.passed
        row = report.rows[0]
        assert row.check == "stationary_mean"
        assert row.analytic["mean_mass"] == pytest.approx(math.exp(-2.0))

    def test_linear_mechanism_skips_tv(self):
        # no diffusion, no jumps: extinction never completes, Vbar blows up
        sc = Scenario(name="lin", mech=BranchingMechanism(b=[1.0], c=[0.0]),
                      cfg=SimConfig(n_samples=1_000, dt=0.01, seed=4),
                      mu=[1.0], nu=[0.5], times=(1.0,),
                      checks=("tv_sandwich", "extinction_atom"))
        report = run_scenario(sc)
        assert report.passed
        for r in report.rows:
            assert r.verdict == "skipped"
            assert "Grey" in r.reason


class TestFailureContainment:
    def test_blow_up_becomes_fail_row(self):
        # a jump component forces the stepped integrator, whose runaway trap
        # must surface as a recorded failure rather than an exception
        mech = BranchingMechanism(b=[-2.0], c=[0.05],
                                  jumps=((PointMass(u=[1.0], weight=0.5),),))
        sc = Scenario(name="boom", mech=mech,
                      cfg=SimConfig(n_samples=500, dt=0.01, seed=4, ceiling=50.0),
                      mu=[30.0], times=(4.0,), checks=("laplace",))
        report = run_scenario(sc)  # must not raise
        assert not report.passed
        assert any("BlowUpError" in r.reason for r in report.rows if r.verdict == "fail")


class TestDeterminism:
    def test_same_seed_same_rows(self):
        sc = reference_scenario(cfg=SimConfig(n_samples=2_000, dt=0.02, seed=9),
                                times=(1.0,), checks=("laplace", "wasserstein_sandwich"))
        a, b = run_scenario(sc), run_scenario(sc)
        assert a.rows == b.rows

    def test_check_streams_independent_of_selection(self):
        cfg = SimConfig(n_samples=2_000, dt=0.02, seed=9)
        alone = run_scenario(reference_scenario(cfg=cfg, times=(1.0,), checks=("laplace",)))
        paired = run_scenario(reference_scenario(
            cfg=cfg, times=(1.0,), checks=("extinction_atom", "laplace")))
        laplace_alone = [r for r in alone.rows if r.check == "laplace"]
        laplace_paired = [r for r in paired.rows if r.check == "laplace"]
        assert laplace_alone == laplace_paired


class TestStationaryExponent:
    def test_closed_form_gamma_laplace(self):
        # b=c=1, beta=2: the limit law is Gamma(2, 1), so the Laplace value
        # at lam is (1+lam)^(-2) and the exponent is 2 log(1+lam)
        for lam in (0.5, 1.0, 2.0):
            exponent, tail = _stationary_laplace_exponent(MECH, IMM, np.array([lam]))
            assert exponent == pytest.approx(2.0 * math.log1p(lam), abs=1e-8)
            assert tail < 1e-8

    def test_refuses_supercritical(self):
        with pytest.raises(ValidationError):
            _stationary_laplace_exponent(
                BranchingMechanism(b=[-1.0], c=[1.0]), IMM, np.array([1.0]))


class TestReportSerialization:
    def test_json_roundtrip(self, small_report, tmp_path):
        path = tmp_path / "report.json"
        small_report.save_json(path)
        doc = json.loads(path.read_text())
        assert doc["schema_version"] == 1
        assert doc["scenario"] == "ref"
        assert len(doc["rows"]) == len(small_report.rows)
        for row_doc, row in zip(doc["rows"], small_report.rows):
            assert row_doc["check"] == row.check
            assert row_doc["verdict"] == row.verdict

    def test_csv_shape(self, small_report, tmp_path):
        path = tmp_path / "report.csv"
        small_report.save_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0].startswith("check,t,verdict")
        assert len(lines) == 1 + len(small_report.rows)
        assert all(line.count(",") == lines[0].count(",") for line in lines[1:])

    def test_summary_has_one_line_per_row_plus_total(self, small_report):
        lines = small_report.summary().split("\n")
        assert len(lines) == len(small_report.rows) + 1
        assert lines[-1].startswith("total:")

    def test_counts(self, small_report):
        c = small_report.counts()
        assert c["pass"] + c["fail"] + c["skipped"] == len(small_report.rows)
