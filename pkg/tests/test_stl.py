import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avpsim.scenarios import RequirementParams
from avpsim.stl import (
    INCONCLUSIVE,
    SATISFIED,
    VIOLATED,
    And,
    Atom,
    Eventually,
    GenericOnlineMonitor,
    Globally,
    Implies,
    Not,
    Or,
    StlError,
    StlSyntaxError,
    Until,
    first_violation_time,
    load_requirements,
    make_online_monitor,
    parse_stl,
    requirement_library,
    robustness_offline,
    robustness_series,
    signal_names,
    store_requirements,
)

INF = math.inf


# ---------------------------------------------------------------------------
# Brute-force oracle: a direct, unoptimized transcription of the semantics.


def brute(f, sigs, dt, k):
    n = len(next(iter(sigs.values())))
    if isinstance(f, Atom):
        s = sigs[f.signal][k]
        return s - f.const if f.op in (">", ">=") else f.const - s
    if isinstance(f, Not):
        return -brute(f.child, sigs, dt, k)
    if isinstance(f, And):
        return min(brute(f.left, sigs, dt, k), brute(f.right, sigs, dt, k))
    if isinstance(f, Or):
        return max(brute(f.left, sigs, dt, k), brute(f.right, sigs, dt, k))
    if isinstance(f, Implies):
        return max(-brute(f.left, sigs, dt, k), brute(f.right, sigs, dt, k))
    if isinstance(f, (Globally, Eventually)):
        js = window_indices(k, f.lo, f.hi, dt, n)
        vals = [brute(f.child, sigs, dt, j) for j in js]
        if isinstance(f, Globally):
            return min(vals, default=INF)
        return max(vals, default=-INF)
    if isinstance(f, Until):
        taus = window_indices(k, f.lo, f.hi, dt, n)
        best = -INF
        for tau in taus:
            hold = min((brute(f.left, sigs, dt, s) for s in range(k, tau)), default=INF)
            best = max(best, min(brute(f.right, sigs, dt, tau), hold))
        return best
    raise AssertionError(f)


def window_indices(k, lo, hi, dt, n):
    out = []
    for j in range(k, n):
        offset = (j - k) * dt
        if offset > hi + 1e-9:
            break
        if offset >= lo - 1e-9:
            out.append(j)
    return out


def random_formula(rng, signals, depth):
    if depth == 0 or rng.random() < 0.25:
        return Atom(rng.choice(signals), rng.choice(["<", "<=", ">", ">="]), round(rng.uniform(-5, 5), 2))
    kind = rng.choice(["not", "and", "or", "implies", "G", "F", "U"])
    if kind == "not":
        return Not(random_formula(rng, signals, depth - 1))
    if kind in ("and", "or", "implies"):
        left = random_formula(rng, signals, depth - 1)
        right = random_formula(rng, signals, depth - 1)
        return {"and": And, "or": Or, "implies": Implies}[kind](left, right)
    lo = round(rng.uniform(0.0, 2.0), 2)
    hi = INF if rng.random() < 0.3 else round(lo + rng.uniform(0.0, 3.0), 2)
    if kind == "G":
        return Globally(lo, hi, random_formula(rng, signals, depth - 1))
    if kind == "F":
        return Eventually(lo, hi, random_formula(rng, signals, depth - 1))
    return Until(lo, hi, random_formula(rng, signals, depth - 1), random_formula(rng, signals, depth - 1))


def random_trace(rng, signals, max_len=50):
    n = rng.randint(1, max_len)
    return {name: [round(rng.uniform(-10.0, 10.0), 3) for _ in range(n)] for name in signals}, n


class TestParser:
    def test_safety_goal_shape(self):
        f = parse_stl("G[0,inf] (min_ped_dist > 0.0 || ego_v <= 0.0)")
        assert isinstance(f, Globally)
        assert f.lo == 0.0 and f.hi == INF
        assert isinstance(f.child, Or)
        assert f.child.left == Atom("min_ped_dist", ">", 0.0)
        assert f.child.right == Atom("ego_v", "<=", 0.0)

    def test_unbalanced_paren_errors_at_end(self):
        with pytest.raises(StlSyntaxError, match="end"):
            parse_stl("F[0,1] (x > 0")

    def test_precedence_not_binds_tighter_than_and(self):
        f = parse_stl("!(a > 1) && b < 2")
        assert f == And(Not(Atom("a", ">", 1.0)), Atom("b", "<", 2.0))

    def test_precedence_and_over_or_over_implies(self):
        f = parse_stl("a > 0 || b > 0 && c > 0 -> d > 0")
        assert f == Implies(
            Or(Atom("a", ">", 0.0), And(Atom("b", ">", 0.0), Atom("c", ">", 0.0))),
            Atom("d", ">", 0.0),
        )

    def test_binary_left_associative(self):
        f = parse_stl("a > 0 -> b > 0 -> c > 0")
        assert f == Implies(Implies(Atom("a", ">", 0.0), Atom("b", ">", 0.0)), Atom("c", ">", 0.0))

    def test_until_binds_tighter_than_and(self):
        f = parse_stl("a > 0 U[0,5] b > 0 && c > 0")
        assert f == And(Until(0.0, 5.0, Atom("a", ">", 0.0), Atom("b", ">", 0.0)), Atom("c", ">", 0.0))

    def test_negative_constants(self):
        assert parse_stl("cmd_a <= -7.0") == Atom("cmd_a", "<=", -7.0)

    def test_scientific_notation(self):
        assert parse_stl("v <= 1e-06") == Atom("v", "<=", 1e-6)

    def test_interval_requires_bounds(self):
        with pytest.raises(StlSyntaxError):
            parse_stl("G[,1] x > 0")
        with pytest.raises(StlSyntaxError):
            parse_stl("G[2,1] (x > 0)")
        with pytest.raises(StlSyntaxError):
            parse_stl("G[inf,inf] (x > 0)")

    def test_unknown_comparator(self):
        with pytest.raises(StlSyntaxError):
            parse_stl("a == 1")

    def test_error_carries_position(self):
        with pytest.raises(StlSyntaxError) as exc:
            parse_stl("G[0,1] (x > )")
        assert exc.value.position == 12

    def test_unexpected_character(self):
        with pytest.raises(StlSyntaxError):
            parse_stl("a > 1 @ b < 2")

    def test_trailing_input_rejected(self):
        with pytest.raises(StlSyntaxError, match="trailing"):
            parse_stl("a > 1 b < 2")

    def test_dsl_round_trip(self):
        rng = random.Random(7)
        for _ in range(50):
            f = random_formula(rng, ["a", "b", "c"], 3)
            assert parse_stl(f.to_dsl()) == f

    def test_signal_names(self):
        f = parse_stl("G[0,inf] (a > 0 || F[0,1] (b < 2 U[0,3] c >= 0))")
        assert signal_names(f) == {"a", "b", "c"}


class TestOfflineFixtures:
    def test_bounded_globally(self):
        sigs = {"v": [1.0, 2.0, 2.5]}
        assert robustness_offline(parse_stl("G[0,2] (v < 3)"), sigs, dt=1.0) == pytest.approx(0.5)

    def test_atom_boundary_zero(self):
        assert robustness_offline(parse_stl("v < 3"), {"v": [3.0]}, dt=1.0) == 0.0

    def test_bounded_eventually(self):
        sigs = {"d": [-1.0, 2.0]}
        assert robustness_offline(parse_stl("F[0,1] (d > 0)"), sigs, dt=1.0) == pytest.approx(2.0)

    def test_globally_empty_window_vacuous(self):
        sigs = {"x": [0.0, 0.0]}
        assert robustness_offline(parse_stl("G[5,6] (x > 100)"), sigs, dt=1.0) == INF

    def test_eventually_empty_window(self):
        sigs = {"x": [0.0, 0.0]}
        assert robustness_offline(parse_stl("F[5,6] (x > 0)"), sigs, dt=1.0) == -INF

    def test_until_by_hand(self):
        # a holds (robustness 1) until b becomes large at tau=2.
        sigs = {"a": [1.0, 1.0, -5.0], "b": [-1.0, -1.0, 4.0]}
        f = parse_stl("a > 0 U[0,2] b > 0")
        # tau=0: min(-1, inf)= -1; tau=1: min(-1, 1) = -1; tau=2: min(4, min(1,1)) = 1
        assert robustness_offline(f, sigs, dt=1.0) == pytest.approx(1.0)

    def test_until_respects_lower_bound(self):
        sigs = {"a": [1.0, -2.0], "b": [5.0, -1.0]}
        f = parse_stl("a > 0 U[1,1] b > 0")
        # Only tau=1 allowed: min(b(1), a(0)) = min(-1, 1) = -1.
        assert robustness_offline(f, sigs, dt=1.0) == pytest.approx(-1.0)

    def test_negation_duality_exact(self):
        rng = random.Random(3)
        for _ in range(30):
            f = random_formula(rng, ["a", "b"], 3)
            sigs, _ = random_trace(rng, ["a", "b"], max_len=20)
            plain = robustness_series(f, sigs, dt=0.5)
            negated = robustness_series(Not(f), sigs, dt=0.5)
            assert np.array_equal(plain, -negated)

    def test_time_argument_selects_sample(self):
        sigs = {"v": [1.0, 2.0, 2.5]}
        f = parse_stl("v < 3")
        assert robustness_offline(f, sigs, dt=0.5, t=1.0) == pytest.approx(0.5)

    def test_non_sample_time_rejected(self):
        with pytest.raises(StlError):
            robustness_offline(parse_stl("v < 3"), {"v": [1.0, 2.0]}, dt=0.5, t=0.3)

    def test_unknown_signal(self):
        with pytest.raises(StlError, match="nope"):
            robustness_offline(parse_stl("nope > 0"), {"v": [1.0]}, dt=1.0)

    def test_inconsistent_lengths(self):
        with pytest.raises(StlError):
            robustness_series(parse_stl("a > 0 && b > 0"), {"a": [1.0], "b": [1.0, 2.0]}, dt=1.0)


class TestOracleConformance:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        rng = random.Random(1000 + seed)
        for _ in range(25):
            f = random_formula(rng, ["a", "b", "c"], 4)
            dt = rng.choice([0.25, 0.5, 1.0])
            sigs, n = random_trace(rng, ["a", "b", "c"], max_len=30)
            series = robustness_series(f, sigs, dt)
            for k in range(n):
                expected = brute(f, sigs, dt, k)
                assert series[k] == pytest.approx(expected, abs=1e-9), (f.to_dsl(), k)

    @given(st.floats(0.001, 2.0), st.integers(1, 30), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_atom_shift_property(self, eps, n, seed):
        rng = random.Random(seed)
        sigs = {"a": [rng.uniform(-5, 5) for _ in range(n)]}
        f = parse_stl("a > 1.5")
        base = robustness_series(f, sigs, dt=0.5)
        shifted = robustness_series(f, {"a": [v + eps for v in sigs["a"]]}, dt=0.5)
        assert np.allclose(shifted - base, eps)

    @given(st.integers(0, 5_000))
    @settings(max_examples=30, deadline=None)
    def test_positive_polarity_monotone(self, seed):
        rng = random.Random(seed)
        # Formula built from monotone connectives only (no negation/implication).
        f = Globally(0.0, INF, Or(Atom("a", ">", 0.5), Eventually(0.0, 1.0, Atom("a", ">=", 2.0))))
        sigs, _ = random_trace(rng, ["a"], max_len=20)
        up = {"a": [v + 0.7 for v in sigs["a"]]}
        assert robustness_offline(f, up, dt=0.5) >= robustness_offline(f, sigs, dt=0.5)


class TestOnline:
    def feed(self, monitor, sigs, n):
        verdicts = []
        for k in range(n):
            row = {name: sigs[name][k] for name in sigs}
            verdicts.append(monitor.update(row).verdict)
        return verdicts

    def test_safety_goal_violated_immediately_and_stays(self):
        params = RequirementParams()
        goal = requirement_library(params)["SAFETY-GOAL"].formula
        monitor = make_online_monitor(goal, dt=0.1)
        ok = {"min_ped_dist": 3.0, "ego_v": 2.0}
        crash = {"min_ped_dist": -0.01, "ego_v": 1.5}
        assert monitor.update(ok).verdict == INCONCLUSIVE
        assert monitor.update(crash).verdict == VIOLATED
        assert monitor.update(ok).verdict == VIOLATED
        assert monitor.first_violation_t == pytest.approx(0.1)
        final = monitor.finalize()
        assert final.verdict == VIOLATED
        assert final.value < 0.0

    def test_open_horizon_globally_stays_inconclusive(self):
        monitor = make_online_monitor(parse_stl("G[0,inf] (v < 3)"), dt=1.0)
        for _ in range(10):
            assert monitor.update({"v": 1.0}).verdict == INCONCLUSIVE
        final = monitor.finalize()
        assert final.verdict == SATISFIED
        assert final.value == pytest.approx(2.0)

    def test_eventually_satisfied_once_witnessed(self):
        monitor = make_online_monitor(parse_stl("F[0,1] (d > 0)"), dt=1.0)
        assert monitor.update({"d": -1.0}).verdict == INCONCLUSIVE
        assert monitor.update({"d": 2.0}).verdict == SATISFIED

    def test_out_of_order_sample_rejected(self):
        monitor = make_online_monitor(parse_stl("G[0,inf] (v < 3)"), dt=0.5)
        monitor.update({"v": 0.0}, t=0.0)
        with pytest.raises(StlError, match="out-of-order"):
            monitor.update({"v": 0.0}, t=1.5)

    def test_missing_signal_rejected(self):
        monitor = make_online_monitor(parse_stl("G[0,inf] (v < 3)"), dt=0.5)
        with pytest.raises(StlError, match="'v'"):
            monitor.update({"w": 0.0})

    def test_fast_paths_selected(self):
        from avpsim.stl import _GloballyLocalMonitor, _ResponseMonitor

        params = RequirementParams()
        lib = requirement_library(params)
        assert isinstance(make_online_monitor(lib["SAFETY-GOAL"].formula, 0.05), _GloballyLocalMonitor)
        assert isinstance(make_online_monitor(lib["UC-AVP-04"].formula, 0.05), _GloballyLocalMonitor)
        assert isinstance(make_online_monitor(lib["UC-AVP-05"].formula, 0.05), _ResponseMonitor)
        assert isinstance(make_online_monitor(parse_stl("a > 0 U[0,2] b > 0"), 0.05), GenericOnlineMonitor)

    @pytest.mark.parametrize(
        "text",
        [
            "G[0,inf] (a > 0)",
            "G[1,inf] (a > 0 || b <= 0.5)",
            "G[0,inf] ((a <= 0.5) || F[0,0.2] (b <= -7))",
            "G[0.3,inf] ((a <= 0.5) || F[0,0.4] (b > 1))",
        ],
    )
    def test_fast_monitor_agrees_with_generic(self, text):
        f = parse_stl(text)
        rng = random.Random(hash(text) % 100_000)
        for _ in range(20):
            sigs, n = random_trace(rng, ["a", "b"], max_len=25)
            fast = make_online_monitor(f, dt=0.1)
            generic = GenericOnlineMonitor(f, dt=0.1)
            assert not isinstance(fast, GenericOnlineMonitor)
            for k in range(n):
                row = {"a": sigs["a"][k], "b": sigs["b"][k]}
                assert fast.update(row).verdict == generic.update(row).verdict, (k, n)
            f_fast, f_gen = fast.finalize(), generic.finalize()
            assert f_fast.verdict == f_gen.verdict
            assert f_fast.value == pytest.approx(f_gen.value, abs=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_prefix_consistency_random_corpus(self, seed):
        rng = random.Random(2000 + seed)
        for _ in range(15):
            f = random_formula(rng, ["a", "b"], 3)
            dt = rng.choice([0.5, 1.0])
            sigs, n = random_trace(rng, ["a", "b"], max_len=15)
            offline = robustness_offline(f, sigs, dt)
            offline_verdict = SATISFIED if offline >= 0.0 else VIOLATED
            monitor = make_online_monitor(f, dt)
            decided = None
            for k in range(n):
                row = {name: sigs[name][k] for name in sigs}
                result = monitor.update(row)
                lo, hi = result.interval
                assert lo <= offline + 1e-9 <= hi + 2e-9, (f.to_dsl(), k)
                if decided is None and result.verdict != INCONCLUSIVE:
                    decided = result.verdict
                elif decided is not None:
                    assert result.verdict == decided
            final = monitor.finalize()
            assert final.value == pytest.approx(offline, abs=1e-9)
            assert final.verdict == offline_verdict
            if decided is not None:
                assert decided == offline_verdict


class TestFirstViolation:
    def test_local_globally(self):
        sigs = {"v": [1.0, 2.0, 4.0, 1.0]}
        t = first_violation_time(parse_stl("G[0,inf] (v < 3)"), sigs, dt=0.5)
        assert t == pytest.approx(1.0)

    def test_satisfied_returns_none(self):
        sigs = {"v": [1.0, 2.0]}
        assert first_violation_time(parse_stl("G[0,inf] (v < 3)"), sigs, dt=0.5) is None

    def test_response_formula_detection_time(self):
        # Obligation at t=0 (a=1) never answered within the 0.2 s window.
        sigs = {"a": [1.0, 1.0, 1.0, 0.0], "b": [0.0, 0.0, 0.0, 0.0]}
        f = parse_stl("G[0,inf] ((a <= 0.5) || F[0,0.2] (b > 0.5))")
        t = first_violation_time(f, sigs, dt=0.1)
        assert t == pytest.approx(0.2)

    def test_generic_formula_bisection(self):
        sigs = {"a": [1.0, 1.0, -1.0, 1.0], "b": [0.0] * 4}
        f = parse_stl("G[0,2] (a > 0) && G[0,inf] (b < 1)")
        # The bad sample at t=2 falls inside the root window, so the verdict
        # hardens exactly when it arrives.
        t = first_violation_time(f, sigs, dt=1.0)
        assert t == pytest.approx(2.0)

    def test_finalize_only_violation_reports_last_sample(self):
        sigs = {"d": [-1.0, -2.0, -1.0]}
        f = parse_stl("F[0,100] (d > 0)")
        t = first_violation_time(f, sigs, dt=1.0)
        assert t == pytest.approx(2.0)


class TestRequirementLibrary:
    def test_names_and_shapes(self):
        lib = requirement_library(RequirementParams())
        assert set(lib) == {
            "SAFETY-GOAL",
            "UC-AVP-01",
            "UC-AVP-02",
            "UC-AVP-03",
            "UC-AVP-04",
            "UC-AVP-05",
            "UC-AVP-06",
        }
        for req in lib.values():
            assert parse_stl(req.text) == req.formula

    def test_collision_at_standstill_satisfies_goal(self):
        lib = requirement_library(RequirementParams())
        sigs = {"min_ped_dist": [1.0, -0.1], "ego_v": [0.5, 0.0]}
        assert robustness_offline(lib["SAFETY-GOAL"].formula, sigs, dt=0.1) >= 0.0

    def test_collision_while_moving_violates_goal(self):
        lib = requirement_library(RequirementParams())
        sigs = {"min_ped_dist": [1.0, -0.1], "ego_v": [0.5, 0.5]}
        assert robustness_offline(lib["SAFETY-GOAL"].formula, sigs, dt=0.1) < 0.0

    def test_slow_cycle_violates_uc06(self):
        lib = requirement_library(RequirementParams())
        sigs = {"cycle_time": [0.01, 0.2, 0.01]}
        rho = robustness_offline(lib["UC-AVP-06"].formula, sigs, dt=0.1)
        assert rho == pytest.approx(-0.1)

    def test_settling_window_in_uc04(self):
        lib = requirement_library(RequirementParams())
        # Large early cross-track is forgiven; late excursions are not.
        early = {"cross_track": [2.0, 2.0, 0.1, 0.1, 0.1]}
        assert robustness_offline(lib["UC-AVP-04"].formula, early, dt=1.0) > 0.0
        late = {"cross_track": [0.1, 0.1, 0.1, 0.1, 2.0]}
        assert robustness_offline(lib["UC-AVP-04"].formula, late, dt=1.0) < 0.0

    def test_aeb_response_formula(self):
        lib = requirement_library(RequirementParams())
        f = lib["UC-AVP-05"].formula
        # Trigger at t=0.1; the full-brake command lands one cycle later.
        good = {"aeb_due": [0.0, 1.0, 1.0, 1.0], "cmd_a": [0.5, 0.5, -7.0, -7.0]}
        assert robustness_offline(f, good, dt=0.1) >= 0.0
        bad = {"aeb_due": [0.0, 1.0, 1.0, 1.0], "cmd_a": [0.5, 0.5, 0.5, 0.5]}
        assert robustness_offline(f, bad, dt=0.1) < 0.0

    def test_file_round_trip(self, tmp_path):
        lib = requirement_library(RequirementParams())
        path = tmp_path / "reqs.stl"
        store_requirements(list(lib.values()), path)
        loaded = load_requirements(path)
        assert [r.name for r in loaded] == list(lib)
        assert [r.formula for r in loaded] == [r.formula for r in lib.values()]

    def test_file_errors_name_line(self, tmp_path):
        path = tmp_path / "reqs.stl"
        path.write_text("# comment\n\nGOOD: a > 0\nBAD a > 0\n")
        with pytest.raises(StlError, match="4"):
            load_requirements(path)

    def test_file_syntax_error_names_line(self, tmp_path):
        path = tmp_path / "reqs.stl"
        path.write_text("R1: G[0,1] (x > )\n")
        with pytest.raises(StlError, match="1"):
            load_requirements(path)
