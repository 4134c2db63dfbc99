import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridbench.dataset_io import PredictionSet
from gridbench.metrics import (PhysicsTolerances, evaluate_ml,
                               evaluate_physics, mae, mape,
                               mape_top_quantile, mape_with_exclusions)
from gridbench.scenarios import default_desk_config, generate_dataset


@pytest.fixture(scope="module")
def desk_test(case118):
    cfg = default_desk_config(case118)
    cfg.n_samples = {"train": 50, "val": 50, "test": 150, "test_ood": 50}
    return generate_dataset(case118, cfg, "test")


def brute_force_quantile(values, p):
    """Hand-rolled linear-interpolation quantile over a sorted copy."""
    s = sorted(float(v) for v in values)
    h = (len(s) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def brute_force_mape_top(pred, truth, q):
    cut = brute_force_quantile(truth, 1.0 - q)
    terms = [abs(p - t) / abs(t) for p, t in zip(pred, truth) if t >= cut and t != 0]
    return sum(terms) / len(terms)


class TestScalarMetrics:
    def test_identity_gives_zero(self):
        t = np.linspace(1, 9, 40)
        assert mape(t, t) == 0.0
        assert mae(t, t) == 0.0
        assert mape_top_quantile(t, t, 0.10) == 0.0

    def test_uniform_relative_error(self):
        t = np.linspace(1, 9, 40)
        p = 1.1 * t
        assert mape(p, t) == pytest.approx(0.10, abs=1e-12)
        assert mape_top_quantile(p, t, 0.10) == pytest.approx(0.10, abs=1e-12)
        assert mape_top_quantile(p, t, 0.90) == pytest.approx(0.10, abs=1e-12)

    def test_enumeration_example(self):
        """truth 1..100, pred shifted by +1, top decile: mean of 1/t over
        t in 91..100."""
        t = np.arange(1.0, 101.0)
        p = t + 1.0
        expect = np.mean(1.0 / np.arange(91.0, 101.0))
        assert mape_top_quantile(p, t, 0.10) == pytest.approx(expect, abs=1e-15)

    def test_matches_brute_force_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(20, 200))
            truth = rng.uniform(0.5, 10.0, n)
            pred = truth + rng.normal(0, 0.3, n)
            for q in (0.10, 0.90):
                a = mape_top_quantile(pred, truth, q)
                b = brute_force_mape_top(pred.tolist(), truth.tolist(), q)
                assert a == pytest.approx(b, abs=1e-12)
            assert mae(pred, truth) == pytest.approx(
                sum(abs(a - b) for a, b in zip(pred, truth)) / n, abs=1e-12)

    def test_zero_truth_excluded_and_counted(self):
        t = np.array([0.0, 1.0, 2.0, 0.0])
        p = np.array([5.0, 1.1, 2.2, 7.0])
        val, excluded = mape_with_exclusions(p, t)
        assert excluded == 2
        assert val == pytest.approx(0.10, abs=1e-12)

    def test_all_zero_truth_is_error(self):
        with pytest.raises(ValueError):
            mape(np.ones(3), np.zeros(3))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mae(np.ones(3), np.ones(4))

    @given(st.lists(st.floats(0.5, 100.0), min_size=12, max_size=60),
           st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_top_decile_ignores_low_entries(self, values, seed):
        """Perturbing entries strictly below the cutoff leaves MAPE90 alone."""
        truth = np.asarray(values)
        rng = np.random.default_rng(seed)
        pred = truth * rng.uniform(0.9, 1.1, truth.size)
        cut = np.quantile(truth, 0.90)
        below = truth < cut
        if not below.any():
            return
        perturbed = pred.copy()
        perturbed[below] += rng.uniform(5.0, 50.0, int(below.sum()))
        a = mape_top_quantile(pred, truth, 0.10)
        b = mape_top_quantile(perturbed, truth, 0.10)
        assert a == pytest.approx(b, rel=1e-12)


class TestEvaluateML:
    def test_perfect_predictions(self, desk_test):
        pred = PredictionSet.from_dataset(desk_test)
        rep = evaluate_ml(pred, desk_test)
        assert all(v == 0.0 for v in rep.ordered())

    def test_isolated_voltage_offset(self, desk_test):
        pred = PredictionSet.from_dataset(desk_test)
        pred.values["v_or"] = pred.values["v_or"] + 0.3
        pred.values["v_ex"] = pred.values["v_ex"] + 0.3
        rep = evaluate_ml(pred, desk_test)
        assert rep.mae_v_or == pytest.approx(0.3, abs=1e-9)
        assert rep.mae_v_ex == pytest.approx(0.3, abs=1e-9)
        assert rep.mape90_a_or == 0.0
        assert rep.mape10_p_or == 0.0

    def test_shape_mismatch_rejected(self, desk_test):
        pred = PredictionSet.from_dataset(desk_test)
        pred.values["a_or"] = pred.values["a_or"][:, :-1]
        with pytest.raises(ValueError, match="a_or"):
            evaluate_ml(pred, desk_test)

    def test_matches_flat_reimplementation(self, desk_test):
        """Independent second implementation over explicit python loops."""
        rng = np.random.default_rng(1)
        pred = PredictionSet.from_dataset(desk_test)
        for key in ("a_or", "a_ex", "p_or", "p_ex", "v_or", "v_ex"):
            pred.values[key] = pred.values[key] * rng.uniform(0.95, 1.05,
                                                              pred.values[key].shape)
        rep = evaluate_ml(pred, desk_test)
        t = desk_test.outputs
        assert rep.mape90_a_or == pytest.approx(
            brute_force_mape_top(pred.values["a_or"].ravel().tolist(),
                                 t["a_or"].ravel().tolist(), 0.10), abs=1e-12)
        # magnitude-based selection for the signed powers
        mag = np.abs(t["p_or"]).ravel()
        cut = brute_force_quantile(mag.tolist(), 0.10)
        sel = mag >= cut
        terms = np.abs(pred.values["p_or"].ravel()[sel] - t["p_or"].ravel()[sel])
        terms = terms[t["p_or"].ravel()[sel] != 0] / np.abs(
            t["p_or"].ravel()[sel][t["p_or"].ravel()[sel] != 0])
        assert rep.mape10_p_or == pytest.approx(float(terms.mean()), abs=1e-12)
        assert rep.mae_v_ex == pytest.approx(
            float(np.abs(pred.values["v_ex"] - t["v_ex"]).mean()), abs=1e-12)


class TestEvaluatePhysics:
    def test_truth_is_compliant(self, desk_test):
        rep = evaluate_physics(PredictionSet.from_dataset(desk_test), desk_test)
        assert rep.p1 == 0.0
        assert rep.p2 == 0.0
        assert rep.p3 == 0.0
        assert rep.p4 == 0.0
        assert rep.p5 == 0.0
        assert rep.p6 < 1e-6
        assert rep.p7 < 1e-4
        assert rep.p8 <= 0.01

    def test_single_negative_loss_counted(self, desk_test):
        pred = PredictionSet.from_dataset(desk_test)
        n, L = pred.values["p_or"].shape
        # find a connected line and force its losses negative on one sample
        i, ell = 3, int(np.flatnonzero(desk_test.topology["line_status"][3])[0])
        pred.values["p_or"][i, ell] = -0.25
        pred.values["p_ex"][i, ell] = -0.25
        rep = evaluate_physics(pred, desk_test)
        assert rep.p3 == pytest.approx(1.0 / (n * L))

    def test_disconnected_activity_counted(self, desk_test):
        pred = PredictionSet.from_dataset(desk_test)
        disc = ~desk_test.topology["line_status"]
        i, ell = next(zip(*np.nonzero(disc)))
        pred.values["a_or"][i, ell] = 3.0
        rep = evaluate_physics(pred, desk_test)
        assert rep.p4 == pytest.approx(1.0 / disc.sum())

    def test_negative_current_counted(self, desk_test):
        pred = PredictionSet.from_dataset(desk_test)
        n, L = pred.values["a_or"].shape
        pred.values["a_or"][0, 0] = -5.0
        rep = evaluate_physics(pred, desk_test)
        assert rep.p1 == pytest.approx(1.0 / (2 * n * L))

    def test_loss_range_violation(self, desk_test):
        pred = PredictionSet.from_dataset(desk_test)
        # double every flow of sample 0: losses double, out of the window
        for k in ("p_or", "p_ex"):
            pred.values[k][0] *= 3.0
        rep = evaluate_physics(pred, desk_test)
        assert rep.p5 == pytest.approx(1.0 / desk_test.n_samples)

    def test_sample_permutation_invariance(self, desk_test):
        rng = np.random.default_rng(4)
        pred = PredictionSet.from_dataset(desk_test)
        for k in pred.values:
            pred.values[k] = pred.values[k] * rng.uniform(0.9, 1.1, pred.values[k].shape)
        rep = evaluate_physics(pred, desk_test)
        perm = rng.permutation(desk_test.n_samples)
        import copy
        shuffled = copy.deepcopy(desk_test)
        for group in (shuffled.inputs, shuffled.topology, shuffled.outputs):
            for k in group:
                group[k] = group[k][perm]
        pred2 = PredictionSet(values={k: v[perm] for k, v in pred.values.items()})
        rep2 = evaluate_physics(pred2, shuffled)
        for a, b in zip(rep.ordered(), rep2.ordered()):
            assert a == pytest.approx(b, rel=1e-9, abs=1e-12)

    def test_literal_joule_form_flag(self, desk_test):
        pred = PredictionSet.from_dataset(desk_test)
        literal = evaluate_physics(pred, desk_test,
                                   PhysicsTolerances(joule_literal_form=True))
        squared = evaluate_physics(pred, desk_test)
        # the printed linear form is dimensionally off and scores far worse
        assert literal.p8 > squared.p8
