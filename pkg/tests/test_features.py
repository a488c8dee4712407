"""Feature extraction against closed-form charging-curve oracles."""

import numpy as np
import pytest

from sohode.data import ChargeProfile
from sohode.features import (GRID_PRESETS, FeatureVector, InsufficientData,
                             NotConstantCurrent, RangeNotCovered, VoltageGrid,
                             cc_window, extract_features, feature_correlation,
                             features_from_csv, features_to_csv, soh,
                             time_at_voltage)


def linear_ramp(v_lo=3.0, v_hi=4.2, duration=1200.0, n=121, current=1.48,
                cycle=0, capacity=2.0):
    t = np.linspace(0.0, duration, n)
    v = v_lo + (v_hi - v_lo) * t / duration
    return ChargeProfile(cycle=cycle, time_s=t, voltage_v=v,
                         current_a=np.full(n, current), capacity_ah=capacity)


class TestSoh:
    def test_fresh(self):
        assert soh(2.0, 2.0) == 1.0

    def test_eol_threshold(self):
        assert soh(1.6, 2.0) == 0.8

    def test_small_cell(self):
        assert abs(soh(0.74 * 0.9, 0.74) - 0.9) < 1e-15

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            soh(0.0, 2.0)
        with pytest.raises(ValueError):
            soh(1.0, -1.0)


class TestVoltageGrid:
    def test_preset_feature_lengths(self):
        # feature length = grid points + 1 (the soh entry)
        assert GRID_PRESETS["oxford"].n_points + 1 == 22
        assert GRID_PRESETS["nasa"].n_points + 1 == 20
        assert GRID_PRESETS["tju"].n_points + 1 == 20
        assert GRID_PRESETS["hust"].n_points + 1 == 18

    def test_equidistant_within_segment(self):
        for grid in GRID_PRESETS.values():
            for lo, hi, n in grid.segments:
                v = np.linspace(lo, hi, n)
                np.testing.assert_allclose(np.diff(v), (hi - lo) / (n - 1),
                                           atol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            VoltageGrid(((3.0, 3.0, 5),))
        with pytest.raises(ValueError):
            VoltageGrid(((3.0, 3.5, 1),))
        with pytest.raises(ValueError):
            VoltageGrid(((3.0, 3.5, 5), (3.4, 3.8, 4)))  # overlap


class TestCcWindow:
    def test_monotone_slice_from_entry(self):
        p = linear_ramp()
        t, v = cc_window(p, 3.6, 4.2)
        assert v[0] <= 3.6 <= v[1]
        assert v[-1] >= 4.2 - 1e-12

    def test_range_not_covered(self):
        p = linear_ramp(v_hi=4.0)
        with pytest.raises(RangeNotCovered):
            cc_window(p, 3.6, 4.2)

    def test_tied_voltage_dropped(self):
        t = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
        v = np.array([3.0, 3.3, 3.3, 3.6, 4.0])
        p = ChargeProfile(cycle=0, time_s=t, voltage_v=v,
                          current_a=np.ones(5), capacity_ah=1.0)
        tw, vw = cc_window(p, 3.0, 4.0)
        assert np.all(np.diff(vw) > 0)
        assert 2.0 not in tw  # the repeated-voltage sample went away

    def test_constant_current_check(self):
        p = linear_ramp()
        cur = p.current_a.copy()
        cur[::2] = 6.0  # CV far above 20%
        bad = ChargeProfile(cycle=0, time_s=p.time_s, voltage_v=p.voltage_v,
                            current_a=cur, capacity_ah=2.0)
        with pytest.raises(NotConstantCurrent):
            cc_window(bad, 3.0, 4.2)

    def test_mild_variation_warns(self):
        p = linear_ramp()
        cur = p.current_a * (1.0 + 0.12 * np.sin(np.linspace(0, 6, p.time_s.size)))
        mild = ChargeProfile(cycle=0, time_s=p.time_s, voltage_v=p.voltage_v,
                             current_a=cur, capacity_ah=2.0)
        with pytest.warns(UserWarning, match="CV"):
            cc_window(mild, 3.0, 4.2)


class TestTimeAtVoltage:
    def test_linear_interpolation(self):
        p = linear_ramp()
        t, v = cc_window(p, 3.0, 4.2)
        assert abs(time_at_voltage(t, v, 3.6) - 600.0) < 1e-9

    def test_exact_sample_hit(self):
        t = np.array([0.0, 10.0, 20.0])
        v = np.array([3.0, 3.5, 4.0])
        assert time_at_voltage(t, v, 3.5) == 10.0

    def test_piecewise_profile(self):
        t = np.array([0.0, 800.0, 1200.0])
        v = np.array([3.0, 4.0, 4.2])
        assert abs(time_at_voltage(t, v, 4.1) - 1000.0) < 1e-9

    def test_out_of_span(self):
        with pytest.raises(RangeNotCovered):
            time_at_voltage(np.array([0.0, 1.0]), np.array([3.0, 4.0]), 4.5)


class TestExtractFeatures:
    def test_linear_ramp_oxford_grid(self):
        fv = extract_features(linear_ramp(), GRID_PRESETS["oxford"], q_0=2.0)
        np.testing.assert_allclose(fv.times, np.linspace(0, 1, 21), atol=1e-9)
        assert fv.soh == 1.0

    def test_endpoints_exact(self):
        fv = extract_features(linear_ramp(n=73), GRID_PRESETS["oxford"], q_0=2.0)
        assert fv.times[0] == 0.0
        assert fv.times[-1] == 1.0

    def test_hust_dual_segment_lengths(self):
        p = linear_ramp(v_lo=3.0, v_hi=3.7, n=201)
        fv = extract_features(p, GRID_PRESETS["hust"], q_0=2.0)
        assert fv.times.size == 17
        assert fv.as_array().size == 18

    def test_time_unit_invariance(self):
        p = linear_ramp()
        scaled = ChargeProfile(cycle=0, time_s=p.time_s * 37.5,
                               voltage_v=p.voltage_v, current_a=p.current_a,
                               capacity_ah=p.capacity_ah)
        a = extract_features(p, GRID_PRESETS["oxford"], q_0=2.0)
        b = extract_features(scaled, GRID_PRESETS["oxford"], q_0=2.0)
        assert np.array_equal(a.times, b.times)

    def test_monotone_profile_gives_monotone_times(self):
        rng = np.random.default_rng(0)
        t = np.sort(rng.uniform(0, 1000, 300))
        v = np.sort(rng.uniform(3.0, 4.25, 300))
        v[0], v[-1] = 2.99, 4.25
        p = ChargeProfile(cycle=0, time_s=t, voltage_v=v,
                          current_a=np.ones(300), capacity_ah=2.0)
        fv = extract_features(p, GRID_PRESETS["oxford"], q_0=2.0)
        assert np.all(np.diff(fv.times) >= 0)

    def test_sigmoid_ramp_matches_closed_form_inverse(self):
        # profile sampled exactly on the closed-form inverse of a
        # two-parameter rational sigmoid; grid voltages sit on samples
        from sohode.data import voltage_fraction_inverse
        gamma, beta = 1.45, 0.9
        v_lo, v_hi, duration = 3.0, 4.2, 2400.0
        grid = GRID_PRESETS["oxford"]
        v = np.unique(np.concatenate([np.linspace(v_lo, v_hi, 241),
                                      grid.voltages()]))
        s = (v - v_lo) / (v_hi - v_lo)
        u = voltage_fraction_inverse(s, gamma, beta)
        p = ChargeProfile(cycle=0, time_s=u * duration, voltage_v=v,
                          current_a=np.full(v.size, 1.48), capacity_ah=2.0)
        fv = extract_features(p, grid, q_0=2.0)
        expected = voltage_fraction_inverse(
            (grid.voltages() - v_lo) / (v_hi - v_lo), gamma, beta)
        np.testing.assert_allclose(fv.times, expected, atol=1e-9)


class TestFeatureVectorInvariants:
    def test_rejects_bad_soh(self):
        with pytest.raises(ValueError):
            FeatureVector(soh=1.5, times=np.array([0.0, 1.0]))

    def test_rejects_decreasing_times(self):
        with pytest.raises(ValueError):
            FeatureVector(soh=1.0, times=np.array([0.0, 0.5, 0.4, 1.0]))


class TestFeatureCorrelation:
    @staticmethod
    def _vectors(matrix):
        return [FeatureVector(soh=min(max(row[0], 1e-6), 1.2), times=row[1:])
                for row in matrix]

    def test_self_correlation_one(self):
        rng = np.random.default_rng(1)
        cols = rng.uniform(0.1, 0.9, size=(10, 1))
        data = np.hstack([cols, cols])
        corr, defined = feature_correlation(self._vectors(data))
        assert abs(corr[0, 1] - 1.0) < 1e-12
        assert defined.all()

    def test_negated_column(self):
        rng = np.random.default_rng(2)
        cols = rng.uniform(0.1, 0.9, size=(10, 1))
        data = np.hstack([cols, 1.0 - cols])
        corr, _ = feature_correlation(self._vectors(data))
        assert abs(corr[0, 1] + 1.0) < 1e-12

    def test_against_two_pass_covariance_oracle(self):
        rng = np.random.default_rng(3)
        vectors = [FeatureVector(soh=rng.uniform(0.5, 1.0),
                                 times=np.sort(rng.uniform(0.0, 1.0, 4)))
                   for _ in range(100)]
        corr, _ = feature_correlation(vectors)
        data = np.stack([fv.as_array() for fv in vectors])
        mean = data.mean(axis=0)
        cov = (data - mean).T @ (data - mean) / data.shape[0]
        sd = np.sqrt(np.diag(cov))
        expected = cov / np.outer(sd, sd)
        np.testing.assert_allclose(corr, expected, atol=1e-10)

    def test_constant_column_flagged_not_nan(self):
        data = np.hstack([np.full((5, 1), 0.5),
                          np.linspace(0.1, 0.9, 5)[:, None]])
        corr, defined = feature_correlation(self._vectors(data))
        assert not defined[0, 1]
        assert corr[0, 1] == 0.0
        assert np.all(np.isfinite(corr))
        assert corr[0, 0] == 1.0

    def test_needs_three_vectors(self):
        vectors = [FeatureVector(soh=0.9, times=np.array([0.0, 0.5, 1.0]))
                   for _ in range(2)]
        with pytest.raises(InsufficientData):
            feature_correlation(vectors)


def test_feature_csv_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    vectors = [FeatureVector(soh=1.0 - 0.001 * k,
                             times=np.sort(rng.uniform(0, 1, 6)))
               for k in range(5)]
    for fv in vectors:
        fv.times[0], fv.times[-1] = 0.0, 1.0
    path = tmp_path / "features.csv"
    features_to_csv(path, list(range(5)), vectors)
    cycles, loaded = features_from_csv(path)
    assert cycles == list(range(5))
    for a, b in zip(vectors, loaded):
        assert a.soh == b.soh
        assert np.array_equal(a.times, b.times)
