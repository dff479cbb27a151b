import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from valleyfill.core import (GridMismatchError, Objective, ObjectiveKind,
                             Profile, TimeGrid, aggregate, inner, mean_rate,
                             norm2, objective_value, profile_from_csv,
                             profile_to_csv, variance)


def grid(T=24.0, S=96):
    return TimeGrid(T, S)


class TestTimeGrid:
    def test_dt_consistency(self):
        g = grid()
        assert abs(g.dt * g.slots - g.horizon_hours) <= 1e-12 * g.horizon_hours

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            TimeGrid(0.0, 96)
        with pytest.raises(ValueError):
            TimeGrid(24.0, 0)

    def test_serialization_round_trip(self):
        g = TimeGrid(24.0, 96)
        assert TimeGrid.deserialize(g.serialize()) == g


class TestProfile:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            Profile(np.zeros(5), grid())

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Profile(np.array([1.0, np.nan]), TimeGrid(1.0, 2))

    def test_values_immutable(self):
        p = Profile.zeros(grid())
        with pytest.raises(ValueError):
            p.values[0] = 1.0

    def test_csv_round_trip(self, tmp_path):
        g = TimeGrid(3.0, 4)
        p = Profile(np.array([0.1, 1.0 / 3.0, 2.5, 0.0]), g)
        path = tmp_path / "p.csv"
        profile_to_csv(p, path)
        assert profile_from_csv(path, g) == p


class TestInner:
    def test_zero(self):
        g = TimeGrid(4.0, 4)
        z = Profile.zeros(g)
        assert inner(z, z) == 0.0

    def test_ones_give_horizon(self):
        g = grid()
        ones = Profile.constant(1.0, g)
        assert inner(ones, ones) == pytest.approx(24.0, rel=1e-12)

    def test_hand_arithmetic(self):
        g = TimeGrid(1.0, 2)  # dt = 0.5
        f = Profile(np.array([1.0, 2.0]), g)
        h = Profile(np.array([3.0, 4.0]), g)
        # per-slot summation oracle
        expected = g.dt * sum(a * b for a, b in zip(f.values, h.values))
        assert inner(f, h) == pytest.approx(5.5, abs=1e-12)
        assert inner(f, h) == pytest.approx(expected, rel=1e-15)

    def test_grid_mismatch(self):
        f = Profile.zeros(TimeGrid(1.0, 2))
        h = Profile.zeros(TimeGrid(1.0, 3))
        with pytest.raises(GridMismatchError):
            inner(f, h)

    @given(st.lists(st.floats(-10, 10), min_size=4, max_size=4),
           st.lists(st.floats(-10, 10), min_size=4, max_size=4))
    def test_cauchy_schwarz(self, a, b):
        g = TimeGrid(2.0, 4)
        f = Profile(np.array(a), g)
        h = Profile(np.array(b), g)
        assert inner(f, h) ** 2 <= norm2(f) * norm2(h) + 1e-9


class TestNorm2:
    def test_zero(self):
        assert norm2(Profile.zeros(grid())) == 0.0

    def test_canonical_pulse(self):
        g = grid()
        values = np.zeros(96)
        values[10:26] = 3.3  # 16 slots of 15 min = 4 h
        assert norm2(Profile(values, g)) == pytest.approx(43.56, rel=1e-12)

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_scaling_homogeneity(self, a):
        g = TimeGrid(1.5, 3)
        f = Profile(np.array(a), g)
        doubled = Profile(2 * np.array(a), g)
        assert norm2(doubled) == pytest.approx(4 * norm2(f), rel=1e-12, abs=1e-12)


class TestAggregate:
    def test_empty(self):
        g = grid()
        b = Profile(np.linspace(0, 1, 96), g)
        assert aggregate(b, []) == b

    def test_two_copies(self):
        g = TimeGrid(1.0, 2)
        p = Profile(np.array([1.0, 2.0]), g)
        agg = aggregate(Profile.zeros(g), [p, p])
        assert np.array_equal(agg.values, [2.0, 4.0])

    def test_pointwise(self):
        g = TimeGrid(1.0, 2)
        b = Profile(np.array([1.0, 1.0]), g)
        xs = [Profile(np.array([0.0, 1.0]), g), Profile(np.array([2.0, 0.0]), g)]
        assert np.array_equal(aggregate(b, xs).values, [3.0, 2.0])

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        g = TimeGrid(4.0, 8)
        xs = [Profile(rng.uniform(0, 1, 8), g) for _ in range(5)]
        b = Profile(rng.uniform(0, 1, 8), g)
        forward = aggregate(b, xs)
        # permutation then index-order summation over the permuted list:
        # results must agree bitwise because addition runs pairwise in the
        # same sequential pattern over values that sum identically per slot
        backward = aggregate(b, xs[::-1])
        assert np.allclose(forward.values, backward.values, rtol=0, atol=1e-12)


class TestObjective:
    def test_empty_zero(self):
        g = grid()
        assert objective_value(Profile.zeros(g), []) == 0.0

    def test_flat_profile(self):
        g = grid()
        mu = 1.7
        assert objective_value(Profile.constant(mu, g), []) == \
            pytest.approx(24.0 * mu * mu, rel=1e-12)

    def test_perfect_tracking(self):
        g = TimeGrid(2.0, 4)
        b = Profile(np.array([1.0, 2.0, 0.5, 0.0]), g)
        x = Profile(np.array([0.1, 0.2, 0.3, 0.4]), g)
        target = aggregate(b, [x])
        obj = Objective(ObjectiveKind.TRACK, target)
        assert objective_value(b, [x], obj) == pytest.approx(0.0, abs=1e-15)

    def test_track_requires_target(self):
        with pytest.raises(ValueError):
            Objective(ObjectiveKind.TRACK)


class TestVariance:
    def test_constant_is_zero(self):
        assert variance(Profile.constant(3.0, grid())) == pytest.approx(0.0, abs=1e-12)

    def test_hand_arithmetic(self):
        g = TimeGrid(1.0, 2)
        d = Profile(np.array([0.0, 2.0]), g)
        assert variance(d) == pytest.approx(1.0, rel=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        g = TimeGrid(6.0, 12)
        d = Profile(rng.uniform(0, 3, 12), g)
        shifted = Profile(d.values + 5.0, g)
        assert variance(shifted) == pytest.approx(variance(d), rel=1e-9, abs=1e-9)

    def test_objective_identity(self):
        # norm2(d) = T * (V(d) + mu^2), the variance/norm equivalence
        rng = np.random.default_rng(42)
        g = grid()
        for _ in range(10):
            b = Profile(rng.uniform(0, 2, 96), g)
            xs = [Profile(rng.uniform(0, 1, 96), g) for _ in range(3)]
            d = aggregate(b, xs)
            lhs = objective_value(b, xs)
            rhs = g.horizon_hours * (variance(d) + mean_rate(d) ** 2)
            assert lhs == pytest.approx(rhs, rel=1e-9)
