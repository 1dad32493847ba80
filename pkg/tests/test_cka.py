import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from ckarank import cka
from ckarank.cka import ActivationSet, CkaProfile, Regime
from ckarank.errors import DegenerateInputError, ShapeError


def hsic_explicit(x, y):
    """Biased HSIC with explicit centering matrix H = I - 11^T / n."""
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    kx = x @ x.T
    ky = y @ y.T
    return np.trace(kx @ h @ ky @ h) / (n - 1) ** 2


def cka_explicit(x, y):
    return hsic_explicit(x, y) / np.sqrt(hsic_explicit(x, x) * hsic_explicit(y, y))


def test_self_similarity():
    x = np.random.default_rng(0).standard_normal((20, 5))
    assert cka.linear_cka(x, x).rho == pytest.approx(1.0, abs=1e-12)


def test_rotation_invariance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 6))
    q = ortho_group.rvs(6, random_state=2)
    assert cka.linear_cka(x, x @ q).rho == pytest.approx(1.0, abs=1e-9)


def test_hand_example_against_explicit_hsic():
    x = np.array([[1.0], [-1.0], [0.0]])
    y = np.array([[2.0], [0.0], [-2.0]])
    out = cka.linear_cka(x, y)
    # Already centred: y^T x = 2, x^T x = 2, y^T y = 8 -> rho = 4 / (2 * 8).
    assert out.rho == pytest.approx(0.25, abs=1e-15)
    assert out.rho == pytest.approx(cka_explicit(x, y), abs=1e-12)
    assert out.hsic_xy == pytest.approx(hsic_explicit(x, y), abs=1e-12)
    assert out.hsic_xx == pytest.approx(hsic_explicit(x, x), abs=1e-12)
    assert out.hsic_yy == pytest.approx(hsic_explicit(y, y), abs=1e-12)


def test_breakdown_identity():
    rng = np.random.default_rng(3)
    out = cka.linear_cka(rng.standard_normal((15, 4)), rng.standard_normal((15, 7)))
    assert out.rho == pytest.approx(out.hsic_xy / np.sqrt(out.hsic_xx * out.hsic_yy), abs=1e-12)


def test_constant_input_is_degenerate():
    with pytest.raises(DegenerateInputError):
        cka.linear_cka(np.ones((5, 2)), np.random.default_rng(0).standard_normal((5, 2)))


def test_sample_mismatch():
    with pytest.raises(ShapeError):
        cka.linear_cka(np.zeros((4, 2)), np.zeros((5, 2)))


def test_needs_two_samples():
    with pytest.raises(ShapeError):
        cka.linear_cka(np.zeros((1, 2)), np.zeros((1, 2)))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(3, 25), p1=st.integers(1, 8), p2=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_symmetry_bounds_and_two_formula_equivalence(n, p1, p2, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p1))
    y = rng.standard_normal((n, p2)) + 0.5 * x[:, :1]
    a = cka.linear_cka(x, y).rho
    b = cka.linear_cka(y, x).rho
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(cka_explicit(x, y), abs=1e-10)


class TestProfile:
    def make_set(self, rng, layers=3, n=12, p=4):
        return ActivationSet([rng.standard_normal((n, p)) for _ in range(layers)])

    def test_same_sets_give_ones(self):
        s = self.make_set(np.random.default_rng(0))
        np.testing.assert_allclose(cka.profile(s, s).rho_per_layer, 1.0, atol=1e-12)

    def test_rotated_then_noise_layers(self):
        rng = np.random.default_rng(1)
        x1, x2 = rng.standard_normal((200, 5)), rng.standard_normal((200, 5))
        q = ortho_group.rvs(5, random_state=3)
        src = ActivationSet([x1, x2])
        tgt = ActivationSet([x1 @ q, rng.standard_normal((200, 5))])
        rho = cka.profile(src, tgt).rho_per_layer
        assert rho[0] == pytest.approx(1.0, abs=1e-9)
        # Independent Gaussian features: E[rho] ~ p/n-scale, far below 0.2 for n=200.
        assert rho[1] < 0.2

    def test_layer_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            cka.profile(self.make_set(rng, 3), self.make_set(rng, 2))

    def test_activation_set_checks_rows(self):
        with pytest.raises(ShapeError):
            ActivationSet([np.zeros((3, 2)), np.zeros((4, 2))])

    def test_one_based_layer_access(self):
        s = ActivationSet([np.zeros((2, 1)), np.ones((2, 1))])
        assert s.layer(2)[0, 0] == 1.0


class TestProfileStats:
    def test_identical_profiles_zero_std(self):
        p = CkaProfile([0.3, 0.5, 0.9])
        st_ = cka.profile_stats([p, p, p])
        np.testing.assert_array_equal(st_.std_per_layer, 0.0)
        assert st_.seed_count == 3

    def test_two_profile_sample_std(self):
        st_ = cka.profile_stats([CkaProfile([0.4]), CkaProfile([0.6])])
        assert st_.mean_per_layer[0] == pytest.approx(0.5)
        # sqrt(((0.1)^2 + (0.1)^2) / (2 - 1))
        assert st_.std_per_layer[0] == pytest.approx(np.sqrt(0.02), abs=1e-12)

    def test_needs_two(self):
        with pytest.raises(ShapeError):
            cka.profile_stats([CkaProfile([0.5])])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            cka.profile_stats([CkaProfile([0.5]), CkaProfile([0.5, 0.6])])


class TestClassifyRegimes:
    @pytest.mark.parametrize("rho, label", [(0.38, Regime.SHALLOW), (0.60, Regime.MIDDLE),
                                            (0.81, Regime.DEEP), (0.5, Regime.MIDDLE),
                                            (0.7, Regime.DEEP)])
    def test_thresholds(self, rho, label):
        (out,) = cka.classify_regimes(CkaProfile([rho]), 0.5, 0.7)
        assert out.label is label
        assert (out.lower_threshold, out.upper_threshold) == (0.5, 0.7)

    def test_threshold_order(self):
        with pytest.raises(ValueError):
            cka.classify_regimes(CkaProfile([0.5]), 0.7, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
    def test_partition_is_monotone(self, values):
        labels = cka.classify_regimes(CkaProfile(values))
        assert len(labels) == len(values)
        order = {Regime.SHALLOW: 0, Regime.MIDDLE: 1, Regime.DEEP: 2}
        pairs = sorted(zip(values, (order[lab.label] for lab in labels)))
        ranks = [r for _, r in pairs]
        assert ranks == sorted(ranks)
