import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from ckarank.experiments.stats import holm_bonferroni, paired_t_test


def student_t_two_sided_p(t, dof):
    """Tail probability by integrating the Student t density directly."""
    c = math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2))
    tail, _ = quad(lambda x: c * (1 + x * x / dof) ** (-(dof + 1) / 2), abs(t), np.inf)
    return 2 * tail


class TestPairedT:
    def test_worked_example(self):
        res = paired_t_test([2, 4, 6])
        assert res.mean == 4.0
        assert res.std == pytest.approx(2.0)
        assert res.t == pytest.approx(4 / (2 / math.sqrt(3)), abs=1e-12)
        assert res.t == pytest.approx(3.464, abs=1e-3)
        assert res.p == pytest.approx(0.0742, abs=1e-3)
        assert res.p == pytest.approx(student_t_two_sided_p(res.t, 2), abs=1e-9)
        # t_{0.975, 2} = 4.302653 from tables.
        half = 4.302653 * 2 / math.sqrt(3)
        assert res.ci95 == (pytest.approx(4 - half, abs=1e-5), pytest.approx(4 + half, abs=1e-5))

    def test_zero_variance(self):
        res = paired_t_test([1, 1, 1, 1, 1])
        assert res.degenerate and res.mean == 1.0 and res.p == 0.0
        zero = paired_t_test([0.0, 0.0])
        assert zero.degenerate and zero.p == 1.0

    def test_zero_mean(self):
        res = paired_t_test([1, -1])
        assert res.t == 0.0
        assert res.p == pytest.approx(1.0)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=10).filter(lambda v: np.std(v) > 1e-3))
    def test_p_matches_density_integral(self, deltas):
        res = paired_t_test(deltas)
        assert 0 <= res.p <= 1
        assert res.p == pytest.approx(student_t_two_sided_p(res.t, len(deltas) - 1), abs=1e-7)
        assert res.ci95[0] <= res.mean <= res.ci95[1]


class TestHolm:
    def test_single(self):
        assert holm_bonferroni([0.01], 0.05) == ([True], [0.01])

    def test_step_down_example(self):
        reject, adj = holm_bonferroni([0.01, 0.04, 0.03], 0.05)
        assert reject == [True, False, False]
        assert adj == pytest.approx([0.03, 0.06, 0.06], abs=1e-15)

    def test_all_ones(self):
        reject, adj = holm_bonferroni([1.0, 1.0, 1.0])
        assert reject == [False] * 3
        assert adj == [1.0] * 3

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            holm_bonferroni([0.1], 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0.001, 0.5))
    def test_monotone_and_consistent(self, p, alpha):
        reject, adj = holm_bonferroni(p, alpha)
        order = np.argsort(p, kind="stable")
        sorted_adj = np.asarray(adj)[order]
        assert np.all(np.diff(sorted_adj) >= 0)
        assert all(a >= q for a, q in zip(adj, p))
        # Rejections are exactly the hypotheses whose adjusted p is <= alpha.
        assert reject == [a <= alpha for a in adj]
