# Unit tests for the `tours` module
#
# Run with `python -m unittest test_tours`
#

import unittest

import numpy as np

import oracle
import rbm
import stopping_set
import tours
from stopping_set import StoppingSet
from tours import StatisticSpec, TourConfig, TourRecord


def record(length, completed=True, label=None):
    return TourRecord(length=length, completed=completed, stat_sum={}, next_state=None, start_label=label)


class TestTourConfig(unittest.TestCase):

    def test_validation(self):
        with self.assertRaises(ValueError):
            TourConfig(k_max=0)
        with self.assertRaises(ValueError):
            TourConfig(k_max=5, k_dyn_cap=3)
        with self.assertRaises(ValueError):
            TourConfig.dynamic(k_dyn_cap=0)

    def test_limit(self):
        self.assertEqual(TourConfig(k_max=7).limit, 7)
        cfg = TourConfig.dynamic(k_dyn_cap=1000)
        self.assertTrue(cfg.is_dynamic)
        self.assertEqual(cfg.limit, 1000)
        self.assertEqual(cfg.describe(), 'dynamic')


class TestStatistics(unittest.TestCase):

    def test_energy_gradient_layout(self):
        W = rbm.RbmParams.random(3, 2, rbm.make_rng(0))
        x = rbm.JointState([[1, 0, 1], [0, 1, 1]], [[1, 1], [0, 1]])
        spec = StatisticSpec.energy_gradient()
        values = spec.evaluate(x, W)
        self.assertEqual(values.shape, (2, spec.dimension(W)))
        self.assertEqual(spec.sup_norm(W), 11.0)
        d_w, d_v, d_h = tours.split_energy_gradient(values[1], W)
        expected = rbm.energy_gradient(x.row(1))
        np.testing.assert_array_equal(d_w, expected[0])
        np.testing.assert_array_equal(d_v, expected[1])
        np.testing.assert_array_equal(d_h, expected[2])

    def test_unit_and_custom(self):
        W = rbm.RbmParams.zeros(2, 2)
        x = rbm.JointState(np.ones((4, 2)), np.zeros((4, 2)))
        np.testing.assert_array_equal(StatisticSpec.unit().evaluate(x, W), np.ones((4, 1)))
        spec = StatisticSpec.custom('visible_sum', lambda s: s.visible.sum(axis=1), dim=1, bound=2.0)
        np.testing.assert_array_equal(spec.evaluate(x, W), np.full((4, 1), 2.0))
        self.assertEqual(spec.sup_norm(W), 2.0)


class TestSummarize(unittest.TestCase):

    def test_truncated_tours_count_as_longer(self):
        tail = tours.summarize([record(1), record(2), record(3, completed=False)])
        np.testing.assert_allclose(tail.survival, [1.0, 2 / 3, 1 / 3, 1 / 3])
        np.testing.assert_array_equal(tail.completed_counts, [0, 1, 1, 0])
        self.assertEqual(tail.xi_hat, 1.5)
        self.assertAlmostEqual(tail.completed_fraction, 2 / 3)

    def test_ccdf_frame(self):
        frame = tours.summarize([record(1), record(3)]).ccdf_frame()
        self.assertListEqual(list(frame.columns), ['k', 'count', 'p_gt_k'])
        self.assertListEqual(list(frame.k), [1, 2, 3])
        self.assertListEqual(list(frame.p_gt_k), [0.5, 0.5, 0.0])

    def test_grouped_ccdf(self):
        frame = tours.grouped_ccdf([record(1, label=3), record(2, label=3), record(1, label=7), record(4)])
        self.assertListEqual(list(frame.columns), ['label', 'k', 'count', 'p_gt_k'])
        self.assertListEqual(sorted(frame.label.unique()), [3, 7])
        self.assertTrue(tours.grouped_ccdf([record(1)]).empty)


class TestGeometricTail(unittest.TestCase):

    def test_too_few_tours(self):
        self.assertIsNone(tours.fit_geometric_tail([record(1)] * 500 + [record(2)] * 50))

    def test_recovers_rate(self):
        lengths = rbm.make_rng(1).geometric(0.5, size=20000)
        fit = tours.fit_geometric_tail([record(int(n)) for n in lengths])
        self.assertIsNotNone(fit)
        alpha, (k_first, k_last) = fit
        self.assertAlmostEqual(alpha, 0.5, delta=0.05)
        self.assertEqual(k_first, 1)
        self.assertGreater(k_last, 3)


class TestTailSlope(unittest.TestCase):

    def test_geometric_lengths(self):
        # fresh h ~ Bernoulli(1/2) at every step: p(xi > k) = 2^-k
        W = rbm.RbmParams.zeros(3, 1)
        S = StoppingSet.from_hidden_states([[1]], W)
        records, _ = tours.run_batch(W, S, TourConfig.dynamic(), [], 20000, rbm.make_rng(40))
        self.assertAlmostEqual(tours.tail_slope(records), np.log(0.5), delta=0.05)

    def test_matches_restricted_radius(self):
        scan = rbm.GibbsScan.RANDOM_SCAN
        W = rbm.RbmParams.random(4, 3, rbm.make_rng(41))
        S = StoppingSet.from_hidden_states(oracle.all_bits(3)[[1, 6]], W)
        d = oracle.collapsed_chain(W, S, scan)
        records, _ = tours.run_batch(W, S, TourConfig.dynamic(scan=scan), [], 100000, rbm.make_rng(42))
        slope = tours.tail_slope(records)
        self.assertAlmostEqual(slope, np.log(d.restricted_radius), delta=0.05)
        self.assertLessEqual(slope, np.log1p(-d.epsilon) + 0.05)

    def test_too_few_points(self):
        self.assertIsNone(tours.tail_slope([record(1)] * 50))
        self.assertIsNone(tours.tail_slope([record(1)] * 50 + [record(2)] * 40))


class TestRunTours(unittest.TestCase):

    def setUp(self):
        self.W = rbm.RbmParams.random(3, 2, rbm.make_rng(2))
        self.S = StoppingSet.from_hidden_states([[1, 0]], self.W)

    def test_full_set_tours_have_length_one(self):
        S = StoppingSet.from_hidden_states(oracle.all_bits(2), self.W)
        records, tail = tours.run_batch(self.W, S, TourConfig.dynamic(), [StatisticSpec.unit()], 200, rbm.make_rng(3))
        self.assertTrue(all(r.length == 1 and r.completed for r in records))
        np.testing.assert_array_equal(tail.survival, [1.0, 0.0])

    def test_fixed_k_one(self):
        records, tail = tours.run_batch(self.W, self.S, TourConfig(k_max=1), [], 500, rbm.make_rng(4))
        for r in records:
            self.assertEqual(r.length, 1)
            self.assertEqual(r.completed, self.S.contains(r.next_state.hidden))
            self.assertFalse(r.capped)
        self.assertEqual(tail.n_tours, 500)

    def test_starts_in_set(self):
        records, _ = tours.run_batch(self.W, self.S, TourConfig(k_max=3), [], 50, rbm.make_rng(5))
        self.assertTrue(all(r.start_index == 0 for r in records))

    def test_stat_sum_counts_visited_states(self):
        records, _ = tours.run_batch(self.W, self.S, TourConfig.dynamic(), [StatisticSpec.unit()], 300, rbm.make_rng(6))
        for r in records:
            self.assertEqual(r.stat_sum['f1'][0], r.length)

    def test_dynamic_mean_length(self):
        n = 20000
        _, tail = tours.run_batch(self.W, self.S, TourConfig.dynamic(), [], n, rbm.make_rng(7))
        expected = np.exp(oracle.exact_partition(self.W) - self.S.log_Z_S)
        self.assertEqual(tail.n_completed, n)
        self.assertLess(abs(tail.xi_hat - expected), 4 * tail.xi_std / np.sqrt(n))

    def test_survival_within_dkw_band(self):
        n = 20000
        for scan in rbm.GibbsScan:
            cfg = TourConfig.dynamic(scan=scan)
            _, tail = tours.run_batch(self.W, self.S, cfg, [], n, rbm.make_rng(8))
            exact = oracle.collapsed_chain(self.W, self.S, scan).survival
            k = min(len(exact), len(tail.survival))
            eps = np.sqrt(np.log(2 / 1e-3) / (2 * n))
            self.assertLess(np.max(np.abs(tail.survival[:k] - exact[:k])), eps)

    def test_capped_tours(self):
        # the chain almost never reaches h = (1, 1)
        W = rbm.RbmParams(np.zeros((3, 2)), np.zeros(3), [-10.0, -10.0])
        S = StoppingSet.from_hidden_states([[1, 1]], W)
        with self.assertLogs('tours', level='WARNING'):
            records, tail = tours.run_batch(W, S, TourConfig.dynamic(k_dyn_cap=1), [], 100, rbm.make_rng(9))
        self.assertGreater(tail.n_capped, 90)
        self.assertTrue(all(r.capped == (not r.completed) for r in records))

    def test_same_seed_same_tours(self):
        cfg = TourConfig.dynamic()
        for workers in (1, 2):
            a, _ = tours.run_batch(self.W, self.S, cfg, [], 300, rbm.make_rng(10), workers=workers)
            b, _ = tours.run_batch(self.W, self.S, cfg, [], 300, rbm.make_rng(10), workers=workers)
            self.assertListEqual([r.length for r in a], [r.length for r in b])
            self.assertEqual(len(a), 300)

    def test_start_labels(self):
        W = rbm.RbmParams.random(4, 3, rbm.make_rng(11))
        data = rbm.make_rng(12).integers(0, 2, size=(20, 4))
        labels = np.arange(20) % 5
        S = stopping_set.build(data, W, 1, rbm.make_rng(13))
        records, _ = tours.run_batch(W, S, TourConfig(k_max=2), [], 100, rbm.make_rng(14), labels=labels)
        for r in records:
            self.assertEqual(r.start_label, labels[S.origins[r.start_index]])

    def test_run_tour_from_given_state(self):
        start = rbm.JointState([1, 1, 0], [0, 1])
        r = tours.run_tour(self.W, self.S, TourConfig(k_max=5), [StatisticSpec.unit()], rbm.make_rng(15), start=start)
        self.assertIsNone(r.start_index)
        self.assertGreaterEqual(r.length, 1)
        self.assertLessEqual(r.length, 5)


if __name__ == '__main__':
    unittest.main()
