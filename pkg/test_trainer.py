# Unit tests for the `trainer` module
#
# Run with `python -m unittest test_trainer`
#

import os
import tempfile
import unittest
from unittest import mock

import numpy as np

import data_utils
import estimators
import rbm
import stopping_set
import trainer
from stopping_set import EmptyDataError
from trainer import Estimator, TrainConfig


def small_data(seed=0, n=20, n_visible=6):
    return rbm.make_rng(seed).integers(0, 2, size=(n, n_visible), dtype=np.uint8)


class TestSchedule(unittest.TestCase):

    def test_robbins_monro(self):
        self.assertEqual(trainer.robbins_monro(0.1, 50.0, 0), 0.1)
        self.assertAlmostEqual(trainer.robbins_monro(0.1, 50.0, 50), 0.05)
        self.assertAlmostEqual(trainer.robbins_monro(1.0, 1.0, 3), 0.25)


class TestInitParams(unittest.TestCase):

    def test_visible_bias_from_pixel_means(self):
        data = np.array([[1, 0, 1], [1, 0, 0]])
        W = trainer.init_params(data, 5, rbm.make_rng(0))
        # p = 1 and p = 0 are clamped to 1 - 1/4 and 1/4
        np.testing.assert_allclose(W.visible_bias, [np.log(3.0), -np.log(3.0), 0.0], atol=1e-12)
        np.testing.assert_array_equal(W.hidden_bias, np.zeros(5))
        self.assertLessEqual(np.abs(W.weights).max(), 0.1 / np.sqrt(8))
        self.assertEqual(W.weights.shape, (3, 5))

    def test_empty_data(self):
        with self.assertRaises(EmptyDataError):
            trainer.init_params(np.zeros((0, 3)), 2, rbm.make_rng(0))


class TestConfig(unittest.TestCase):

    def test_validation(self):
        with self.assertRaises(ValueError):
            TrainConfig(lr0=-1.0)
        with self.assertRaises(ValueError):
            TrainConfig(epochs=2, warmup_epochs=3)
        with self.assertRaises(ValueError):
            TrainConfig(estimator=Estimator.CD, k=None)
        with self.assertRaises(ValueError):
            TrainConfig(estimator='bogus')

    def test_label(self):
        self.assertEqual(TrainConfig(estimator='lvs', k=None).label(), 'lvs-dyn')
        self.assertEqual(TrainConfig(estimator='pcd', k=5).label(), 'pcd-5')
        self.assertEqual(TrainConfig(estimator='exact').label(), 'exact')
        self.assertEqual(TrainConfig(estimator='cd').to_dict()['estimator'], 'cd')


class TestEvaluate(unittest.TestCase):

    def test_zero_params(self):
        self.assertAlmostEqual(trainer.evaluate(rbm.RbmParams.zeros(6, 3), small_data()), -6 * np.log(2), places=12)

    def test_uniform_over_data(self):
        W = rbm.RbmParams.random(4, 3, rbm.make_rng(1))
        all_visible = (np.arange(16)[:, None] >> np.arange(3, -1, -1)) & 1
        # the model probabilities of every visible vector sum to one
        log_p = np.array([trainer.evaluate(W, v[None, :]) for v in all_visible])
        self.assertAlmostEqual(np.exp(log_p).sum(), 1.0, places=10)


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'params.rbm')

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        W = rbm.RbmParams.random(5, 3, rbm.make_rng(2))
        trainer.save_checkpoint(W, self.path)
        with open(self.path, 'rb') as f:
            content = f.read()
        self.assertEqual(content[:4], b'RBM1')
        self.assertEqual(len(content), 12 + 8 * (15 + 5 + 3))
        loaded = trainer.load_checkpoint(self.path)
        self.assertEqual(loaded.fingerprint(), W.fingerprint())

    def test_bad_magic(self):
        with open(self.path, 'wb') as f:
            f.write(b'RBM2' + bytes(8))
        with self.assertRaises(data_utils.BadMagic):
            trainer.load_checkpoint(self.path)

    def test_truncated(self):
        trainer.save_checkpoint(rbm.RbmParams.zeros(2, 2), self.path)
        with open(self.path, 'rb') as f:
            content = f.read()
        with open(self.path, 'wb') as f:
            f.write(content[:-8])
        with self.assertRaises(data_utils.TruncatedFile):
            trainer.load_checkpoint(self.path)

    def test_missing(self):
        with self.assertRaises(FileNotFoundError):
            trainer.load_checkpoint(self.path)


class TestTrain(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_zero_learning_rate(self):
        data = small_data()
        cfg = TrainConfig(estimator=Estimator.CD, epochs=2, warmup_epochs=0, batch_size=5, lr0=0.0,
                          n_hidden=3, seed=7)
        params, log = trainer.train(data, None, cfg)
        self.assertEqual(params.fingerprint(), trainer.init_params(data, 3, rbm.make_rng(7)).fingerprint())
        self.assertEqual(len(log), 2)

    def test_exact_gradient_ascent(self):
        data = small_data(1)
        cfg = TrainConfig(estimator=Estimator.EXACT, epochs=15, warmup_epochs=0, batch_size=len(data),
                          lr0=0.05, tau=1e9, n_hidden=4, seed=0)
        _, log = trainer.train(data, data, cfg)
        train_ll = [row.train_ll for row in log]
        self.assertTrue(all(b >= a - 1e-12 for a, b in zip(train_ll, train_ll[1:])))
        self.assertEqual(log[-1].train_ll, log[-1].test_ll)

    def test_same_seed_same_run(self):
        data = small_data(2)
        cfg = TrainConfig(estimator=Estimator.LVS, k=3, epochs=3, warmup_epochs=1, batch_size=5, n_hidden=3, seed=4)
        a = trainer.train(data, None, cfg)
        b = trainer.train(data, None, cfg)
        self.assertEqual(a.params.fingerprint(), b.params.fingerprint())
        self.assertTrue(a.log_frame().equals(b.log_frame()))

    def test_warmup_rows(self):
        data = small_data(3)
        cfg = TrainConfig(estimator=Estimator.LVS, k=1, epochs=3, warmup_epochs=2, batch_size=10, n_hidden=3)
        result = trainer.train(data, None, cfg)
        self.assertListEqual([row.estimator for row in result.log], ['cd-1', 'cd-1', 'lvs-1'])
        self.assertIsNone(result.log[0].stopping_set_size)
        self.assertGreater(result.log[2].stopping_set_size, 0)
        self.assertIsNotNone(result.log[2].xi_hat)

    def test_eval_every(self):
        cfg = TrainConfig(estimator=Estimator.PCD, k=1, epochs=5, warmup_epochs=0, batch_size=10, n_hidden=2,
                          eval_every=2)
        result = trainer.train(small_data(4), None, cfg)
        self.assertListEqual([row.epoch for row in result.log], [2, 4, 5])

    def test_stopping_set_follows_parameters(self):
        data = small_data(11, n=40)
        cfg = TrainConfig(estimator=Estimator.LVS, k=3, epochs=1, warmup_epochs=0, batch_size=5, n_hidden=7,
                          tours_per_batch=50, seed=3)
        stale = []
        real = estimators.lvs_gradient

        def recording(rows, W, S, *args, **kwargs):
            stale.append(S.is_stale(W))
            return real(rows, W, S, *args, **kwargs)

        with mock.patch('estimators.lvs_gradient', side_effect=recording):
            with self.assertNoLogs('stopping_set', level='WARNING'):
                result = trainer.train(data, None, cfg)
        self.assertEqual(len(stale), 8)
        self.assertFalse(any(stale))
        self.assertGreater(result.updates, 1)

    def test_rebuild_cadence(self):
        data = small_data(12, n=40)
        base = dict(estimator=Estimator.LVS, k=3, epochs=2, warmup_epochs=0, batch_size=5, n_hidden=7,
                    tours_per_batch=50)
        with mock.patch('stopping_set.build', wraps=stopping_set.build) as build:
            trainer.train(data, None, TrainConfig(**base))
        self.assertEqual(build.call_count, 2)
        with mock.patch('stopping_set.build', wraps=stopping_set.build) as build:
            trainer.train(data, None, TrainConfig(rebuild_every=3, **base))
        # batches 0, 3 and 6 of each epoch
        self.assertEqual(build.call_count, 6)
        with self.assertRaises(ValueError):
            TrainConfig(rebuild_every=0)

    def test_skipped_updates(self):
        # 2^20 hidden states; one step from the set almost never lands back in it
        data = small_data(5, n=10, n_visible=3)
        cfg = TrainConfig(estimator=Estimator.LVS, k=1, epochs=1, warmup_epochs=0, batch_size=5, lr0=0.0)
        with self.assertLogs('trainer', level='WARNING'):
            result = trainer.train(data, None, cfg, W=rbm.RbmParams.zeros(3, 20))
        self.assertEqual(result.skipped_updates, 2)
        self.assertEqual(result.updates, 0)
        self.assertEqual(result.log[0].skipped_updates, 2)

    def test_non_finite_abort(self):
        cfg = TrainConfig(estimator=Estimator.CD, epochs=1, warmup_epochs=0, batch_size=5, lr0=np.inf, n_hidden=2)
        with np.errstate(invalid='ignore', over='ignore'):
            with self.assertRaises(trainer.NonFiniteParams) as caught:
                trainer.train(small_data(6), None, cfg, dump_dir=self.tmp.name)
        self.assertTrue(os.path.exists(caught.exception.dump_path))
        dump = np.load(caught.exception.dump_path)
        self.assertTrue(np.isfinite(dump['weights']).all())

    def test_log_frame(self):
        cfg = TrainConfig(estimator=Estimator.CD, epochs=1, warmup_epochs=0, batch_size=10, n_hidden=2)
        result = trainer.train(small_data(7), small_data(8), cfg)
        self.assertListEqual(list(result.log_frame().columns), trainer.LOG_COLUMNS)
        self.assertIn('wall_time', result.log_frame(timings=True).columns)

    def test_empty_data(self):
        with self.assertRaises(EmptyDataError):
            trainer.train(np.zeros((0, 4)), None, TrainConfig())


class TestComparison(unittest.TestCase):

    def test_paired_comparison(self):
        data = small_data(9, n_visible=4)
        configs = {
            'exact': TrainConfig(estimator=Estimator.EXACT, epochs=3, warmup_epochs=0, batch_size=10, n_hidden=2),
            'cd-1': TrainConfig(estimator=Estimator.CD, epochs=3, warmup_epochs=0, batch_size=10, n_hidden=2),
        }
        comparison = trainer.reduced_scale_comparison(data, small_data(10, n_visible=4), configs, [0, 1, 2])
        self.assertEqual(len(comparison.frame), 6)
        self.assertListEqual(sorted(comparison.frame.estimator.unique()), ['cd-1', 'exact'])
        self.assertTrue(np.isfinite(comparison.mean_difference))

    def test_needs_two_seeds(self):
        with self.assertRaises(ValueError):
            trainer.reduced_scale_comparison(small_data(), small_data(), {'a': TrainConfig()}, [0])


if __name__ == '__main__':
    unittest.main()
