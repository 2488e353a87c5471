# Unit tests for the `mclv` command line
#
# Run with `python -m unittest test_cli`
#

import os
import tempfile
import unittest

import numpy as np
import pandas as pd
import yaml

import data_utils
import mclv
import oracle
import rbm
import trainer


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.csv = os.path.join(self.tmp.name, 'train.csv')
        bits = rbm.make_rng(0).integers(0, 2, size=(20, 4))
        pd.DataFrame(bits, columns=[f"v{i}" for i in range(4)]).to_csv(self.csv, index=False)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def checkpoint(self, W):
        return str(trainer.save_checkpoint(W, self.path('params.rbm')))

    def manifest(self, out):
        with open(os.path.join(out, 'manifest.yaml')) as f:
            return yaml.safe_load(f)


class TestVerify(CliTestCase):

    def test_default_models_pass(self):
        out = self.path('verify')
        self.assertEqual(mclv.main(['verify', '--out', out, '--logging', 'ERROR']), mclv.EXIT_OK)
        report = pd.read_csv(os.path.join(out, 'verify.csv'))
        self.assertTrue(report.passed.all())
        self.assertEqual(len(report), 5 * 6)
        gaps = pd.read_csv(os.path.join(out, 'verify_gaps.csv'))
        self.assertListEqual(list(gaps.columns), ['seed', 'spectral_gap_full', 'spectral_gap_collapsed'])
        self.assertTrue((gaps.spectral_gap_collapsed > 0).all())
        self.assertEqual(self.manifest(out)['results']['failures'], [])

    def test_uniform_exits_fail(self):
        out = self.path('broken')
        code = mclv.main(['verify', '--out', out, '--seeds', '0,1', '--break-collapsed', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_VERIFY)
        self.assertIn('collapsed_stationary', self.manifest(out)['results']['failures'])

    def test_bad_seeds(self):
        code = mclv.main(['verify', '--out', self.path('v'), '--seeds', 'a,b', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_USAGE)


class TestTrain(CliTestCase):

    def run_train(self, out):
        return mclv.main(['train', '--csv', self.csv, '--out', out, '--estimator', 'cd', '--epochs', '2',
                          '--warmup', '0', '--hidden', '2', '--batch', '5', '--logging', 'ERROR'])

    def test_outputs(self):
        out = self.path('a')
        self.assertEqual(self.run_train(out), mclv.EXIT_OK)
        log = pd.read_csv(os.path.join(out, 'train_log.csv'))
        self.assertEqual(len(log), 2)
        self.assertListEqual(list(log.columns), trainer.LOG_COLUMNS)
        W = trainer.load_checkpoint(os.path.join(out, 'params.rbm'))
        self.assertEqual((W.n_visible, W.n_hidden), (4, 2))
        manifest = self.manifest(out)
        self.assertEqual(manifest['command'], 'train')
        self.assertEqual(manifest['config']['epochs'], 2)
        self.assertEqual(manifest['artifacts']['params.rbm'], mclv.file_digest(os.path.join(out, 'params.rbm')))

    def test_rerun_is_identical(self):
        self.assertEqual(self.run_train(self.path('a')), mclv.EXIT_OK)
        self.assertEqual(self.run_train(self.path('b')), mclv.EXIT_OK)
        for name in ('train_log.csv', 'params.rbm'):
            self.assertEqual(mclv.file_digest(self.path('a', name)), mclv.file_digest(self.path('b', name)))

    def test_rebuild_cadence_flag(self):
        out = self.path('rebuild')
        code = mclv.main(['train', '--csv', self.csv, '--out', out, '--estimator', 'lvs', '--k', '3', '--epochs', '1',
                          '--warmup', '0', '--hidden', '3', '--batch', '5', '--rebuild-every', '2', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_OK)
        self.assertEqual(self.manifest(out)['config']['rebuild_every'], 2)
        code = mclv.main(['train', '--csv', self.csv, '--out', out, '--rebuild-every', '0', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_USAGE)

    def test_missing_data(self):
        code = mclv.main(['train', '--csv', self.path('none.csv'), '--out', self.path('x'), '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_DATA)


class TestCompare(CliTestCase):

    def setUp(self):
        super().setUp()
        rng = rbm.make_rng(3)
        self.data_dir = self.path('mnist')
        os.mkdir(self.data_dir)
        for prefix, n in (('train', 30), ('t10k', 10)):
            images = rng.integers(0, 2, size=(n, 2, 3)) * 255
            data_utils.write_idx(os.path.join(self.data_dir, f"{prefix}-images-idx3-ubyte"), images)
            data_utils.write_idx(os.path.join(self.data_dir, f"{prefix}-labels-idx1-ubyte"), rng.integers(0, 10, size=n))

    def test_paired_runs(self):
        out = self.path('compare')
        code = mclv.main(['compare', '--data-dir', self.data_dir, '--out', out, '--hidden', '2', '--epochs', '2',
                          '--warmup', '1', '--batch', '10', '--runs', '2', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_OK)
        frame = pd.read_csv(os.path.join(out, 'comparison.csv'))
        self.assertListEqual(list(frame.columns), ['seed', 'estimator', 'test_ll'])
        self.assertListEqual(sorted(frame.estimator.unique()), ['cd-1', 'lvs-1'])
        self.assertListEqual(sorted(frame.seed.unique()), [0, 1])
        manifest = self.manifest(out)
        self.assertEqual(manifest['command'], 'compare')
        self.assertEqual(manifest['config']['limit'], 5000)
        self.assertIn('p_value', manifest['results'])
        self.assertAlmostEqual(manifest['results']['mean_test_ll']['cd-1'],
                               frame[frame.estimator == 'cd-1'].test_ll.mean(), places=9)

    def test_defaults(self):
        parser = mclv.make_base_arg_parser('test')
        conf = mclv.resolve(parser.parse_args(['compare']))
        self.assertEqual((conf['hidden'], conf['epochs'], conf['limit'], conf['runs']), (16, 25, 5000, 3))
        conf = mclv.resolve(parser.parse_args(['compare', '--hidden', '4']))
        self.assertEqual(conf['hidden'], 4)
        self.assertEqual(mclv.resolve(parser.parse_args(['train']))['hidden'], mclv.DEFAULTS['hidden'])

    def test_needs_test_set(self):
        code = mclv.main(['compare', '--csv', self.csv, '--out', self.path('x'), '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_USAGE)


class TestTours(CliTestCase):

    def test_full_stopping_set(self):
        # one hidden unit: the stopping set built from 20 examples holds both hidden states
        checkpoint = self.checkpoint(rbm.RbmParams.zeros(4, 1))
        out = self.path('tours')
        code = mclv.main(['tours', '--csv', self.csv, '--checkpoint', checkpoint, '--out', out,
                          '--tours', '300', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_OK)
        ccdf = pd.read_csv(os.path.join(out, 'ccdf_m1.csv'))
        self.assertListEqual(list(ccdf.k), [1])
        self.assertListEqual(list(ccdf.p_gt_k), [0.0])
        self.assertEqual(self.manifest(out)['results']['m1']['p_xi_eq_1'], 1.0)

    def test_m_sweep(self):
        # 256 hidden states: even m = 7 on 20 examples leaves proper subsets
        checkpoint = self.checkpoint(rbm.RbmParams.random(4, 8, rbm.make_rng(1)))
        ordered = 0
        for seed in range(3):
            out = self.path(f"sweep{seed}")
            code = mclv.main(['tours', '--csv', self.csv, '--checkpoint', checkpoint, '--out', out, '--tours', '2000',
                              '--m-sweep', '1,4,7', '--k', '5', '--seed', str(seed), '--logging', 'ERROR'])
            self.assertEqual(code, mclv.EXIT_OK)
            results = self.manifest(out)['results']
            for m in (1, 4, 7):
                self.assertTrue(os.path.exists(os.path.join(out, f"ccdf_m{m}.csv")))
                self.assertLess(results[f"m{m}"]['stopping_set_size'], 2 ** 8)
            p_one = [results[f"m{m}"]['p_xi_eq_1'] for m in (1, 4, 7)]
            ordered += p_one[0] <= p_one[1] <= p_one[2]
        self.assertGreaterEqual(ordered, 2)

    def test_conflicting_k(self):
        checkpoint = self.checkpoint(rbm.RbmParams.zeros(4, 1))
        code = mclv.main(['tours', '--csv', self.csv, '--checkpoint', checkpoint, '--out', self.path('x'),
                          '--k', '3', '--dynamic-k', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_USAGE)

    def test_missing_checkpoint(self):
        code = mclv.main(['tours', '--csv', self.csv, '--checkpoint', self.path('missing.rbm'),
                          '--out', self.path('x'), '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_DATA)

    def test_wrong_visible_units(self):
        checkpoint = self.checkpoint(rbm.RbmParams.zeros(5, 1))
        code = mclv.main(['tours', '--csv', self.csv, '--checkpoint', checkpoint, '--out', self.path('x'),
                          '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_DATA)


class TestEstimateZ(CliTestCase):

    def test_full_stopping_set_is_exact(self):
        W = rbm.RbmParams(np.zeros((4, 1)), [0.3, -0.2, 0.1, 0.0], [0.5])
        checkpoint = self.checkpoint(W)
        out = self.path('z')
        code = mclv.main(['estimate-z', '--csv', self.csv, '--checkpoint', checkpoint, '--out', out,
                          '--tours', '100', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_OK)
        row = pd.read_csv(os.path.join(out, 'estimate_z.csv')).iloc[0]
        self.assertLess(row.relative_error, 1e-9)
        self.assertAlmostEqual(row.log_Z, oracle.exact_partition(W), places=10)
        self.assertEqual(row.xi_hat, 1.0)


class TestReport(CliTestCase):

    def test_cd_step_matches_tour_step(self):
        checkpoint = self.checkpoint(rbm.RbmParams.random(4, 3, rbm.make_rng(2)))
        out = self.path('report')
        code = mclv.main(['report', '--csv', self.csv, '--checkpoint', checkpoint, '--out', out,
                          '--tours', '500', '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_OK)
        results = self.manifest(out)['results']
        self.assertEqual(results['cd_tour_agreement'], 1.0)
        self.assertGreaterEqual(results['length_biased_mean'], results['plain_mean'])
        biased = pd.read_csv(os.path.join(out, 'tour_lengths_length_biased.csv'))
        self.assertListEqual(list(biased.columns), ['k', 'count', 'probability'])


class TestConfig(CliTestCase):

    def write_config(self, content):
        path = self.path('config.yaml')
        with open(path, 'w') as f:
            f.write(content)
        return path

    def test_precedence(self):
        config = self.write_config('epochs: 7\nlr: 0.5\nk-dyn-cap: 99\n')
        parser = mclv.make_base_arg_parser('test')
        conf = mclv.resolve(parser.parse_args(['train', '--config', config, '--epochs', '3']))
        self.assertEqual(conf['epochs'], 3)
        self.assertEqual(conf['lr'], 0.5)
        self.assertEqual(conf['k_dyn_cap'], 99)
        self.assertEqual(conf['batch'], mclv.DEFAULTS['batch'])

    def test_unknown_key(self):
        config = self.write_config('epochz: 7\n')
        code = mclv.main(['train', '--csv', self.csv, '--config', config, '--out', self.path('x'),
                          '--logging', 'ERROR'])
        self.assertEqual(code, mclv.EXIT_USAGE)

    def test_bad_flag(self):
        with self.assertRaises(SystemExit) as caught:
            mclv.main(['train', '--bogus'])
        self.assertEqual(caught.exception.code, 2)


if __name__ == '__main__':
    unittest.main()
