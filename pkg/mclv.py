"""
Command line entry point: train, compare, tours, estimate-z, verify and report.

Every command writes its outputs plus a ``manifest.yaml`` into ``--out``.
Exit codes: 0 success, 1 failed run (non-finite parameters or no completed tours),
2 usage error, 3 data error, 4 verification failure.
"""
import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

import data_utils
import estimators
import oracle
import rbm
import settings
import stopping_set
import tours
import trainer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_VERIFY = 4

# values used when neither a flag nor the config file sets a key
DEFAULTS = {
    'seed': settings.DEFAULT_SEED,
    'out': str(settings.OUT_DIR),
    'threads': settings.THREADS,
    'data_dir': str(settings.DATA_DIR),
    'csv': None,
    'test_csv': None,
    'label_column': None,
    'binarize': data_utils.Binarization.THRESHOLD.value,
    'split': None,
    'limit': None,
    'checkpoint': None,
    'estimator': trainer.Estimator.LVS.value,
    'k': None,
    'dynamic_k': False,
    'k_dyn_cap': settings.K_DYN_CAP,
    'm': settings.M,
    'm_sweep': None,
    'lr': settings.LEARNING_RATE,
    'tau': settings.RM_TAU,
    'epochs': settings.EPOCHS,
    'warmup': settings.WARMUP_EPOCHS,
    'batch': settings.BATCH_SIZE,
    'hidden': settings.HIDDEN_UNITS,
    'eval_every': 1,
    'rebuild_every': None,
    'runs': 3,
    'tours': 10000,
    'seeds': '0,1,2,3,4',
    'visible_units': 4,
    'hidden_units': 3,
    'break_collapsed': False,
}

# per-command overrides of DEFAULTS
COMMAND_DEFAULTS = {
    'verify': {'tours': 100000},
    'compare': {'hidden': 16, 'epochs': 25, 'limit': 5000},
}

# verify tolerances
STATIONARY_TOL = 1e-9
DETAILED_BALANCE_TOL = 1e-9
KAC_TOL = 1e-8
TAIL_SLOPE_TOL = 0.05
FD_STEP = 1e-5
FD_TOL = 1e-6


class UsageError(ValueError):
    pass


class VerificationFailed(Exception):
    def __init__(self, failures: list):
        super().__init__(', '.join(failures))
        self.failures = failures


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as f:
            config = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise UsageError(f"Config file not found: {path}")
    except yaml.YAMLError as e:
        raise UsageError(f"Could not parse {path}: {e}")
    if not isinstance(config, dict):
        raise UsageError(f"{path} must hold a mapping of option names to values")
    return {key.replace('-', '_'): value for key, value in config.items()}


def resolve(args: argparse.Namespace) -> dict:
    """Flags over config file over the command's defaults over DEFAULTS."""
    config = load_config(args.config)
    unknown = set(config) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"Unknown config keys: {', '.join(sorted(unknown))}")
    defaults = {**DEFAULTS, **COMMAND_DEFAULTS.get(getattr(args, 'command', None), {})}
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in config:
            resolved[key] = config[key]
        else:
            resolved[key] = default
    if resolved['k'] is not None and resolved['dynamic_k']:
        raise UsageError("--k and --dynamic-k are mutually exclusive")
    return resolved


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, artifacts: list,
                   results: dict = None, argv: list = None) -> Path:
    '''
    Writes manifest.yaml: the command, the resolved config, SHA-256 digests of the
    inputs and of every artifact, and any scalar results.
    '''
    manifest = {
        'command': command,
        'argv': list(sys.argv[1:] if argv is None else argv),
        'config': config,
        'inputs': inputs,
        'artifacts': {Path(p).name: file_digest(p) for p in artifacts},
        'results': results or {},
    }
    path = out_dir / 'manifest.yaml'
    with open(path, 'w') as f:
        yaml.safe_dump(_plain(manifest), f, sort_keys=False)
    logger.info(f"Wrote manifest to {path}")
    return path


def _out_dir(conf: dict) -> Path:
    out = Path(conf['out'])
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_data(conf: dict) -> tuple:
    """(train, test) datasets from --csv or the MNIST directory; test may be None."""
    if conf['csv']:
        train = data_utils.load_csv(conf['csv'], conf['label_column'])
        test = data_utils.load_csv(conf['test_csv'], conf['label_column']) if conf['test_csv'] else None
        if conf['split']:
            train, test = data_utils.split(train if test is None else data_utils.concat(train, test), int(conf['split']))
    else:
        train, test = data_utils.load_mnist(
            conf['data_dir'], data_utils.Binarization(conf['binarize']), conf['seed'],
            n_train=int(conf['split']) if conf['split'] else None,
        )
    if conf['limit']:
        train = data_utils.subset(train, int(conf['limit']))
    return train, test


def _load_model(conf: dict, train: data_utils.Dataset) -> rbm.RbmParams:
    if not conf['checkpoint']:
        raise UsageError("--checkpoint is required")
    W = trainer.load_checkpoint(conf['checkpoint'])
    if W.n_visible != train.n_visible:
        raise rbm.DimensionMismatch(f"Checkpoint has {W.n_visible} visible units, data has {train.n_visible}")
    return W


def _tour_config(conf: dict, dynamic_by_default: bool) -> tours.TourConfig:
    if conf['k'] is not None:
        return tours.TourConfig(k_max=int(conf['k']), k_dyn_cap=max(int(conf['k_dyn_cap']), int(conf['k'])))
    if conf['dynamic_k'] or dynamic_by_default:
        return tours.TourConfig.dynamic(int(conf['k_dyn_cap']))
    return tours.TourConfig(k_max=1)


def _profile(S: stopping_set.StoppingSet, enabled: bool):
    if enabled:
        for component, n_bytes in S.profile_memory().items():
            logger.info(f"Stopping set memory, {component}: {n_bytes} bytes")


def _train_config(conf: dict, estimator: str, dynamic: bool) -> trainer.TrainConfig:
    k = None if dynamic else (int(conf['k']) if conf['k'] is not None else 1)
    warmup = int(conf['warmup'])
    if warmup > int(conf['epochs']):
        logger.warning(f"Warm-up of {warmup} epochs cut to the {conf['epochs']} training epochs")
        warmup = int(conf['epochs'])
    try:
        return trainer.TrainConfig(
            estimator=estimator, k=k, epochs=int(conf['epochs']), warmup_epochs=warmup,
            batch_size=int(conf['batch']), lr0=float(conf['lr']), tau=float(conf['tau']), m=int(conf['m']),
            seed=int(conf['seed']), eval_every=int(conf['eval_every']), n_hidden=int(conf['hidden']),
            threads=int(conf['threads']), k_dyn_cap=int(conf['k_dyn_cap']),
            rebuild_every=None if conf['rebuild_every'] is None else int(conf['rebuild_every']),
        )
    except ValueError as e:
        raise UsageError(str(e))


def cmd_train(args, conf: dict) -> int:
    out = _out_dir(conf)
    train, test = load_data(conf)
    cfg = _train_config(conf, conf['estimator'], bool(conf['dynamic_k']))

    result = trainer.train(train.images, None if test is None else test.images, cfg, dump_dir=out)
    checkpoint = trainer.save_checkpoint(result.params, out / 'params.rbm')
    log_path = out / 'train_log.csv'
    result.log_frame().to_csv(log_path, index=False)
    last = result.log[-1] if result.log else None
    write_manifest(out, 'train', conf, {'train': train.source_digest, 'test': None if test is None else test.source_digest},
                   [checkpoint, log_path],
                   {'skipped_updates': result.skipped_updates, 'capped_tours': result.capped_tours,
                    'train_ll': None if last is None else last.train_ll, 'test_ll': None if last is None else last.test_ll}, argv=args.argv)
    print(f"{cfg.label()}: {result.updates} updates, {result.skipped_updates} skipped")
    if last is not None:
        print(f"epoch {last.epoch}: train_ll={last.train_ll} test_ll={last.test_ll} "
              f"xi_hat={last.xi_hat} completed_fraction={last.completed_fraction}")
    return EXIT_OK


def cmd_compare(args, conf: dict) -> int:
    '''
    Trains LVS and CD with the same settings over --runs seeds and writes the paired
    test log-likelihoods with a one-sided paired t-test (alternative: LVS is higher).
    '''
    out = _out_dir(conf)
    train, test = load_data(conf)
    if test is None or len(test) == 0:
        raise UsageError("compare needs a test set: use the MNIST files, --test-csv or --split")
    lvs = _train_config(conf, trainer.Estimator.LVS.value, bool(conf['dynamic_k']))
    cd = _train_config(conf, trainer.Estimator.CD.value, False)
    seeds = [int(conf['seed']) + i for i in range(int(conf['runs']))]
    comparison = trainer.reduced_scale_comparison(train.images, test.images, {lvs.label(): lvs, cd.label(): cd}, seeds)

    path = out / 'comparison.csv'
    comparison.frame.to_csv(path, index=False)
    means = comparison.frame.groupby('estimator').test_ll.agg(['mean', 'std'])
    for name, row in means.iterrows():
        print(f"{name}: test_ll {row['mean']:.4f} ({row['std']:.4f}) over {len(seeds)} seeds")
    print(f"{lvs.label()} - {cd.label()}: mean difference {comparison.mean_difference:.4f}, p = {comparison.p_value:.4g}")
    results = {'p_value': comparison.p_value, 'mean_difference': comparison.mean_difference,
               'mean_test_ll': {name: float(row['mean']) for name, row in means.iterrows()}}
    write_manifest(out, 'compare', conf, {'train': train.source_digest, 'test': test.source_digest},
                   [path], results, argv=args.argv)
    return EXIT_OK


def _parse_sweep(value) -> list:
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(v) for v in str(value).split(',')]
    except ValueError:
        raise UsageError(f"--m-sweep takes comma separated integers, got {value}")


def cmd_tours(args, conf: dict) -> int:
    out = _out_dir(conf)
    train, _ = load_data(conf)
    W = _load_model(conf, train)
    cfg = _tour_config(conf, dynamic_by_default=True)
    rng = rbm.make_rng(int(conf['seed']))
    m_values = _parse_sweep(conf['m_sweep']) or [int(conf['m'])]
    artifacts = []
    results = {}
    for m in m_values:
        S = stopping_set.build(train.images, W, m, rng)
        _profile(S, args.profile)
        records, tail = tours.run_batch(W, S, cfg, [], int(conf['tours']), rng,
                                        workers=int(conf['threads']), labels=train.labels)
        path = out / f"ccdf_m{m}.csv"
        tail.ccdf_frame().to_csv(path, index=False)
        artifacts.append(path)
        if train.labels is not None:
            path = out / f"ccdf_by_label_m{m}.csv"
            tours.grouped_ccdf(records).to_csv(path, index=False)
            artifacts.append(path)
        fit = tours.fit_geometric_tail(records)
        p_one = float(tail.completed_counts[1] / tail.n_tours) if len(tail.completed_counts) > 1 else 0.0
        results[f"m{m}"] = {
            'stopping_set_size': len(S), 'completed': tail.n_completed, 'capped': tail.n_capped,
            'xi_hat': tail.xi_hat, 'p_xi_eq_1': p_one,
            'alpha_hat': None if fit is None else fit[0], 'fit_range': None if fit is None else list(fit[1]),
        }
        alpha = 'n/a' if fit is None else f"{fit[0]:.4f}"
        print(f"m={m}: |S|={len(S)} tours={tail.n_tours} completed={tail.n_completed} "
              f"xi_hat={tail.xi_hat} p(xi=1)={p_one:.4f} alpha_hat={alpha}")
    write_manifest(out, 'tours', conf, {'train': train.source_digest, 'checkpoint': file_digest(conf['checkpoint'])},
                   artifacts, results, argv=args.argv)
    return EXIT_OK


def cmd_estimate_z(args, conf: dict) -> int:
    out = _out_dir(conf)
    train, _ = load_data(conf)
    W = _load_model(conf, train)
    cfg = _tour_config(conf, dynamic_by_default=True)
    rng = rbm.make_rng(int(conf['seed']))
    S = stopping_set.build(train.images, W, int(conf['m']), rng)
    _profile(S, args.profile)
    records, tail = tours.run_batch(W, S, cfg, [], int(conf['tours']), rng, workers=int(conf['threads']))
    if tail.n_capped:
        logger.warning(f"{tail.n_capped} of {tail.n_tours} tours hit the cap; estimating from the completed ones")
    z = estimators.log_z_estimate(records, S)

    row = {'log_Z_S': z.log_Z_S, 'xi_hat': z.xi_hat, 'xi_stderr': z.xi_stderr, 'log_Z_hat': z.log_Z_hat,
           'log_ci_low': z.log_ci[0], 'log_ci_high': z.log_ci[1], 'completed': z.completed_tours,
           'capped': z.capped_tours, 'log_Z': None, 'relative_error': None}
    try:
        log_Z = oracle.exact_partition(W)
        row['log_Z'] = log_Z
        row['relative_error'] = float(abs(np.expm1(z.log_Z_hat - log_Z)))
    except oracle.BudgetExceeded:
        logger.info("Model too large for an exact log Z")

    print(f"log Z_S = {z.log_Z_S:.6f}")
    print(f"E[xi] = {z.xi_hat:.6f} +- {z.xi_stderr:.6f}")
    print(f"log Z_hat = {z.log_Z_hat:.6f}  CI [{z.log_ci[0]:.6f}, {z.log_ci[1]:.6f}]")
    if row['log_Z'] is not None:
        print(f"log Z = {row['log_Z']:.6f}  relative error {row['relative_error']:.3e}")
    path = out / 'estimate_z.csv'
    pd.DataFrame([row]).to_csv(path, index=False)
    write_manifest(out, 'estimate-z', conf, {'train': train.source_digest, 'checkpoint': file_digest(conf['checkpoint'])},
                   [path], row, argv=args.argv)
    return EXIT_OK


def _finite_difference_error(W: rbm.RbmParams, data: np.ndarray) -> float:
    exact = oracle.exact_gradient(W, data).flat()
    flat = np.concatenate([W.weights.ravel(), W.visible_bias, W.hidden_bias])
    n_w = W.n_visible * W.n_hidden

    def unflatten(x):
        return rbm.RbmParams(x[:n_w].reshape(W.weights.shape), x[n_w:n_w + W.n_visible], x[n_w + W.n_visible:])

    numeric = np.empty_like(flat)
    for i in range(len(flat)):
        step = np.zeros_like(flat)
        step[i] = FD_STEP
        up = oracle.exact_log_likelihood(unflatten(flat + step), data)
        down = oracle.exact_log_likelihood(unflatten(flat - step), data)
        numeric[i] = (up - down) / (2 * FD_STEP)
    return float(np.max(np.abs(numeric - exact)))


def verify_model(seed: int, n_visible: int, n_hidden: int, exit_weighting: str = 'stationary',
                 n_tours: int = 100000) -> tuple:
    '''
    Runs the exact property checks on one random tiny model with a random stopping set.
    The tail checks compare the slope of n_tours sampled dynamic tours with the exact
    spectral radius of the chain restricted to states outside S.

    Returns:
        tuple - (list of property rows, gaps row)
    '''
    rng = rbm.make_rng(seed)
    W = rbm.RbmParams.random(n_visible, n_hidden, rng)
    chosen = rng.choice(2 ** n_hidden, size=max(1, 2 ** n_hidden // 4), replace=False)
    S = stopping_set.StoppingSet.from_hidden_states(oracle.all_bits(n_hidden)[chosen], W)
    scan = rbm.GibbsScan.RANDOM_SCAN
    diagnostics = oracle.collapsed_chain(W, S, scan, exit_weighting=exit_weighting)
    log_p = oracle.joint_log_probabilities(W)
    rows = []

    def check(name, error, tolerance):
        rows.append({'seed': seed, 'property': name, 'error': float(error), 'tolerance': tolerance,
                     'passed': bool(error < tolerance)})

    flows = np.exp(log_p)[:, None] * oracle.transition_matrix(W, scan)
    check('detailed_balance', np.max(np.abs(flows - flows.T)), DETAILED_BALANCE_TOL)

    expected = np.concatenate([[np.exp(diagnostics.log_Z_S - diagnostics.log_Z)],
                               np.exp(log_p[diagnostics.outside_index])])
    check('collapsed_stationary', np.max(np.abs(diagnostics.stationary - expected)), STATIONARY_TOL)

    kac = np.exp(diagnostics.log_Z - diagnostics.log_Z_S)
    check('kac', abs(diagnostics.mean_tour_length - kac) / kac, KAC_TOL)

    data = rng.integers(0, 2, size=(8, n_visible), dtype=np.uint8)

    records, _ = tours.run_batch(W, S, tours.TourConfig.dynamic(scan=scan), [], n_tours, rng)
    slope = tours.tail_slope(records)
    if slope is None:
        check('tail_slope', np.inf, TAIL_SLOPE_TOL)
        check('tail_doeblin', np.inf, TAIL_SLOPE_TOL)
    else:
        check('tail_slope', abs(slope - np.log(diagnostics.restricted_radius)), TAIL_SLOPE_TOL)
        check('tail_doeblin', max(0.0, slope - np.log1p(-diagnostics.epsilon)), TAIL_SLOPE_TOL)

    check('gradient_finite_difference', _finite_difference_error(W, data), FD_TOL)

    gaps = {'seed': seed, 'spectral_gap_full': diagnostics.spectral_gap_full,
            'spectral_gap_collapsed': diagnostics.spectral_gap}
    return rows, gaps


def cmd_verify(args, conf: dict) -> int:
    out = _out_dir(conf)
    try:
        seeds = [int(s) for s in str(conf['seeds']).split(',')]
    except ValueError:
        raise UsageError(f"--seeds takes comma separated integers, got {conf['seeds']}")
    exit_weighting = 'uniform' if conf['break_collapsed'] else 'stationary'
    if exit_weighting != 'stationary':
        logger.warning("Collapsed chain exits drawn uniformly from the stopping set; checks are expected to fail")

    rows, gaps = [], []
    for seed in seeds:
        model_rows, model_gaps = verify_model(seed, int(conf['visible_units']), int(conf['hidden_units']), exit_weighting,
                                              int(conf['tours']))
        rows.extend(model_rows)
        gaps.append(model_gaps)
    report = pd.DataFrame(rows)
    gap_frame = pd.DataFrame(gaps)
    report_path = out / 'verify.csv'
    gaps_path = out / 'verify_gaps.csv'
    report.to_csv(report_path, index=False)
    gap_frame.to_csv(gaps_path, index=False)
    print(report.to_string(index=False))
    print(gap_frame.to_string(index=False))

    failures = sorted(set(report.loc[~report.passed, 'property']))
    write_manifest(out, 'verify', conf, {}, [report_path, gaps_path], {'failures': failures}, argv=args.argv)
    if failures:
        raise VerificationFailed(failures)
    return EXIT_OK


def cmd_report(args, conf: dict) -> int:
    out = _out_dir(conf)
    train, _ = load_data(conf)
    W = _load_model(conf, train)
    rng = rbm.make_rng(int(conf['seed']))
    S = stopping_set.build(train.images, W, int(conf['m']), rng)
    _profile(S, args.profile)
    report = estimators.inspection_paradox_report(W, S, int(conf['tours']), rng, _tour_config(conf, True))
    plain_path = out / 'tour_lengths.csv'
    biased_path = out / 'tour_lengths_length_biased.csv'
    report.plain.to_csv(plain_path, index=False)
    report.length_biased.to_csv(biased_path, index=False)

    # one Gibbs step from (v_n, h_n) under a shared seed: CD-1's sample and the second tour state
    n = min(len(train), 100)
    hidden = rbm.sample_hidden(train.images[:n], W, rng)
    step_seed = int(rng.integers(2 ** 32))
    agree = 0
    for i in range(n):
        cd = estimators.cd_chain(train.images[i:i + 1], W, 1, rbm.make_rng([step_seed, i]), hidden=hidden[i:i + 1])
        record = tours.run_tour(W, S, tours.TourConfig(k_max=1), [], rbm.make_rng([step_seed, i]),
                                start=rbm.JointState(train.images[i], hidden[i]))
        agree += bool(np.array_equal(cd.visible[0], record.next_state.visible)
                      and np.array_equal(cd.hidden[0], record.next_state.hidden))

    print(f"mean tour length {report.plain_mean:.4f}, length-biased {report.length_biased_mean:.4f} "
          f"over {report.completed_tours} tours")
    print(f"CD-1 sample equals the second tour state for {agree}/{n} examples")
    results = {'plain_mean': report.plain_mean, 'length_biased_mean': report.length_biased_mean,
               'completed_tours': report.completed_tours, 'cd_tour_agreement': agree / n}
    write_manifest(out, 'report', conf, {'train': train.source_digest, 'checkpoint': file_digest(conf['checkpoint'])},
                   [plain_path, biased_path], results, argv=args.argv)
    return EXIT_OK


def _common_flags() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--config', type=str, default=None,
                        help="YAML file of option values; flags take precedence")
    parser.add_argument('--seed', type=int, default=None,
                        help=f"Seed of the random stream (default: {settings.DEFAULT_SEED})")
    parser.add_argument('--out', type=str, default=None,
                        help=f"Output directory (default: {settings.OUT_DIR})")
    parser.add_argument('--threads', type=int, default=None,
                        help=f"Tour worker threads; 1 is deterministic (default: {settings.THREADS})")
    parser.add_argument('--logging', type=str, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], default=settings.LOG_LEVEL,
                        dest='log_level', help=f"Log level (default: {settings.LOG_LEVEL})")
    parser.add_argument('--profile', action='store_true', default=False,
                        help='Log the memory used by stopping sets')
    return parser


def _data_flags() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--data-dir', type=str, default=None,
                        help=f"Directory with the MNIST IDX files (default: $MCLV_DATA_DIR or {settings.DATA_DIR})")
    parser.add_argument('--csv', type=str, default=None, help="Training bit vectors as CSV instead of MNIST")
    parser.add_argument('--test-csv', type=str, default=None, help="Test bit vectors as CSV")
    parser.add_argument('--label-column', type=str, default=None, help="Label column of the CSV files")
    parser.add_argument('--binarize', type=str, choices=[b.value for b in data_utils.Binarization], default=None,
                        help="Pixel binarization (default: threshold)")
    parser.add_argument('--split', type=int, default=None,
                        help="Pool train and test and re-split with this many training images, e.g. 55000")
    parser.add_argument('--limit', type=int, default=None, help="Use only the first N training images")
    return parser


def _tour_flags() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--checkpoint', type=str, default=None, help="RBM1 checkpoint file")
    parser.add_argument('--k', type=int, default=None, help="Fixed tour length limit K")
    parser.add_argument('--dynamic-k', action='store_const', const=True, default=None,
                        help="Run tours until they return, up to --k-dyn-cap steps")
    parser.add_argument('--k-dyn-cap', type=int, default=None,
                        help=f"Step cap for dynamic tours (default: {settings.K_DYN_CAP})")
    parser.add_argument('--m', type=int, default=None, help=f"Hidden samples per example (default: {settings.M})")
    parser.add_argument('--tours', type=int, default=None, help="Number of tours (default: 10000)")
    return parser


def _training_flags() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--k', type=int, default=None, help="Gibbs steps (CD/PCD) or tour limit (LVS), default 1")
    parser.add_argument('--dynamic-k', action='store_const', const=True, default=None, help="LVS with dynamic K")
    parser.add_argument('--k-dyn-cap', type=int, default=None, help=f"Step cap for dynamic tours (default: {settings.K_DYN_CAP})")
    parser.add_argument('--m', type=int, default=None, help=f"Hidden samples per example (default: {settings.M})")
    parser.add_argument('--rebuild-every', type=int, default=None,
                        help="Batches between stopping set rebuilds (default: once per epoch)")
    parser.add_argument('--lr', type=float, default=None, help=f"Initial learning rate (default: {settings.LEARNING_RATE})")
    parser.add_argument('--tau', type=float, default=None, help=f"Robbins-Monro constant in epochs (default: {settings.RM_TAU})")
    parser.add_argument('--epochs', type=int, default=None, help=f"Epochs (default: {settings.EPOCHS})")
    parser.add_argument('--warmup', type=int, default=None, help=f"CD-1 warm-up epochs for LVS (default: {settings.WARMUP_EPOCHS})")
    parser.add_argument('--batch', type=int, default=None, help=f"Mini-batch size (default: {settings.BATCH_SIZE})")
    parser.add_argument('--hidden', type=int, default=None, help=f"Hidden units (default: {settings.HIDDEN_UNITS})")
    parser.add_argument('--eval-every', type=int, default=None, help="Epochs between evaluations (default: 1)")
    return parser


def make_base_arg_parser(description) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=description)
    commands = parser.add_subparsers(dest='command', required=True)
    common, data, tour = _common_flags(), _data_flags(), _tour_flags()

    training = _training_flags()
    train = commands.add_parser('train', parents=[common, data, training], help="Train an RBM")
    train.add_argument('--estimator', type=str, choices=[e.value for e in trainer.Estimator], default=None,
                       help="Gradient estimator (default: lvs)")
    train.set_defaults(handler=cmd_train)

    compare = commands.add_parser('compare', parents=[common, data, training],
                                  help="LVS against CD over several seeds with a paired t-test")
    compare.add_argument('--runs', type=int, default=None, help="Seeds --seed, --seed+1, ... to train (default: 3)")
    compare.set_defaults(handler=cmd_compare)

    tours_parser = commands.add_parser('tours', parents=[common, data, tour], help="Tour length CCDFs")
    tours_parser.add_argument('--m-sweep', type=str, default=None, help="Comma separated m values, e.g. 1,4,7")
    tours_parser.set_defaults(handler=cmd_tours)

    estimate = commands.add_parser('estimate-z', parents=[common, data, tour], help="Estimate the partition function")
    estimate.set_defaults(handler=cmd_estimate_z)

    report = commands.add_parser('report', parents=[common, data, tour],
                                 help="Tour lengths against length-biased tour lengths")
    report.set_defaults(handler=cmd_report)

    verify = commands.add_parser('verify', parents=[common], help="Exact property checks on tiny models")
    verify.add_argument('--seeds', type=str, default=None, help="Comma separated model seeds (default: 0,1,2,3,4)")
    verify.add_argument('--visible-units', type=int, default=None, help="Visible units of the test models (default: 4)")
    verify.add_argument('--hidden-units', type=int, default=None, help="Hidden units of the test models (default: 3)")
    verify.add_argument('--break-collapsed', action='store_const', const=True, default=None,
                        help="Draw collapsed-chain exits uniformly from the stopping set (negative control)")
    verify.set_defaults(handler=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = make_base_arg_parser("Las Vegas tour estimation and training for binary RBMs.")
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=getattr(logging, args.log_level))

    try:
        conf = resolve(args)
        return args.handler(args, conf)
    except (UsageError, oracle.BudgetExceeded) as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except (data_utils.DataError, FileNotFoundError, stopping_set.EmptyDataError, rbm.DimensionMismatch) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except VerificationFailed as e:
        logger.error(f"Verification failed: {e}")
        return EXIT_VERIFY
    except (trainer.NonFiniteParams, estimators.NoCompletedTours) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
