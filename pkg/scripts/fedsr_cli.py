#!/usr/bin/env python3
"""
CF-FedSR experiment runner.

Runs federated sequential-recommendation experiments and writes
self-describing result bundles that can be compared later without the data.

Usage:
    python3 scripts/fedsr_cli.py run --config config.example.yaml --seeds 1,2,3
    python3 scripts/fedsr_cli.py run --set algorithm=fedavg --set total_rounds=50
    python3 scripts/fedsr_cli.py compare results/fedavg-1a2b... results/cf_fedsr-3c4d...
    python3 scripts/fedsr_cli.py ablate --config config.example.yaml
    python3 scripts/fedsr_cli.py sweep --param d --values 8,16,32

Bundle layout (<out>/<algorithm>-<config hash>/):
    summary.json            seed means, seed list, config echo, dataset fingerprint
    seed-<s>/rounds.csv     one row per executed round
    seed-<s>/clients.csv    per-client test outcomes
    seed-<s>/summary.json   that seed's final metrics

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from fedsr.errors import BundleError, ConfigError, FedSRError
from fedsr.fedcore import prepare, run_experiment
from lib.atomic_write import atomic_json_write, atomic_text_write
from lib.config import load_config
from lib.structured_log import get_logger

log = get_logger('fedsr')

ROUND_COLUMNS = ('round', 'hr5', 'ndcg5', 'hr10', 'ndcg10', 'fairness_variance',
                 'participants', 'eligible', 'bytes', 'cumulative_bytes', 'note')
CLIENT_COLUMNS = ('client_id', 'rank', 'hr5', 'ndcg5', 'hr10', 'ndcg10', 'performance')
SUMMARY_METRICS = ('hr5', 'ndcg5', 'hr10', 'ndcg10', 'fairness_variance',
                   'convergence_round', 'cumulative_bytes', 'rounds_executed')
ABLATION = ('cf_fedsr', 'variation1', 'variation2', 'variation3')
SWEEP_PARAMS = ('d', 'k', 'gamma', 'alpha_beta')


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they exit with code 1."""

    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

def config_hash(cfg):
    """Stable hash of the effective config, seed excluded."""
    echo = {k: v for k, v in cfg.echo().items() if k != 'seed'}
    canonical = json.dumps(echo, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def parse_seeds(text, default):
    if not text:
        return [default]
    try:
        seeds = [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise ConfigError(f'--seeds must be a comma-separated list of integers, got {text!r}')
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError(f'--seeds needs at least one non-negative seed, got {text!r}')
    return sorted(set(seeds))


def _csv_text(columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def _round_rows(result):
    for r in result.rounds:
        yield (r.round, r.val_hr5, r.val_ndcg5, r.val_hr10, r.val_ndcg10,
               r.fairness_variance, len(r.participants), r.eligible, r.bytes,
               r.cumulative_bytes, r.note)


def _client_rows(result):
    for o in sorted(result.outcomes, key=lambda o: o.client_id):
        yield (o.client_id, o.rank, o.hr5, o.ndcg5, o.hr10, o.ndcg10, o.performance)


def _mean(values):
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def write_seed(seed_dir, cfg, data, result):
    atomic_text_write(os.path.join(seed_dir, 'rounds.csv'),
                      _csv_text(ROUND_COLUMNS, _round_rows(result)))
    atomic_text_write(os.path.join(seed_dir, 'clients.csv'),
                      _csv_text(CLIENT_COLUMNS, _client_rows(result)))
    atomic_json_write(os.path.join(seed_dir, 'summary.json'), {
        'algorithm': result.algorithm,
        'seed': result.seed,
        'metrics': result.summary,
        'config': cfg.echo(),
        'dataset_fingerprint': data.fingerprint,
        'dataset_stats': data.stats,
    })


def run_bundle(cfg, seeds, out_dir):
    """Run *cfg* once per seed and write the bundle. Returns its directory."""
    bundle = os.path.join(out_dir, f'{cfg.run.algorithm}-{config_hash(cfg)}')
    per_seed, fingerprints, stats = {}, set(), None
    for seed in seeds:
        seeded = cfg.with_values(seed=seed)
        data = prepare(seeded.dataset, seed)
        log.info('Running %s seed %d on %d clients', seeded.run.algorithm, seed,
                 len(data.clients), extra={'bundle': bundle, 'seed': seed})
        result = run_experiment(seeded.run, data)
        write_seed(os.path.join(bundle, f'seed-{seed}'), seeded, data, result)
        per_seed[str(seed)] = result.summary
        fingerprints.add(data.fingerprint)
        stats = data.stats

    metrics = {name: _mean(s[name] for s in per_seed.values()) for name in SUMMARY_METRICS}
    atomic_json_write(os.path.join(bundle, 'summary.json'), {
        'algorithm': cfg.run.algorithm,
        'config_hash': config_hash(cfg),
        'config': cfg.with_values(seed=seeds[0]).echo(),
        'seeds': list(seeds),
        'dataset_fingerprint': ','.join(sorted(fingerprints)),
        'dataset_stats': stats,
        'metrics': metrics,
        'per_seed': per_seed,
    })
    log.info('Wrote bundle %s (HR@10 %.4f)', bundle, metrics['hr10'] or 0.0)
    return bundle


def load_bundle(path):
    summary_path = os.path.join(path, 'summary.json')
    try:
        with open(summary_path, encoding='utf-8') as f:
            summary = json.load(f)
    except FileNotFoundError:
        raise BundleError(f'{path}: no summary.json; not a result bundle')
    except json.JSONDecodeError as e:
        raise BundleError(f'{summary_path}: unreadable ({e.msg} at line {e.lineno})')
    if not isinstance(summary.get('metrics'), dict):
        raise BundleError(f'{summary_path}: missing metrics section')
    summary['path'] = path
    return summary


# ---------------------------------------------------------------------------
# Comparison tables
# ---------------------------------------------------------------------------

def improvement(value, baseline):
    """Relative change (value - baseline) / baseline, or None when undefined."""
    if value is None or baseline is None or baseline == 0:
        return None
    return (value - baseline) / baseline


def _fmt(value, pct=False):
    if value is None:
        return 'n/a'
    if pct:
        return f'{value * 100:+.2f}%'
    if isinstance(value, float) and not value.is_integer():
        return f'{value:.4f}'
    return f'{value:g}' if isinstance(value, float) else str(value)


def comparison_table(bundles):
    """Rows of (metric, values per bundle, improvements vs the first bundle)."""
    if len(bundles) < 2:
        raise BundleError('compare needs at least two bundles')
    names = set(bundles[0]['metrics'])
    for b in bundles[1:]:
        if set(b['metrics']) != names:
            raise BundleError(
                f"{b['path']}: metric set differs from {bundles[0]['path']}")
    rows = []
    for metric in [m for m in SUMMARY_METRICS if m in names]:
        values = [b['metrics'][metric] for b in bundles]
        rows.append((metric, values, [improvement(v, values[0]) for v in values[1:]]))
    return rows


def _labels(bundles):
    return [os.path.basename(os.path.normpath(b['path'])) for b in bundles]


def render_comparison(bundles, rows):
    labels = _labels(bundles)
    header = ['metric'] + labels + [f'impro. {lab}' for lab in labels[1:]]
    lines = [header]
    for metric, values, impro in rows:
        lines.append([metric] + [_fmt(v) for v in values] + [_fmt(i, pct=True) for i in impro])
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return '\n'.join('  '.join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
                     for line in lines)


def write_comparison(bundles, rows, out_dir):
    labels = _labels(bundles)
    columns = ['metric'] + labels + [f'impro_{lab}' for lab in labels[1:]]
    body = [[metric] + ['' if v is None else v for v in values]
            + ['' if i is None else i for i in impro]
            for metric, values, impro in rows]
    path = os.path.join(out_dir, 'comparison.csv')
    atomic_text_write(path, _csv_text(columns, body))
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(cfg, seeds, out_dir):
    bundle = run_bundle(cfg, seeds, out_dir)
    summary = load_bundle(bundle)
    print(f'{bundle}')
    for metric in SUMMARY_METRICS:
        print(f'  {metric:<18} {_fmt(summary["metrics"][metric])}')
    return bundle


def cmd_compare(bundle_paths, out_dir=None):
    bundles = [load_bundle(p) for p in bundle_paths]
    rows = comparison_table(bundles)
    print(render_comparison(bundles, rows))
    if out_dir:
        write_comparison(bundles, rows, out_dir)
    return rows


def cmd_ablate(cfg, seeds, out_dir):
    """cf_fedsr plus the three single-module ablations on identical data and seeds."""
    paths = [run_bundle(cfg.with_values(algorithm=algorithm), seeds, out_dir)
             for algorithm in ABLATION]
    return cmd_compare(paths, out_dir)


def _sweep_values(param, values):
    if param not in SWEEP_PARAMS:
        raise ConfigError(f'unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}')
    parsed = []
    for raw in values:
        try:
            if param in ('d', 'k'):
                parsed.append({param: int(raw)})
            elif param == 'gamma':
                parsed.append({'gamma': float(raw)})
            else:
                alpha, beta = raw.split(':')
                parsed.append({'alpha': float(alpha), 'beta': float(beta)})
        except ValueError:
            raise ConfigError(f'bad value {raw!r} for sweep parameter {param}')
    if not parsed:
        raise ConfigError('sweep needs at least one value')
    return parsed


def cmd_sweep(cfg, param, values, seeds, out_dir):
    """One bundle per value with everything else fixed, plus sweep-<param>.csv."""
    rows = []
    for raw, change in zip(values, _sweep_values(param, values)):
        bundle = run_bundle(cfg.with_values(**change), seeds, out_dir)
        metrics = load_bundle(bundle)['metrics']
        rows.append([raw] + [metrics[m] for m in SUMMARY_METRICS])

    columns = [param] + list(SUMMARY_METRICS)
    body = [[('' if v is None else v) for v in row] for row in rows]
    atomic_text_write(os.path.join(out_dir, f'sweep-{param}.csv'), _csv_text(columns, body))
    widths = [max(len(str(c)), 10) for c in columns]
    print('  '.join(str(c).ljust(w) for c, w in zip(columns, widths)).rstrip())
    for row in rows:
        print('  '.join(_fmt(v).ljust(w) for v, w in zip(row, widths)).rstrip())
    return rows


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    common = _ArgumentParser(add_help=False)
    common.add_argument('--config', help="YAML config (default: $FEDSR_CONFIG or config.yaml)")
    common.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='KEY=VALUE', help="Override one config key (repeatable)")
    common.add_argument('--out', default='results', help="Output directory")
    common.add_argument('--seeds', help="Comma-separated seeds, e.g. 1,2,3,4,5")

    parser = _ArgumentParser(description="Federated sequential recommendation experiments")
    sub = parser.add_subparsers(dest='command')
    sub.add_parser('run', parents=[common], help="Run one configuration")
    sub.add_parser('ablate', parents=[common], help="Run cf_fedsr and variations 1-3")

    sweep = sub.add_parser('sweep', parents=[common], help="Vary one hyper-parameter")
    sweep.add_argument('--param', required=True, help=f"One of {', '.join(SWEEP_PARAMS)}")
    sweep.add_argument('--values', required=True,
                       help="Comma-separated values (alpha_beta uses a:b pairs)")

    compare = sub.add_parser('compare', help="Compare stored bundles against the first")
    compare.add_argument('bundles', nargs='+', help="Bundle directories")
    compare.add_argument('--out', help="Also write comparison.csv here")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command == 'compare':
            cmd_compare(args.bundles, args.out)
            return 0
        if args.command is None:
            raise ConfigError('missing subcommand (run, compare, ablate, sweep)')

        cfg = load_config(args.config, args.overrides)
        seeds = parse_seeds(args.seeds, cfg.run.seed)
        if args.command == 'run':
            cmd_run(cfg, seeds, args.out)
        elif args.command == 'ablate':
            cmd_ablate(cfg, seeds, args.out)
        elif args.command == 'sweep':
            values = [v.strip() for v in args.values.split(',') if v.strip()]
            cmd_sweep(cfg, args.param, values, seeds, args.out)
        return 0
    except ConfigError as e:
        print(f'config error: {e}', file=sys.stderr)
        return 1
    except FedSRError as e:
        print(f'error: {e}', file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
