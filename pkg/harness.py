"""
Experiment harness and command-line entry point.

Runs the requested models over speaker-grouped cross-validation folds,
scores accuracy and the equalized-odds disentanglement score for each age
grouping, and writes a JSON report plus a markdown table.

Usage:
    python harness.py run --config experiment.env --out results/
    python harness.py metric results/predictions_simple_fold0.csv --groups 2,5
    python harness.py probe-age features.csv
    python harness.py synth --preset dementiabank --out data/
    python harness.py gradcheck
"""
import argparse
import json
import math
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from dotenv import dotenv_values, load_dotenv
from tqdm import tqdm

import console
from data import (SYNTH_PRESETS, SynthConfig, age_histogram, generate_synthetic, load_csv,
                  save_csv, save_ground_truth, speaker_kfold, synth_preset, zscore_apply, zscore_fit)
from errors import AgeFairError, ConfigError, DataWarning, DegenerateGroupError, InputError, NumericError, UsageError
from fairness import (accuracy, delta_eo_bound_check, grouped_rates, is_trivial_classifier,
                      make_age_groups, read_predictions_csv, records_from_arrays, write_predictions_csv)
from models import (ENTROPY_VARIANTS, MODEL_KINDS, TrainConfig, assembly_gradcheck, build_and_train,
                    parse_kind, predict, probe_age, probe_age_group_holdout, probe_age_holdout,
                    representation_matrix)
from nn import EVAL, Dense, Network, build_mlp, entropy_loss, gradcheck, l2_loss, nll_loss

load_dotenv()

DEFAULT_CONFIG = os.getenv('AGEFAIR_CONFIG', 'experiment.env')
DEFAULT_OUT = os.getenv('AGEFAIR_OUT', 'results')
DEFAULT_MODELS = ('baseline_dnn', 'simple')
DEFAULT_GROUPS = (2, 5)
REPORT_VERSION = 1
FOLD_SEED_STRIDE = 1000
GRADCHECK_TOLERANCE = 1e-4
EXACT_TOLERANCE = 1e-7

PROBE_HIDDEN_PRESETS = {'dementiabank': (64, 32, 8), 'famous_people': (32, 20, 2)}

STD_NOTE = ("std is taken over cross-validation folds (population, ddof=0); "
            "stds from repeated restarts on fixed folds are typically smaller")
ACCURACY_NOTE = ("accuracy averages every fold; accuracy_mixed[N] averages only the folds whose "
                 "N age groups all mix labels, the same folds as delta_eo(N)")


# ============================================================
# Configuration
# ============================================================

@dataclass
class ExperimentConfig:
    data_csv: str = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    synth_preset: str = None
    models: tuple = DEFAULT_MODELS
    folds: int = 5
    groups: tuple = DEFAULT_GROUPS
    seed: int = 0
    diagnostics: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = None

    def __post_init__(self):
        self.models = tuple(parse_kind(m).value for m in self.models)
        self.groups = tuple(int(n) for n in self.groups)
        if not self.models:
            raise InputError("no models requested")
        if self.folds < 2:
            raise InputError(f"need at least 2 folds, got {self.folds}")
        if not self.groups or min(self.groups) < 1:
            raise InputError(f"age group counts must be at least 1, got {self.groups}")

    def echo(self):
        """Everything that determines the results (the output directory does not)."""
        return {
            'data_csv': self.data_csv,
            'synth': asdict(self.synth) if self.data_csv is None else None,
            'synth_preset': self.synth_preset,
            'models': list(self.models),
            'folds': self.folds,
            'groups': list(self.groups),
            'seed': self.seed,
            'diagnostics': self.diagnostics,
            'train': asdict(self.train),
        }


def _as_str(key, value):
    return value


def _as_int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"expected an integer, got {value!r}", key=key)


def _as_float(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"expected a number, got {value!r}", key=key)


def _as_bool(key, value):
    lowered = value.lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigError(f"expected true/false, got {value!r}", key=key)


def _as_list(key, value):
    return tuple(item.strip() for item in value.split(',') if item.strip())


def _as_int_list(key, value):
    return tuple(_as_int(key, item) for item in _as_list(key, value))


# KEY -> (section, field, parser)
CONFIG_KEYS = {
    'DATA_CSV': ('experiment', 'data_csv', _as_str),
    'MODELS': ('experiment', 'models', _as_list),
    'FOLDS': ('experiment', 'folds', _as_int),
    'GROUPS': ('experiment', 'groups', _as_int_list),
    'SEED': ('experiment', 'seed', _as_int),
    'DIAGNOSTICS': ('experiment', 'diagnostics', _as_bool),
    'SYNTH_PRESET': ('experiment', 'synth_preset', _as_str),

    'EPOCHS': ('train', 'epochs', _as_int),
    'K': ('train', 'k_adversary', _as_int),
    'K_D': ('train', 'k_discriminator', _as_int),
    'K_A': ('train', 'k_adversary_consensus', _as_int),
    'BATCH_SIZE': ('train', 'batch_size', _as_int),
    'LAMBDA_H': ('train', 'lambda_h', _as_float),
    'LEARNING_RATE': ('train', 'learning_rate', _as_float),
    'WEIGHT_DECAY': ('train', 'weight_decay', _as_float),
    'ADVERSARY_WEIGHT': ('train', 'adversary_weight', _as_float),
    'RECONSTRUCTION_WEIGHT': ('train', 'reconstruction_weight', _as_float),
    'DISCRIMINATOR_WEIGHT': ('train', 'discriminator_weight', _as_float),
    'N_MODALITIES': ('train', 'n_modalities', _as_int),
    'Z_DIM': ('train', 'z_dim', _as_int),
    'PROBE_EPOCHS': ('train', 'probe_epochs', _as_int),
    'PROBE_HIDDEN': ('train', 'probe_hidden', _as_int_list),
    'PROBE_LEARNING_RATE': ('train', 'probe_learning_rate', _as_float),
    'PROBE_WEIGHT_DECAY': ('train', 'probe_weight_decay', _as_float),
    'PROBE_PATIENCE': ('train', 'probe_patience', _as_int),
    'PROBE_VALIDATION': ('train', 'probe_validation', _as_float),

    'SYNTH_N': ('synth', 'n_samples', _as_int),
    'SYNTH_D': ('synth', 'n_features', _as_int),
    'SYNTH_RHO': ('synth', 'confound_strength', _as_float),
    'SYNTH_AGE_MEAN': ('synth', 'age_mean', _as_float),
    'SYNTH_AGE_SD': ('synth', 'age_sd', _as_float),
    'SYNTH_DISEASE_SCALE': ('synth', 'disease_effect_scale', _as_float),
    'SYNTH_AGE_SCALE': ('synth', 'age_effect_scale', _as_float),
    'SYNTH_SLOPE': ('synth', 'label_age_slope', _as_float),
    'SYNTH_NOISE_SD': ('synth', 'noise_sd', _as_float),
    'SYNTH_SAMPLES_PER_SPEAKER': ('synth', 'samples_per_speaker', _as_int),
    'SYNTH_SEED': ('synth', 'seed', _as_int),
}


def config_from_values(values):
    """ExperimentConfig from a KEY -> string mapping; empty values keep the default."""
    sections = {'experiment': {}, 'train': {}, 'synth': {}}
    for key, raw in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError("unknown configuration key", key=key)
        if raw is None or not raw.strip():
            continue
        section, name, parse = CONFIG_KEYS[key]
        sections[section][name] = parse(key, raw.strip())

    preset = sections['experiment'].get('synth_preset')
    if preset is not None and preset not in SYNTH_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(SYNTH_PRESETS)}",
                          key='SYNTH_PRESET')
    synth = synth_preset(preset, **sections['synth']) if preset else SynthConfig(**sections['synth'])
    if preset and 'probe_hidden' not in sections['train']:
        sections['train']['probe_hidden'] = PROBE_HIDDEN_PRESETS[preset]
    return ExperimentConfig(synth=synth, train=TrainConfig(**sections['train']),
                            **sections['experiment'])


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return config_from_values(dotenv_values(path))


def default_config(path=None):
    """The named config, else DEFAULT_CONFIG when present, else built-in defaults."""
    if path:
        return load_config(path)
    if os.path.exists(DEFAULT_CONFIG):
        return load_config(DEFAULT_CONFIG)
    return ExperimentConfig()


# ============================================================
# Experiment
# ============================================================

@dataclass
class ExperimentReport:
    config: dict
    data: dict
    folds: list
    models: dict
    notes: list
    version: int = REPORT_VERSION

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def load_dataset(cfg):
    """(FeatureMatrix, dropped row count, source description)."""
    if cfg.data_csv:
        matrix, dropped = load_csv(cfg.data_csv)
        return matrix, dropped, {'kind': 'csv', 'path': cfg.data_csv}
    matrix, _ = generate_synthetic(cfg.synth)
    return matrix, 0, {'kind': 'synthetic', 'preset': cfg.synth_preset}


def fold_seed(seed, fold):
    return seed * FOLD_SEED_STRIDE + fold


def _mean_std(values):
    if not values:
        return None
    return {'mean': float(np.mean(values)), 'std': float(np.std(values)), 'n': len(values)}


def _score(preds, groupings, label):
    trivial = is_trivial_classifier(preds)
    deltas, degenerate, bounds = {}, {}, {}
    for key, grouping in groupings.items():
        if grouping is None:
            deltas[key], degenerate[key] = None, True
            continue
        try:
            check = delta_eo_bound_check(grouped_rates(preds, grouping), trivial)
        except DegenerateGroupError as exc:
            warnings.warn(f"{label}, {key} groups: {exc}", DataWarning)
            deltas[key], degenerate[key] = None, True
            continue
        deltas[key], degenerate[key] = check.delta, False
        bounds[key] = {'regime': check.regime, 'passed': check.passed}
    return trivial, deltas, degenerate, bounds


def _diagnostics(kind, bundle, train, test, config, raw_cache):
    """Fresh probes for age on z versus raw features, fit on train and scored on test."""
    holdout, metric = ((probe_age_group_holdout, 'accuracy') if parse_kind(kind) in ENTROPY_VARIANTS
                       else (probe_age_holdout, 'mae'))
    if metric not in raw_cache:
        raw_cache[metric] = holdout(train, test, config)
    on_x, baseline = raw_cache[metric]
    on_z, _ = holdout(representation_matrix(bundle, train), representation_matrix(bundle, test), config)
    return {'metric': metric, 'on_z': on_z, 'on_x': on_x, 'baseline': baseline}


def aggregate(fold_records, group_keys):
    """Mean and population std per metric; degenerate folds are left out and counted."""
    result = {'accuracy': _mean_std([r['accuracy'] for r in fold_records]),
              'accuracy_mixed': {}, 'delta_eo': {}, 'degenerate_folds': {}}
    for key in group_keys:
        kept = [r for r in fold_records if not r['degenerate'][key]]
        result['delta_eo'][key] = _mean_std([r['delta_eo'][key] for r in kept])
        result['accuracy_mixed'][key] = _mean_std([r['accuracy'] for r in kept])
        result['degenerate_folds'][key] = len(fold_records) - len(kept)
    if fold_records and 'diagnostics' in fold_records[0]:
        result['diagnostics'] = {
            side: _mean_std([r['diagnostics'][side] for r in fold_records])
            for side in ('on_z', 'on_x', 'baseline')
        }
    return result


def run_experiment(cfg, progress=False):
    matrix, dropped, source = load_dataset(cfg)
    plan = speaker_kfold(matrix, cfg.folds, cfg.seed)
    group_keys = [str(n) for n in cfg.groups]
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        age_histogram(matrix).to_csv(os.path.join(cfg.out_dir, 'age_histogram.csv'), index=False)

    folds = []
    per_model = {kind: [] for kind in cfg.models}
    bar = tqdm(total=cfg.folds * len(cfg.models), desc='model x fold', unit='run',
               disable=not progress, file=sys.stderr)
    for fold, train_idx, test_idx in plan.splits():
        stats = zscore_fit(matrix.subset(train_idx))
        train = zscore_apply(stats, matrix.subset(train_idx))
        test = zscore_apply(stats, matrix.subset(test_idx))
        config = replace(cfg.train, seed=fold_seed(cfg.seed, fold))

        groupings = {}
        for n, key in zip(cfg.groups, group_keys):
            try:
                groupings[key] = make_age_groups(test.ages, test.labels, n)
            except InputError as exc:
                warnings.warn(f"fold {fold}: {exc}", DataWarning)
                groupings[key] = None
        folds.append({
            'fold': fold,
            'seed': config.seed,
            'n_train': train.n_samples,
            'n_test': test.n_samples,
            'class_composition': {'train': train.class_composition(),
                                  'test': test.class_composition()},
            'groupings': {key: g.to_dict() if g is not None else None for key, g in groupings.items()},
        })

        raw_cache = {}
        for kind in cfg.models:
            bar.set_postfix_str(f"{kind} fold {fold}")
            bundle, history = build_and_train(kind, train, config)
            pred_labels, _ = predict(bundle, test.features)
            preds = records_from_arrays(test.ids, test.labels, pred_labels, test.ages)
            trivial, deltas, degenerate, bounds = _score(preds, groupings, f"{kind} fold {fold}")
            record = {
                'fold': fold,
                'accuracy': accuracy(preds),
                'delta_eo': deltas,
                'degenerate': degenerate,
                'bound_check': bounds,
                'trivial_classifier': trivial,
                'final_losses': {name: (None if math.isnan(v) else float(v))
                                 for name, v in zip(('loss_c', 'loss_a', 'loss_r', 'loss_d'),
                                                    history.rows[-1][1:])},
            }
            if bundle.split is not None:
                record['modality_split'] = bundle.split.to_list()
            if cfg.diagnostics:
                record['diagnostics'] = _diagnostics(kind, bundle, train, test, config, raw_cache)
            per_model[kind].append(record)

            if cfg.out_dir:
                write_predictions_csv(preds, os.path.join(cfg.out_dir, f"predictions_{kind}_fold{fold}.csv"))
                history.to_csv(os.path.join(cfg.out_dir, f"history_{kind}_fold{fold}.csv"))
            bar.update(1)
    bar.close()

    models = {kind: {'folds': records, 'aggregate': aggregate(records, group_keys)}
              for kind, records in per_model.items()}
    data = {
        'source': source,
        'n_samples': matrix.n_samples,
        'n_features': matrix.n_features,
        'n_speakers': len(plan.speaker_folds),
        'dropped_rows': dropped,
        'class_composition': matrix.class_composition(),
    }
    return ExperimentReport(config=cfg.echo(), data=data, folds=folds, models=models, notes=[STD_NOTE, ACCURACY_NOTE])


# ============================================================
# Report rendering and verification
# ============================================================

def _cell(stat, degenerate=0):
    text = "n/a" if stat is None else f"{stat['mean']:.2f}±{stat['std']:.2f}"
    if degenerate:
        text += f" ({degenerate} degenerate)"
    return text


def render_markdown(report):
    keys = [str(n) for n in report.config['groups']]
    header = ['Model', 'Accuracy'] + [f"Δ_eo({k})" for k in keys]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for kind, entry in report.models.items():
        agg = entry['aggregate']
        cells = [kind, _cell(agg['accuracy'])]
        cells += [_cell(agg['delta_eo'][k], agg['degenerate_folds'][k]) for k in keys]
        lines.append("| " + " | ".join(cells) + " |")

    partial = [(kind, k) for kind, e in report.models.items() for k in keys
               if e['aggregate']['degenerate_folds'][k]]
    if partial:
        lines += ["", "| Model | Groups | Accuracy over mixed folds |", "|---|---|---|"]
        for kind, k in partial:
            stat = report.models[kind]['aggregate']['accuracy_mixed'][k]
            lines.append(f"| {kind} | {k} | {_cell(stat)} |")

    diagnosed = {k: e['aggregate']['diagnostics'] for k, e in report.models.items()
                 if 'diagnostics' in e['aggregate']}
    if diagnosed:
        lines += ["", "| Model | Age probe | on z | on x | trivial |", "|---|---|---|---|---|"]
        for kind, diag in diagnosed.items():
            metric = report.models[kind]['folds'][0]['diagnostics']['metric']
            lines.append(f"| {kind} | {metric} | {_cell(diag['on_z'])} | {_cell(diag['on_x'])} "
                         f"| {_cell(diag['baseline'])} |")

    lines.append("")
    lines += [f"_{note}_" for note in report.notes]
    return "\n".join(lines) + "\n"


def verify_report(report):
    """Problems found when recomputing aggregates and re-checking score bounds; empty if none."""
    problems = []
    keys = [str(n) for n in report.config['groups']]

    def close(a, b):
        if a is None or b is None:
            return a is b
        return all(math.isclose(a[f], b[f], rel_tol=1e-9, abs_tol=1e-12) for f in ('mean', 'std')) \
            and a['n'] == b['n']

    for kind, entry in report.models.items():
        recomputed = aggregate(entry['folds'], keys)
        stored = entry['aggregate']
        if not close(recomputed['accuracy'], stored['accuracy']):
            problems.append(f"{kind}: accuracy aggregate does not match its folds")
        for key in keys:
            if not close(recomputed['delta_eo'][key], stored['delta_eo'][key]):
                problems.append(f"{kind}: delta_eo({key}) aggregate does not match its folds")
            if not close(recomputed['accuracy_mixed'][key], stored.get('accuracy_mixed', {}).get(key)):
                problems.append(f"{kind}: accuracy over mixed folds ({key} groups) does not match its folds")
            if recomputed['degenerate_folds'][key] != stored['degenerate_folds'][key]:
                problems.append(f"{kind}: degenerate fold count for {key} groups is wrong")
        for record in entry['folds']:
            for key in keys:
                delta = record['delta_eo'][key]
                if delta is None:
                    continue
                n = int(key)
                if delta > 2 * n + 1e-12:
                    problems.append(f"{kind} fold {record['fold']}: delta_eo({key})={delta} exceeds {2 * n}")
                regime = record['bound_check'].get(key, {}).get('regime')
                if regime == 'non-trivial' and delta > n + 1e-12:
                    problems.append(f"{kind} fold {record['fold']}: delta_eo({key})={delta} exceeds {n}")
    return problems


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, 'report.json')
    md_path = os.path.join(out_dir, 'report.md')
    with open(json_path, 'w') as f:
        f.write(report.to_json())
    with open(md_path, 'w') as f:
        f.write(render_markdown(report))
    return json_path, md_path


# ============================================================
# Gradient self-check
# ============================================================

def _entropy_only(logits, _targets):
    return entropy_loss(logits)


def gradcheck_suite(seed=0):
    """(case, max relative error, tolerance) for every layer, loss and model objective."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 4))
    labels = np.arange(6) % 3
    linear = Network([Dense(4, 3, rng)], name='linear')
    mlp = build_mlp([4, 8, 3], rng, name='mlp')
    cases = [
        ('dense + l2', gradcheck(linear, l2_loss, x, rng.normal(size=(6, 3))), EXACT_TOLERANCE),
        ('dense/relu/batchnorm + nll (train)', gradcheck(mlp, nll_loss, x, labels), GRADCHECK_TOLERANCE),
        ('dense/relu/batchnorm + nll (eval)', gradcheck(mlp, nll_loss, x, labels, mode=EVAL),
         GRADCHECK_TOLERANCE),
        ('dense/relu/batchnorm + entropy', gradcheck(mlp, _entropy_only, x, None), GRADCHECK_TOLERANCE),
    ]
    for kind in ('simple', 'autoencoder', 'consensus_net', 'entropy'):
        cases.append((f"{kind} objective", assembly_gradcheck(kind, seed=seed), GRADCHECK_TOLERANCE))
    return cases


# ============================================================
# CLI
# ============================================================

def _group_list(text):
    try:
        groups = tuple(int(item) for item in text.split(',') if item.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not groups or min(groups) < 1:
        raise argparse.ArgumentTypeError("group counts must be positive integers")
    return groups


def apply_overrides(cfg, args):
    """Command-line flags win over the config file."""
    top = {}
    if getattr(args, 'seed', None) is not None:
        top['seed'] = args.seed
    if getattr(args, 'groups', None) is not None:
        top['groups'] = args.groups
    if getattr(args, 'folds', None) is not None:
        top['folds'] = args.folds
    if getattr(args, 'model', None):
        top['models'] = tuple(args.model)
    if getattr(args, 'out', None):
        top['out_dir'] = args.out
    if getattr(args, 'diagnostics', False):
        top['diagnostics'] = True
    train = {}
    if getattr(args, 'weight_decay', None) is not None:
        train['weight_decay'] = args.weight_decay
    if getattr(args, 'epochs', None) is not None:
        train['epochs'] = args.epochs
    if train:
        top['train'] = replace(cfg.train, **train)
    return replace(cfg, **top)


def cmd_run(args):
    cfg = apply_overrides(default_config(args.config), args)
    if cfg.out_dir is None:
        cfg = replace(cfg, out_dir=DEFAULT_OUT)

    console.banner("Age-disentangled representation experiment")
    console.step(1, "Configuration", 4)
    source = cfg.data_csv or f"synthetic ({cfg.synth_preset or 'default'}, n={cfg.synth.n_samples})"
    print(f"  Data:    {source}")
    print(f"  Models:  {', '.join(cfg.models)}")
    print(f"  Folds:   {cfg.folds}   Groups: {', '.join(map(str, cfg.groups))}   Seed: {cfg.seed}")
    print(f"  Epochs:  {cfg.train.epochs}   K: {cfg.train.k_adversary}   "
          f"weight decay: {cfg.train.weight_decay}")

    console.step(2, "Training and scoring", 4)
    report = run_experiment(cfg, progress=not args.quiet)
    console.ok(f"{len(cfg.models)} model(s) x {cfg.folds} fold(s) on {report.data['n_samples']} samples")
    if report.data['dropped_rows']:
        console.warn(f"{report.data['dropped_rows']} row(s) dropped at ingest")

    console.step(3, "Verifying report", 4)
    problems = verify_report(report)
    for problem in problems:
        console.fail(problem)
    if not problems:
        console.ok("aggregates and score bounds check out")

    console.step(4, "Writing report", 4)
    json_path, md_path = write_report(report, cfg.out_dir)
    console.ok(f"Saved {json_path}")
    print()
    print(render_markdown(report))

    console.closing("Experiment complete!",
                    files=[json_path, md_path, os.path.join(cfg.out_dir, 'age_histogram.csv'),
                           os.path.join(cfg.out_dir, 'predictions_<model>_fold<k>.csv'),
                           os.path.join(cfg.out_dir, 'history_<model>_fold<k>.csv')],
                    next_steps=["Inspect report.md for the accuracy / fairness table",
                                "Score any predictions file: python harness.py metric <csv>"])
    if problems:
        raise NumericError("report verification failed", problems=len(problems))
    return 0


def cmd_metric(args):
    preds = read_predictions_csv(args.predictions)
    ages = np.array([r.age for r in preds])
    labels = np.array([r.true_label for r in preds])
    trivial = is_trivial_classifier(preds)

    console.banner("Equalized-odds disentanglement")
    print(f"  Records:  {len(preds)}")
    print(f"  Accuracy: {accuracy(preds)}")
    if trivial:
        console.warn("constant predictions (trivial classifier)")
    for n in args.groups:
        grouping = make_age_groups(ages, labels, n)
        check = delta_eo_bound_check(grouped_rates(preds, grouping), trivial)
        print(f"  delta_eo({n}) = {check.delta}")
        status = console.ok if check.passed else console.fail
        status(f"bound check ({check.regime} regime): delta <= {2 * n}"
               + ("" if check.regime == 'trivial' else f" and <= {n}"))
    return 0


def cmd_probe_age(args):
    cfg = default_config(args.config)
    if args.csv:
        matrix, dropped = load_csv(args.csv)
        source = args.csv
    elif args.preset:
        matrix, _ = generate_synthetic(synth_preset(args.preset))
        dropped, source = 0, f"synthetic preset {args.preset}"
    else:
        raise UsageError("probe-age needs a feature CSV or --preset")

    train = cfg.train
    if args.preset:
        train = replace(train, probe_hidden=PROBE_HIDDEN_PRESETS[args.preset])
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if args.epochs is not None:
        train = replace(train, probe_epochs=args.epochs)

    console.banner("Age prediction from features")
    print(f"  Data:   {source} ({matrix.n_samples} samples, {matrix.n_features} features)")
    if dropped:
        console.warn(f"{dropped} row(s) without age/label dropped")
    print(f"  Probe:  hidden {'-'.join(map(str, train.probe_hidden))}, "
          f"{train.probe_folds}-fold speaker CV, up to {train.probe_epochs} epochs "
          f"(lr {train.probe_learning_rate:g}, patience {train.probe_patience})")
    result = probe_age(matrix, train)
    gain = 1.0 - result.value / result.baseline if result.baseline > 0 else 0.0
    console.rule()
    console.ok(f"MAE {result.value:.2f} ± {result.std:.2f} years")
    print(f"  Mean-age predictor MAE: {result.baseline:.2f} years ({gain:.0%} improvement)")
    return 0


def cmd_synth(args):
    cfg = default_config(args.config)
    synth = synth_preset(args.preset) if args.preset else cfg.synth
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    out_dir = args.out or os.path.join(DEFAULT_OUT, 'synthetic')
    os.makedirs(out_dir, exist_ok=True)

    console.banner("Synthetic confounded data")
    console.step(1, "Generating", 2)
    matrix, truth = generate_synthetic(synth)
    comp = matrix.class_composition()
    console.ok(f"{matrix.n_samples} samples, {matrix.n_features} features, "
               f"{len(set(matrix.speakers))} speakers")
    print(f"  control: {comp['control']}   dementia: {comp['dementia']}   "
          f"age: {matrix.ages.mean():.2f} ± {matrix.ages.std():.2f}")

    console.step(2, "Saving", 2)
    files = [save_csv(matrix, os.path.join(out_dir, 'features.csv')),
             save_ground_truth(truth, os.path.join(out_dir, 'ground_truth.json'))]
    histogram_path = os.path.join(out_dir, 'age_histogram.csv')
    age_histogram(matrix).to_csv(histogram_path, index=False)
    files.append(histogram_path)
    for path in files:
        console.ok(f"Saved {path}")

    console.closing("Dataset ready!", files=files,
                    next_steps=[f"python harness.py probe-age {files[0]}",
                                f"Set DATA_CSV={files[0]} and run: python harness.py run"])
    return 0


def cmd_gradcheck(args):
    console.banner("Gradient check")
    cases = gradcheck_suite(args.seed)
    worst = 0.0
    failed = []
    for name, error, tolerance in cases:
        worst = max(worst, error)
        if error < tolerance:
            console.ok(f"{name}: {error:.2e} (< {tolerance:.0e})")
        else:
            console.fail(f"{name}: {error:.2e} (>= {tolerance:.0e})")
            failed.append(name)
    console.rule()
    print(f"max relative error: {worst:.2e}")
    if failed:
        raise NumericError("gradient check failed", cases=', '.join(failed))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog='harness.py',
        description='Age-disentangled fair representation experiments')
    sub = parser.add_subparsers(dest='command', metavar='<command>')
    sub.required = True

    run = sub.add_parser('run', help='cross-validated experiment from a config file')
    run.add_argument('--config', help=f'KEY=VALUE config file (default: {DEFAULT_CONFIG} if present)')
    run.add_argument('--seed', type=int)
    run.add_argument('--groups', type=_group_list, help='age group counts, e.g. 2,5')
    run.add_argument('--folds', type=int)
    run.add_argument('--model', action='append', choices=MODEL_KINDS,
                     help='model kind to run (repeatable)')
    run.add_argument('--out', help=f'output directory (default: {DEFAULT_OUT})')
    run.add_argument('--weight-decay', type=float, dest='weight_decay')
    run.add_argument('--epochs', type=int)
    run.add_argument('--diagnostics', action='store_true', help='probe age on z vs raw features')
    run.add_argument('--quiet', action='store_true', help='no progress bar')
    run.set_defaults(func=cmd_run)

    metric = sub.add_parser('metric', help='score a predictions CSV (id,true_label,pred_label,age)')
    metric.add_argument('predictions')
    metric.add_argument('--groups', type=_group_list, default=DEFAULT_GROUPS)
    metric.set_defaults(func=cmd_metric)

    probe = sub.add_parser('probe-age', help='cross-validated age regression from features')
    probe.add_argument('csv', nargs='?')
    probe.add_argument('--preset', choices=sorted(SYNTH_PRESETS))
    probe.add_argument('--config')
    probe.add_argument('--seed', type=int)
    probe.add_argument('--epochs', type=int, help='probe training epochs')
    probe.set_defaults(func=cmd_probe_age)

    synth = sub.add_parser('synth', help='write a synthetic dataset and its ground truth')
    synth.add_argument('--preset', choices=sorted(SYNTH_PRESETS))
    synth.add_argument('--config')
    synth.add_argument('--seed', type=int)
    synth.add_argument('--out')
    synth.set_defaults(func=cmd_synth)

    check = sub.add_parser('gradcheck', help='finite-difference check of every gradient')
    check.add_argument('--seed', type=int, default=0)
    check.set_defaults(func=cmd_gradcheck)
    return parser


def _show_warning(message, category, filename, lineno, file=None, line=None):
    if issubclass(category, DataWarning):
        console.warn(str(message))
    else:
        _default_showwarning(message, category, filename, lineno, file, line)


_default_showwarning = warnings.showwarning


def main(argv=None):
    args = build_parser().parse_args(argv)
    warnings.showwarning = _show_warning
    try:
        return args.func(args)
    except AgeFairError as exc:
        console.error(exc.category, str(exc))
        return exc.exit_code
    finally:
        warnings.showwarning = _default_showwarning


if __name__ == '__main__':
    sys.exit(main())
