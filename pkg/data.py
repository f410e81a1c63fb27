"""
Feature tables for the age-disentanglement experiments.

- CSV ingest/export of precomputed features (`id,speaker,age,label,<features...>`)
- z-score normalization fit on a training fold
- speaker-grouped k-fold plans (no speaker in both train and test)
- a synthetic generator in which age confounds the diagnosis:
  age drives the label, and both age and label shift the features
"""
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from errors import DataWarning, DimensionError, FormatError, InputError

ID_COLUMNS = ['id', 'speaker', 'age', 'label']
LABEL_NAMES = {0: 'control', 1: 'dementia'}

# Age moments of the two clinical corpora the experiments were run on
SYNTH_PRESETS = {
    'dementiabank': {'n_samples': 395, 'age_mean': 68.26, 'age_sd': 9.00,
                     'samples_per_speaker': 1},
    'famous_people': {'n_samples': 245, 'age_mean': 59.25, 'age_sd': 13.60,
                      'samples_per_speaker': 15},
}


@dataclass
class FeatureMatrix:
    ids: np.ndarray
    speakers: np.ndarray
    ages: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    feature_names: list

    def __post_init__(self):
        self.ids = np.asarray(self.ids).astype(str)
        self.speakers = np.asarray(self.speakers).astype(str)
        self.ages = np.asarray(self.ages, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.feature_names = [str(name) for name in self.feature_names]

        n = self.ids.shape[0]
        if self.features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {self.features.shape}")
        for name, arr in (('speakers', self.speakers), ('ages', self.ages),
                          ('labels', self.labels), ('features', self.features)):
            if arr.shape[0] != n:
                raise DimensionError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if self.features.shape[1] != len(self.feature_names):
            raise DimensionError(
                f"{self.features.shape[1]} feature columns but {len(self.feature_names)} names")
        if not np.all(np.isfinite(self.ages)):
            raise InputError("ages must be finite")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise InputError("labels must be 0 (control) or 1 (dementia)")
        if not np.all(np.isfinite(self.features)):
            raise InputError("feature cells must be finite")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, index):
        index = np.asarray(index)
        return FeatureMatrix(self.ids[index], self.speakers[index], self.ages[index],
                             self.labels[index], self.features[index], list(self.feature_names))

    def with_features(self, features, feature_names=None):
        names = list(self.feature_names) if feature_names is None else feature_names
        return FeatureMatrix(self.ids, self.speakers, self.ages, self.labels, features, names)

    def class_composition(self):
        return {LABEL_NAMES[k]: int(np.sum(self.labels == k)) for k in (0, 1)}

    def to_frame(self):
        df = pd.DataFrame({'id': self.ids, 'speaker': self.speakers,
                           'age': self.ages, 'label': self.labels})
        feats = pd.DataFrame(self.features, columns=self.feature_names)
        return pd.concat([df, feats], axis=1)


# ============================================================
# CSV ingest / export
# ============================================================

def _parse_numeric(series, column):
    """Exact float parse of a string column; raises FormatError at the first bad cell."""
    coerced = pd.to_numeric(series.str.strip(), errors='coerce')
    bad = coerced.isna() | ~np.isfinite(coerced)
    if bad.any():
        idx = bad.idxmax()
        raise FormatError(f"non-numeric value {series[idx]!r}", row=int(idx) + 2, column=column)
    return series.str.strip().astype(np.float64).to_numpy()


def load_csv(path):
    """
    Read a feature table. Rows with a missing or unparseable age or label are
    dropped and counted; any other bad cell is a FormatError.

    Returns (FeatureMatrix, number of dropped rows).
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise InputError(f"feature file not found: {path}")
    except pd.errors.EmptyDataError:
        raise FormatError(f"feature file is empty: {path}")

    columns = list(raw.columns)
    if columns[:4] != ID_COLUMNS or len(columns) < 5:
        raise FormatError(
            f"header must be {','.join(ID_COLUMNS)},<feature names...>; got {','.join(columns[:5])}",
            row=1)

    ages = pd.to_numeric(raw['age'].str.strip(), errors='coerce')
    labels = pd.to_numeric(raw['label'].str.strip(), errors='coerce')
    keep = ages.notna() & np.isfinite(ages) & labels.notna()
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"dropped {dropped} row(s) with missing or unparseable age/label", DataWarning)
    kept = raw[keep]

    bad_label = ~labels[keep].isin([0, 1])
    if bad_label.any():
        idx = bad_label.idxmax()
        raise FormatError(f"label must be 0 or 1, got {raw.at[idx, 'label']!r}",
                          row=int(idx) + 2, column='label')

    feature_names = columns[4:]
    if len(kept):
        features = np.column_stack([_parse_numeric(kept[name], name) for name in feature_names])
    else:
        features = np.empty((0, len(feature_names)))

    matrix = FeatureMatrix(
        ids=kept['id'].to_numpy(),
        speakers=kept['speaker'].to_numpy(),
        ages=kept['age'].str.strip().astype(np.float64).to_numpy(),
        labels=labels[keep].astype(np.int64).to_numpy(),
        features=features,
        feature_names=feature_names,
    )
    return matrix, dropped


def save_csv(matrix, path):
    matrix.to_frame().to_csv(path, index=False)
    return path


# ============================================================
# z-score normalization
# ============================================================

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray
    feature_names: list


def zscore_fit(train):
    """Per-feature mean and population (1/n) standard deviation of a training fold."""
    if train.n_samples == 0:
        raise InputError("cannot fit normalization statistics on an empty fold")
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if constant.any():
        names = [n for n, c in zip(train.feature_names, constant) if c]
        warnings.warn(f"{len(names)} constant feature(s) left unscaled: {', '.join(names[:5])}",
                      DataWarning)
        std = np.where(constant, 1.0, std)
    return NormStats(mean=mean, std=std, constant=constant, feature_names=list(train.feature_names))


def _check_stats(stats, m):
    if m.n_features != stats.mean.shape[0]:
        raise DimensionError(f"normalization fit on {stats.mean.shape[0]} features, got {m.n_features}")


def zscore_apply(stats, m):
    _check_stats(stats, m)
    return m.with_features((m.features - stats.mean) / stats.std)


def zscore_invert(stats, m):
    _check_stats(stats, m)
    return m.with_features(m.features * stats.std + stats.mean)


# ============================================================
# Speaker-grouped cross validation
# ============================================================

@dataclass
class FoldPlan:
    k: int
    seed: int
    speaker_folds: dict
    sample_folds: np.ndarray

    def test_indices(self, fold):
        return np.flatnonzero(self.sample_folds == fold)

    def train_indices(self, fold):
        return np.flatnonzero(self.sample_folds != fold)

    def splits(self):
        for fold in range(self.k):
            yield fold, self.train_indices(fold), self.test_indices(fold)


def speaker_kfold(m, k, seed):
    """Shuffle speakers by seed and deal them round-robin into k folds."""
    if k < 2:
        raise InputError(f"need at least 2 folds, got {k}")
    speakers = np.unique(m.speakers)
    if len(speakers) < k:
        raise InputError(f"{len(speakers)} speakers cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(speakers))
    speaker_folds = {str(speakers[j]): i % k for i, j in enumerate(order)}
    sample_folds = np.array([speaker_folds[s] for s in m.speakers], dtype=np.int64)
    return FoldPlan(k=k, seed=seed, speaker_folds=speaker_folds, sample_folds=sample_folds)


# ============================================================
# Synthetic confounded data
# ============================================================

@dataclass
class SynthConfig:
    n_samples: int = 400
    n_features: int = 40
    confound_strength: float = 0.25     # cosine between age and disease effect directions
    age_mean: float = 68.26
    age_sd: float = 9.00
    disease_effect_scale: float = 2.5
    age_effect_scale: float = 3.0
    label_age_slope: float = 1.0        # logistic slope of P(dementia | standardized age)
    noise_sd: float = 1.0
    samples_per_speaker: int = 1
    session_age_span: float = 10.0      # years covered by one speaker's sessions
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2 or self.n_features < 1:
            raise InputError("synthetic data needs n_samples >= 2 and n_features >= 1")
        if not 0.0 <= self.confound_strength <= 1.0:
            raise InputError(f"confound strength must lie in [0, 1], got {self.confound_strength}")
        for name in ('age_sd', 'disease_effect_scale', 'age_effect_scale',
                     'label_age_slope', 'noise_sd', 'session_age_span'):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be nonnegative")
        if self.age_sd == 0:
            raise InputError("age_sd must be positive")
        if self.samples_per_speaker < 1:
            raise InputError("samples_per_speaker must be at least 1")


def synth_preset(name, **overrides):
    if name not in SYNTH_PRESETS:
        raise InputError(f"unknown synthetic preset {name!r}; choose from {sorted(SYNTH_PRESETS)}")
    return SynthConfig(**{**SYNTH_PRESETS[name], **overrides})


@dataclass
class SynthTruth:
    age_effect: np.ndarray
    disease_effect: np.ndarray
    config: SynthConfig
    speaker_ages: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {
            'config': asdict(self.config),
            'age_effect': self.age_effect.tolist(),
            'disease_effect': self.disease_effect.tolist(),
            'effect_cosine': float(np.dot(self.age_effect, self.disease_effect)
                                   / max(np.linalg.norm(self.age_effect)
                                         * np.linalg.norm(self.disease_effect), 1e-300)),
        }


def generate_synthetic(cfg):
    """
    Draw a confounded dataset:
        A ~ Normal(mean, sd) per speaker
        D ~ Bernoulli(sigmoid(slope * std(A)))
        X = w_A * std(A) + w_D * D + noise
    Returns (FeatureMatrix, SynthTruth).
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.n_features

    disease_dir = rng.normal(size=d)
    disease_dir /= np.linalg.norm(disease_dir)
    if d > 1:
        other = rng.normal(size=d)
        other -= other.dot(disease_dir) * disease_dir
        other /= np.linalg.norm(other)
    else:
        other = disease_dir
    rho = cfg.confound_strength
    w_disease = cfg.disease_effect_scale * disease_dir
    w_age = cfg.age_effect_scale * (rho * disease_dir + math.sqrt(1.0 - rho ** 2) * other)

    n_speakers = math.ceil(cfg.n_samples / cfg.samples_per_speaker)
    speaker_ages = rng.normal(cfg.age_mean, cfg.age_sd, size=n_speakers)
    p_impaired = expit(cfg.label_age_slope * (speaker_ages - cfg.age_mean) / cfg.age_sd)
    speaker_labels = (rng.random(n_speakers) < p_impaired).astype(np.int64)

    speaker_of = np.repeat(np.arange(n_speakers), cfg.samples_per_speaker)[:cfg.n_samples]
    ages = speaker_ages[speaker_of]
    if cfg.samples_per_speaker > 1:
        half = cfg.session_age_span / 2.0
        ages = ages + rng.uniform(-half, half, size=cfg.n_samples)
    labels = speaker_labels[speaker_of]

    std_age = (ages - cfg.age_mean) / cfg.age_sd
    noise = rng.normal(0.0, cfg.noise_sd, size=(cfg.n_samples, d))
    features = np.outer(std_age, w_age) + np.outer(labels, w_disease) + noise

    matrix = FeatureMatrix(
        ids=[f"s{i:04d}" for i in range(cfg.n_samples)],
        speakers=[f"spk{j:03d}" for j in speaker_of],
        ages=ages,
        labels=labels,
        features=features,
        feature_names=[f"f{j:03d}" for j in range(d)],
    )
    truth = SynthTruth(age_effect=w_age, disease_effect=w_disease, config=cfg,
                       speaker_ages=speaker_ages)
    return matrix, truth


def save_ground_truth(truth, path):
    with open(path, 'w') as f:
        json.dump(truth.to_dict(), f, indent=2)
    return path


def age_histogram(m, bin_width=5.0):
    """Age counts per label in fixed-width bins, as a table ready for CSV export."""
    if m.n_samples == 0:
        raise InputError("age histogram of an empty table")
    lo = math.floor(m.ages.min() / bin_width) * bin_width
    hi = math.floor(m.ages.max() / bin_width) * bin_width + bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    table = {'bin_left': edges[:-1], 'bin_right': edges[1:]}
    for label, name in LABEL_NAMES.items():
        counts, _ = np.histogram(m.ages[m.labels == label], bins=edges)
        table[name] = counts
    return pd.DataFrame(table)
