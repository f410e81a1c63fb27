"""
Fair-representation models that separate age from the diagnosis.

Every model compresses features x into a representation z = I(x) that a
classifier C reads, while an adversary A tries to recover age from z and
the interpreter is trained against it:

    simple          min_{I,C} L_c - L_a,  then K steps of min_A L_a
    autoencoder     as simple, plus a reconstructor R with L_r = |R(z) - x|^2
    consensus_net   M modality interpreters, a modality discriminator D
                    and a classifier on [z_1 .. z_M]
    entropy         adversary predicts age > mean age; its loss adds
                    lambda_H times the entropy of its prediction
                    (entropy_binary / entropy_Honly keep one term each)
    baseline_dnn    I and C trained on L_c only

Training alternates one joint update of the main networks (I, C, R) with
inner updates of D and A on the detached representation of the same batch.
"""
import copy
import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
from scipy.special import softmax
from sklearn.metrics import accuracy_score, mean_absolute_error

from data import speaker_kfold, zscore_apply, zscore_fit
from errors import DimensionError, FormatError, InputError, NumericError
from nn import (DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY, EVAL, GRADCHECK_EPS, TRAIN, Adam,
                as_tensor2, build_mlp, check_gradients, entropy_loss, entropy_of_bernoulli, l2_loss,
                network_from_description, nll_loss)

BUNDLE_FORMAT_VERSION = 1
SHUFFLE_STREAM = 1
PROBE_STREAM = 2

REGRESSION = 'regression'
CLASSIFICATION = 'classification'

HISTORY_COLUMNS = ['epoch', 'loss_c', 'loss_a', 'loss_r', 'loss_d']


class ModelKind(str, Enum):
    BASELINE_DNN = 'baseline_dnn'
    SIMPLE = 'simple'
    AUTOENCODER = 'autoencoder'
    CONSENSUS_NET = 'consensus_net'
    ENTROPY = 'entropy'
    ENTROPY_BINARY = 'entropy_binary'
    ENTROPY_HONLY = 'entropy_Honly'


MODEL_KINDS = [k.value for k in ModelKind]

ENTROPY_VARIANTS = {
    ModelKind.ENTROPY: 'full',
    ModelKind.ENTROPY_BINARY: 'binary',
    ModelKind.ENTROPY_HONLY: 'Honly',
}

WITH_RECONSTRUCTOR = {ModelKind.AUTOENCODER, *ENTROPY_VARIANTS}


def parse_kind(kind):
    try:
        return ModelKind(kind)
    except ValueError:
        raise InputError(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")


# ============================================================
# Configuration
# ============================================================

@dataclass
class TrainConfig:
    epochs: int = 100
    k_adversary: int = 5
    k_discriminator: int = 5
    k_adversary_consensus: int = 5
    batch_size: int = 32
    lambda_h: float = 0.5
    learning_rate: float = DEFAULT_LEARNING_RATE
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    adversary_weight: float = 1.0
    reconstruction_weight: float = 1.0
    discriminator_weight: float = 1.0
    seed: int = 0
    n_modalities: int = 3
    z_dim: int = 16
    interpreter_hidden: int = 64
    classifier_hidden: int = 16
    adversary_hidden: int = 16
    discriminator_hidden: int = 16
    reconstructor_hidden: int = 64
    probe_hidden: tuple = (64, 32, 8)
    probe_epochs: int = 100
    probe_folds: int = 5
    probe_learning_rate: float = 1e-2
    probe_weight_decay: float = 0.0
    probe_patience: int = 20         # epochs without a held-out improvement before stopping
    probe_validation: float = 0.2    # fraction of training speakers held out for early stopping
    age_mean: float = None      # None: taken from the training data
    age_sd: float = None

    def __post_init__(self):
        self.probe_hidden = tuple(int(h) for h in self.probe_hidden)
        for name in ('epochs', 'k_adversary', 'k_discriminator', 'k_adversary_consensus',
                     'batch_size', 'n_modalities', 'z_dim', 'interpreter_hidden',
                     'classifier_hidden', 'adversary_hidden', 'discriminator_hidden',
                     'reconstructor_hidden', 'probe_epochs', 'probe_patience'):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise InputError("batch_size must be at least 2 (batch normalization)")
        if self.probe_folds < 2:
            raise InputError("probe_folds must be at least 2")
        if not self.probe_hidden or min(self.probe_hidden) < 1:
            raise InputError(f"probe_hidden must list positive widths, got {self.probe_hidden}")
        for name in ('lambda_h', 'learning_rate', 'weight_decay', 'adversary_weight',
                     'reconstruction_weight', 'discriminator_weight', 'probe_learning_rate',
                     'probe_weight_decay'):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0.0 <= self.probe_validation < 1.0:
            raise InputError(f"probe_validation must lie in [0, 1), got {self.probe_validation}")
        if self.age_sd is not None and self.age_sd <= 0:
            raise InputError(f"age_sd must be positive, got {self.age_sd}")


# ============================================================
# Bundle
# ============================================================

@dataclass(frozen=True, eq=False)
class ModalitySplit:
    """Disjoint feature-column groups, one per modality, in modality order."""
    groups: tuple

    def __post_init__(self):
        groups = tuple(np.asarray(g, dtype=np.int64) for g in self.groups)
        object.__setattr__(self, 'groups', groups)
        if not groups or any(g.size == 0 for g in groups):
            raise InputError("every modality needs at least one feature")
        columns = np.sort(np.concatenate(groups))
        if not np.array_equal(columns, np.arange(columns.size)):
            raise InputError("modality groups must partition the feature columns")
        sizes = self.sizes
        if max(sizes) - min(sizes) > 1:
            raise InputError(f"modality sizes must be equal within one, got {sizes}")

    @property
    def n_modalities(self):
        return len(self.groups)

    @property
    def n_features(self):
        return sum(self.sizes)

    @property
    def sizes(self):
        return [int(g.size) for g in self.groups]

    def columns(self, x):
        return [x[:, g] for g in self.groups]

    def to_list(self):
        return [g.tolist() for g in self.groups]


def make_modality_split(n_features, n_modalities, rng):
    if n_modalities > n_features:
        raise InputError(f"{n_features} features cannot fill {n_modalities} modalities")
    order = rng.permutation(n_features)
    return ModalitySplit(tuple(np.sort(part) for part in np.array_split(order, n_modalities)))


@dataclass
class ModelBundle:
    kind: ModelKind
    interpreters: list
    classifier: object
    adversary: object = None
    reconstructor: object = None
    discriminator: object = None
    split: ModalitySplit = None
    config: TrainConfig = field(default_factory=TrainConfig)
    age_mean: float = None
    age_sd: float = None

    def __post_init__(self):
        self.kind = parse_kind(self.kind)
        z_dims = {net.out_features for net in self.interpreters}
        if len(z_dims) != 1:
            raise DimensionError(f"interpreters disagree on the representation width: {sorted(z_dims)}")
        z_dim = z_dims.pop()
        if self.classifier.in_features != z_dim * len(self.interpreters):
            raise DimensionError(
                f"classifier reads width {self.classifier.in_features}, "
                f"representation is {len(self.interpreters)} x {z_dim}")
        for net in (self.adversary, self.discriminator, self.reconstructor):
            if net is not None and net.in_features != z_dim:
                raise DimensionError(f"{net.name} reads width {net.in_features}, expected {z_dim}")
        if self.split is not None:
            if self.split.sizes != [net.in_features for net in self.interpreters]:
                raise DimensionError("modality split does not match the interpreter input widths")

    @property
    def is_consensus(self):
        return self.kind == ModelKind.CONSENSUS_NET

    @property
    def n_features(self):
        if self.split is not None:
            return self.split.n_features
        return self.interpreters[0].in_features

    @property
    def z_dim(self):
        return self.interpreters[0].out_features

    def main_networks(self):
        """Networks updated in the joint step."""
        nets = list(self.interpreters) + [self.classifier]
        if self.reconstructor is not None:
            nets.append(self.reconstructor)
        return nets

    def components(self):
        nets = self.main_networks()
        for net in (self.adversary, self.discriminator):
            if net is not None:
                nets.append(net)
        return nets


def build(kind, n_features, config):
    """
    Construct every component with one seeded generator. Interpreter and
    classifier are drawn first, so all kinds share their initial weights.
    """
    kind = parse_kind(kind)
    if n_features < 1:
        raise InputError(f"need at least one feature, got {n_features}")
    rng = np.random.default_rng(config.seed)
    z = config.z_dim

    split = None
    if kind == ModelKind.CONSENSUS_NET:
        split = make_modality_split(n_features, config.n_modalities, rng)
        interpreters = [build_mlp([size, config.interpreter_hidden, z], rng, name=f'interpreter{m}')
                        for m, size in enumerate(split.sizes)]
    else:
        interpreters = [build_mlp([n_features, config.interpreter_hidden, z], rng, name='interpreter')]
    classifier = build_mlp([z * len(interpreters), config.classifier_hidden, 2], rng, name='classifier')

    adversary = reconstructor = discriminator = None
    if kind != ModelKind.BASELINE_DNN:
        out = 2 if kind in ENTROPY_VARIANTS else 1
        adversary = build_mlp([z, config.adversary_hidden, out], rng, name='adversary')
    if kind in WITH_RECONSTRUCTOR:
        reconstructor = build_mlp([z, config.reconstructor_hidden, n_features], rng, name='reconstructor')
    if kind == ModelKind.CONSENSUS_NET:
        discriminator = build_mlp([z, config.discriminator_hidden, config.n_modalities], rng,
                                  name='discriminator')

    return ModelBundle(kind=kind, interpreters=interpreters, classifier=classifier,
                       adversary=adversary, reconstructor=reconstructor,
                       discriminator=discriminator, split=split, config=config)


# ============================================================
# Losses and the joint objective
# ============================================================

def adversary_targets(bundle, ages):
    """Standardized age column, or the over-mean indicator for entropy kinds."""
    ages = np.asarray(ages, dtype=np.float64)
    if bundle.age_mean is None or bundle.age_sd is None:
        raise InputError("age statistics are not set on this bundle")
    if bundle.kind in ENTROPY_VARIANTS:
        return (ages > bundle.age_mean).astype(np.int64)
    return ((ages - bundle.age_mean) / bundle.age_sd)[:, None]


def adversary_entropy(output):
    """Entropy of the adversary's P(age > mean), with its gradient w.r.t. the two logits."""
    h, grad = entropy_loss(output)
    if np.isfinite(h):
        h = entropy_of_bernoulli(softmax(output, axis=1)[:, 1])
    return h, grad


def adversary_loss(bundle, output, target, config):
    variant = ENTROPY_VARIANTS.get(bundle.kind)
    if variant is None:
        return l2_loss(output, target)
    if variant == 'Honly':
        h, grad_h = adversary_entropy(output)
        return config.lambda_h * h, config.lambda_h * grad_h
    ce, grad_ce = nll_loss(output, target)
    if variant == 'binary':
        return ce, grad_ce
    h, grad_h = adversary_entropy(output)
    return ce + config.lambda_h * h, grad_ce + config.lambda_h * grad_h


@dataclass
class JointPass:
    total: float
    loss_c: float
    loss_a: float = None
    loss_r: float = None
    loss_d: float = None
    adversary_input: np.ndarray = None
    adversary_target: np.ndarray = None
    discriminator_input: np.ndarray = None
    discriminator_target: np.ndarray = None

    def losses(self):
        return {'loss_c': self.loss_c, 'loss_a': self.loss_a,
                'loss_r': self.loss_r, 'loss_d': self.loss_d}


def joint_objective(bundle, x, labels, adv_target, config, backward=True):
    """
    L_c - w_a L_a + w_r L_r - w_d L_d on one batch (train mode). With
    ``backward`` the gradients of the main networks are filled; adversary and
    discriminator only pass gradients through to z.
    """
    if bundle.is_consensus:
        return _consensus_objective(bundle, x, labels, adv_target, config, backward)

    interpreter = bundle.interpreters[0]
    z = interpreter.forward(x, TRAIN, cache=backward)
    logits = bundle.classifier.forward(z, TRAIN, cache=backward)
    loss_c, grad_logits = nll_loss(logits, labels)
    result = JointPass(total=loss_c, loss_c=loss_c)
    grad_z = bundle.classifier.backward(grad_logits) if backward else None

    w_a = config.adversary_weight
    if bundle.adversary is not None:
        age_out = bundle.adversary.forward(z, TRAIN, cache=backward)
        loss_a, grad_a = adversary_loss(bundle, age_out, adv_target, config)
        result.loss_a = loss_a
        result.total -= w_a * loss_a
        result.adversary_input, result.adversary_target = z.copy(), adv_target
        if backward and w_a:
            # gradient reversal: the interpreter ascends L_a
            grad_z = grad_z + bundle.adversary.backward(-w_a * grad_a)

    w_r = config.reconstruction_weight
    if bundle.reconstructor is not None:
        x_hat = bundle.reconstructor.forward(z, TRAIN, cache=backward)
        loss_r, grad_r = l2_loss(x_hat, x)
        result.loss_r = loss_r
        result.total += w_r * loss_r
        if backward and w_r:
            grad_z = grad_z + bundle.reconstructor.backward(w_r * grad_r)

    if backward:
        interpreter.backward(grad_z)
    return result


def _consensus_objective(bundle, x, labels, adv_target, config, backward):
    n = x.shape[0]
    parts = bundle.split.columns(x)
    zs = [net.forward(part, TRAIN, cache=backward) for net, part in zip(bundle.interpreters, parts)]
    m = len(zs)

    logits = bundle.classifier.forward(np.hstack(zs), TRAIN, cache=backward)
    loss_c, grad_logits = nll_loss(logits, labels)

    # every modality's z stacked row-wise; D names the modality, A the age
    stacked = np.vstack(zs)
    modality = np.repeat(np.arange(m), n)
    age_target = np.tile(adv_target, (m, 1))
    loss_d, grad_d = nll_loss(bundle.discriminator.forward(stacked, TRAIN, cache=backward), modality)
    loss_a, grad_a = adversary_loss(bundle, bundle.adversary.forward(stacked, TRAIN, cache=backward),
                                    age_target, config)

    w_a, w_d = config.adversary_weight, config.discriminator_weight
    result = JointPass(total=loss_c - w_a * loss_a - w_d * loss_d, loss_c=loss_c,
                       loss_a=loss_a, loss_d=loss_d,
                       adversary_input=stacked.copy(), adversary_target=age_target,
                       discriminator_input=stacked.copy(), discriminator_target=modality)
    if backward:
        grad_cat = bundle.classifier.backward(grad_logits)
        grad_stacked = np.zeros_like(stacked)
        if w_d:
            grad_stacked += bundle.discriminator.backward(-w_d * grad_d)
        if w_a:
            grad_stacked += bundle.adversary.backward(-w_a * grad_a)
        width = bundle.z_dim
        for i, net in enumerate(bundle.interpreters):
            net.backward(grad_cat[:, i * width:(i + 1) * width] + grad_stacked[i * n:(i + 1) * n])
    return result


def _require_finite(value, loss, **context):
    if value is not None and not np.isfinite(value):
        raise NumericError("non-finite loss", loss=loss, **context)


# ============================================================
# Training
# ============================================================

@dataclass
class Optimizers:
    main: Adam
    adversary: Adam = None
    discriminator: Adam = None


def make_optimizers(bundle, config):
    def adam(nets):
        return Adam(nets, learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    return Optimizers(
        main=adam(bundle.main_networks()),
        adversary=adam([bundle.adversary]) if bundle.adversary is not None else None,
        discriminator=adam([bundle.discriminator]) if bundle.discriminator is not None else None,
    )


def minibatches(n_samples, batch_size, rng):
    """Shuffled index batches; a trailing singleton joins the batch before it."""
    order = rng.permutation(n_samples)
    batches = [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def _bystander_buffers(bundle):
    nets = [net for net in (bundle.adversary, bundle.discriminator) if net is not None]
    return [value for net in nets for _, value in net.buffers()]


def interpreter_step(bundle, x, labels, adv_target, optimizers, config, epoch=None, batch=None):
    """
    One update of I, C (and R) on the joint objective. A and D run in train
    mode for the gradient but keep their weights and batchnorm running stats.
    """
    buffers = _bystander_buffers(bundle)
    saved = [value.copy() for value in buffers]
    optimizers.main.zero_grad()
    result = joint_objective(bundle, x, labels, adv_target, config, backward=True)
    for value, before in zip(buffers, saved):
        value[...] = before
    for name, value in result.losses().items():
        _require_finite(value, name, epoch=epoch, batch=batch)
    optimizers.main.step()
    return result


def inner_steps(net, loss_fn, inputs, targets, optimizer, steps, epoch=None, batch=None):
    """``steps`` updates of one network on fixed inputs; returns the loss before each update."""
    losses = []
    for _ in range(steps):
        optimizer.zero_grad()
        out = net.forward(inputs, TRAIN, cache=True)
        loss, grad = loss_fn(out, targets)
        _require_finite(loss, net.name, epoch=epoch, batch=batch)
        net.backward(grad)
        optimizer.step()
        losses.append(loss)
    return losses


@dataclass
class LossHistory:
    rows: list = field(default_factory=list)

    def append(self, epoch, loss_c, loss_a=None, loss_r=None, loss_d=None):
        def value(v):
            return float('nan') if v is None else float(v)
        self.rows.append([epoch, value(loss_c), value(loss_a), value(loss_r), value(loss_d)])

    def column(self, name):
        return np.array([row[HISTORY_COLUMNS.index(name)] for row in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        return path


def _fit(bundle, data, config):
    x = as_tensor2(data.features, 'features')
    if x.shape[0] < 2:
        raise InputError("training needs at least 2 samples")
    if x.shape[1] != bundle.n_features:
        raise DimensionError(f"bundle expects {bundle.n_features} features, data has {x.shape[1]}")
    labels = data.labels

    bundle.config = config
    bundle.age_mean = float(data.ages.mean()) if config.age_mean is None else float(config.age_mean)
    sd = float(data.ages.std()) if config.age_sd is None else float(config.age_sd)
    bundle.age_sd = sd if sd > 0 else 1.0
    adv_target = adversary_targets(bundle, data.ages) if bundle.adversary is not None else None

    optimizers = make_optimizers(bundle, config)
    shuffle = np.random.default_rng([config.seed, SHUFFLE_STREAM])
    k_adversary = config.k_adversary_consensus if bundle.is_consensus else config.k_adversary

    def adversary_fn(out, target):
        return adversary_loss(bundle, out, target, config)

    history = LossHistory()
    for epoch in range(1, config.epochs + 1):
        seen = {name: [] for name in HISTORY_COLUMNS[1:]}
        for b, idx in enumerate(minibatches(x.shape[0], config.batch_size, shuffle), 1):
            target = adv_target[idx] if adv_target is not None else None
            result = interpreter_step(bundle, x[idx], labels[idx], target, optimizers, config,
                                      epoch=epoch, batch=b)
            if bundle.discriminator is not None:
                inner_steps(bundle.discriminator, nll_loss, result.discriminator_input,
                            result.discriminator_target, optimizers.discriminator,
                            config.k_discriminator, epoch=epoch, batch=b)
            if bundle.adversary is not None:
                inner_steps(bundle.adversary, adversary_fn, result.adversary_input,
                            result.adversary_target, optimizers.adversary, k_adversary,
                            epoch=epoch, batch=b)
            for name, value in result.losses().items():
                if value is not None:
                    seen[name].append(value)
        history.append(epoch, **{name: (np.mean(v) if v else None) for name, v in seen.items()})
    return bundle, history


def _require_kind(bundle, *kinds):
    if bundle.kind not in kinds:
        raise InputError(f"expected a {' or '.join(k.value for k in kinds)} bundle, got {bundle.kind.value}")


def train_simple(bundle, data, config):
    _require_kind(bundle, ModelKind.SIMPLE)
    return _fit(bundle, data, config)


def train_autoencoder(bundle, data, config):
    _require_kind(bundle, ModelKind.AUTOENCODER)
    return _fit(bundle, data, config)


def train_consensus(bundle, split, data, config):
    _require_kind(bundle, ModelKind.CONSENSUS_NET)
    if split is not None:
        if split.sizes != bundle.split.sizes:
            raise DimensionError(f"split sizes {split.sizes} do not fit interpreters {bundle.split.sizes}")
        bundle.split = split
    return _fit(bundle, data, config)


def train_entropy(bundle, data, config, variant='full'):
    expected = {v: k for k, v in ENTROPY_VARIANTS.items()}
    if variant not in expected:
        raise InputError(f"unknown entropy variant {variant!r}; choose from {sorted(expected)}")
    _require_kind(bundle, expected[variant])
    return _fit(bundle, data, config)


def train_baseline_dnn(data, config):
    bundle = build(ModelKind.BASELINE_DNN, data.n_features, config)
    return _fit(bundle, data, config)


def train(bundle, data, config):
    """Dispatch on the bundle's kind."""
    if bundle.kind in ENTROPY_VARIANTS:
        return train_entropy(bundle, data, config, ENTROPY_VARIANTS[bundle.kind])
    if bundle.kind == ModelKind.CONSENSUS_NET:
        return train_consensus(bundle, None, data, config)
    return _fit(bundle, data, config)


def build_and_train(kind, data, config):
    return train(build(kind, data.n_features, config), data, config)


# ============================================================
# Inference
# ============================================================

def representation(bundle, x):
    """z in eval mode; consensus bundles concatenate z_1 .. z_M in modality order."""
    x = as_tensor2(x)
    if x.shape[1] != bundle.n_features:
        raise DimensionError(f"bundle expects {bundle.n_features} features, got {x.shape[1]}")
    if bundle.is_consensus:
        return np.hstack([net.forward(part, EVAL)
                          for net, part in zip(bundle.interpreters, bundle.split.columns(x))])
    return bundle.interpreters[0].forward(x, EVAL)


def representation_matrix(bundle, m):
    """The same samples with features replaced by their representation."""
    z = representation(bundle, m.features)
    return m.with_features(z, [f"z{j:03d}" for j in range(z.shape[1])])


def predict(bundle, x):
    """Hard labels (ties go to class 0) and class probabilities."""
    logits = bundle.classifier.forward(representation(bundle, x), EVAL)
    return np.argmax(logits, axis=1).astype(np.int64), softmax(logits, axis=1)


# ============================================================
# Probes
# ============================================================

@dataclass
class ProbeResult:
    metric: str                 # 'mae' in years, or 'accuracy'
    value: float
    std: float
    baseline: float             # mean-age predictor MAE / majority-class accuracy
    fold_values: list

    def to_dict(self):
        return asdict(self)


def _validation_rows(speakers, fraction, rng):
    """Speaker-disjoint validation mask; all False when the split would leave too little to fit."""
    names = np.unique(speakers)
    n_held = int(round(fraction * names.size))
    if n_held < 1 or n_held >= names.size:
        return np.zeros(len(speakers), dtype=bool)
    held = np.isin(speakers, rng.choice(names, size=n_held, replace=False))
    if np.sum(~held) < 2:
        return np.zeros(len(speakers), dtype=bool)
    return held


def _fit_probe(x, target, task, config, speakers=None):
    """
    Fresh MLP with its own optimizer settings. The output layer starts at zero,
    so the untrained regressor is the mean predictor; the weights kept are the
    ones with the lowest loss on held-out speakers (early stopping).
    """
    rng = np.random.default_rng(config.seed)
    out = 1 if task == REGRESSION else 2
    net = build_mlp([x.shape[1], *config.probe_hidden, out], rng, name='probe')
    head = net.layers[-1]
    head.weights[...] = 0.0
    head.bias[...] = 0.0
    optimizer = Adam([net], learning_rate=config.probe_learning_rate,
                     weight_decay=config.probe_weight_decay)
    loss_fn = l2_loss if task == REGRESSION else nll_loss
    shuffle = np.random.default_rng([config.seed, PROBE_STREAM])

    speakers = np.arange(x.shape[0]) if speakers is None else np.asarray(speakers)
    held = _validation_rows(speakers, config.probe_validation, shuffle)
    fit_x, fit_target = x[~held], target[~held]

    def held_out_loss():
        return loss_fn(net.forward(x[held], EVAL), target[held])[0]

    if not held.any():
        best = None
    else:
        best, best_loss, waited = copy.deepcopy(net), held_out_loss(), 0
    for epoch in range(1, config.probe_epochs + 1):
        for b, idx in enumerate(minibatches(fit_x.shape[0], config.batch_size, shuffle), 1):
            inner_steps(net, loss_fn, fit_x[idx], fit_target[idx], optimizer, 1, epoch=epoch, batch=b)
        if best is None:
            continue
        loss = held_out_loss()
        if loss < best_loss:
            best, best_loss, waited = copy.deepcopy(net), loss, 0
        else:
            waited += 1
            if waited >= config.probe_patience:
                break
    return net if best is None else best


def _probe_inputs(train, test):
    stats = zscore_fit(train)
    return zscore_apply(stats, train).features, zscore_apply(stats, test).features


def probe_age_holdout(train, test, config):
    """Age regressor fit on one split. Returns (MAE, mean-predictor MAE) in years."""
    x_train, x_test = _probe_inputs(train, test)
    mean = float(train.ages.mean())
    sd = float(train.ages.std()) or 1.0
    net = _fit_probe(x_train, ((train.ages - mean) / sd)[:, None], REGRESSION, config,
                     speakers=train.speakers)
    predicted = net.forward(x_test, EVAL)[:, 0] * sd + mean
    return (float(mean_absolute_error(test.ages, predicted)),
            float(mean_absolute_error(test.ages, np.full(test.n_samples, mean))))


def probe_age_group_holdout(train, test, config):
    """Over-mean-age classifier fit on one split. Returns (accuracy, majority accuracy)."""
    x_train, x_test = _probe_inputs(train, test)
    threshold = train.ages.mean()
    y_train = (train.ages > threshold).astype(np.int64)
    y_test = (test.ages > threshold).astype(np.int64)
    net = _fit_probe(x_train, y_train, CLASSIFICATION, config, speakers=train.speakers)
    predicted = np.argmax(net.forward(x_test, EVAL), axis=1)
    majority = 1 if y_train.mean() >= 0.5 else 0
    return (float(accuracy_score(y_test, predicted)),
            float(accuracy_score(y_test, np.full_like(y_test, majority))))


def _cross_validate(data, config, holdout, metric):
    plan = speaker_kfold(data, config.probe_folds, config.seed)
    values, baselines = [], []
    for _, train_idx, test_idx in plan.splits():
        value, baseline = holdout(data.subset(train_idx), data.subset(test_idx), config)
        values.append(value)
        baselines.append(baseline)
    return ProbeResult(metric=metric, value=float(np.mean(values)), std=float(np.std(values)),
                       baseline=float(np.mean(baselines)), fold_values=values)


def probe_age(data, config):
    """Speaker-grouped cross-validated age MAE of a fresh regressor on ``data.features``."""
    return _cross_validate(data, config, probe_age_holdout, 'mae')


def probe_age_group(data, config):
    return _cross_validate(data, config, probe_age_group_holdout, 'accuracy')


# ============================================================
# Persistence
# ============================================================

def save_bundle(bundle, path):
    arrays = {}
    components = {}
    for net in bundle.components():
        components[net.name] = net.describe()
        for name, value, _ in net.parameters():
            arrays[name] = value.astype('<f8')
        for name, value in net.buffers():
            arrays[name] = value.astype('<f8')

    def role(net):
        return net.name if net is not None else None

    meta = {
        'format_version': BUNDLE_FORMAT_VERSION,
        'kind': bundle.kind.value,
        'components': components,
        'roles': {
            'interpreters': [net.name for net in bundle.interpreters],
            'classifier': bundle.classifier.name,
            'adversary': role(bundle.adversary),
            'reconstructor': role(bundle.reconstructor),
            'discriminator': role(bundle.discriminator),
        },
        'config': asdict(bundle.config),
        'split': bundle.split.to_list() if bundle.split is not None else None,
        'age_mean': bundle.age_mean,
        'age_sd': bundle.age_sd,
    }
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_bundle(path):
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise InputError(f"bundle file not found: {path}")
    with archive:
        if '__meta__' not in archive.files:
            raise FormatError(f"{path} is not a model bundle")
        meta = json.loads(archive['__meta__'].item())
        if meta.get('format_version') != BUNDLE_FORMAT_VERSION:
            raise FormatError(f"unsupported bundle format version {meta.get('format_version')!r}")

        nets = {name: network_from_description(desc, name) for name, desc in meta['components'].items()}
        for net in nets.values():
            entries = [(n, v) for n, v, _ in net.parameters()] + net.buffers()
            for name, value in entries:
                if name not in archive.files or archive[name].shape != value.shape:
                    raise FormatError(f"bundle array {name} is missing or has the wrong shape")
                value[...] = archive[name]

    roles = meta['roles']

    def pick(role):
        return nets[roles[role]] if roles[role] is not None else None

    split = meta['split']
    return ModelBundle(
        kind=meta['kind'],
        interpreters=[nets[name] for name in roles['interpreters']],
        classifier=pick('classifier'),
        adversary=pick('adversary'),
        reconstructor=pick('reconstructor'),
        discriminator=pick('discriminator'),
        split=ModalitySplit(tuple(split)) if split is not None else None,
        config=TrainConfig(**meta['config']),
        age_mean=meta['age_mean'],
        age_sd=meta['age_sd'],
    )


# ============================================================
# Gradient verification of the loss assemblies
# ============================================================

GRADCHECK_SIZES = dict(interpreter_hidden=5, z_dim=3, classifier_hidden=4, adversary_hidden=4,
                       reconstructor_hidden=5, discriminator_hidden=4, n_modalities=3)


def assembly_gradcheck(kind, seed=0, n_samples=10, n_features=6, eps=GRADCHECK_EPS):
    """Max relative gradient error of the joint objective w.r.t. the main networks."""
    rng = np.random.default_rng(seed)
    config = TrainConfig(seed=seed, **GRADCHECK_SIZES)
    bundle = build(kind, n_features, config)
    x = rng.normal(size=(n_samples, n_features))
    labels = np.arange(n_samples) % 2
    ages = rng.normal(68.0, 9.0, size=n_samples)
    bundle.age_mean, bundle.age_sd = float(ages.mean()), float(ages.std())
    target = adversary_targets(bundle, ages) if bundle.adversary is not None else None

    probe = copy.deepcopy(bundle)
    nets = probe.main_networks()

    def objective(backward):
        if backward:
            for net in nets:
                net.zero_grad()
        return joint_objective(probe, x, labels, target, config, backward).total

    return check_gradients(objective, [entry for net in nets for entry in net.parameters()], eps)
