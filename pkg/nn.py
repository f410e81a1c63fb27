"""
Dense neural-network engine.

Feedforward stacks of dense / ReLU / batch-norm layers with explicit
forward and backward passes, the losses used by the fair-representation
models, Adam with decoupled weight decay, and a central finite-difference
gradient checker. Everything is float64 with rows as samples.
"""
import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import entr, log_softmax

from errors import DimensionError, InputError, NumericError, StateError

TRAIN = 'train'
EVAL = 'eval'
MODES = (TRAIN, EVAL)

DEFAULT_LEARNING_RATE = 3e-4
DEFAULT_WEIGHT_DECAY = 1e-3
GRADCHECK_EPS = 1e-4


def as_tensor2(x, name='x'):
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (rows x cols), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


# ============================================================
# Layers
# ============================================================

class Dense:
    kind = 'dense'

    def __init__(self, in_features, out_features, rng=None, weights=None, bias=None):
        if weights is None:
            # He-uniform
            limit = np.sqrt(6.0 / in_features)
            rng = rng if rng is not None else np.random.default_rng()
            weights = rng.uniform(-limit, limit, size=(out_features, in_features))
        self.weights = np.array(weights, dtype=np.float64)
        if self.weights.shape != (out_features, in_features):
            raise DimensionError(
                f"dense weights must be ({out_features}, {in_features}), got {self.weights.shape}")
        self.bias = np.zeros(out_features) if bias is None else np.array(bias, dtype=np.float64)
        if self.bias.shape != (out_features,):
            raise DimensionError(f"dense bias must have length {out_features}")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._input = None

    @property
    def in_features(self):
        return self.weights.shape[1]

    @property
    def out_features(self):
        return self.weights.shape[0]

    def forward(self, x, mode, cache):
        self._input = x if cache else None
        return x @ self.weights.T + self.bias

    def backward(self, grad):
        if self._input is None:
            raise StateError("dense layer: backward without a cached forward")
        self.grad_weights[...] = grad.T @ self._input
        self.grad_bias[...] = grad.sum(axis=0)
        grad_in = grad @ self.weights
        self._input = None
        return grad_in

    def parameters(self):
        return [('weight', self.weights, self.grad_weights),
                ('bias', self.bias, self.grad_bias)]

    def buffers(self):
        return []


class ReLU:
    kind = 'relu'
    in_features = None
    out_features = None

    def __init__(self):
        self._mask = None

    def forward(self, x, mode, cache):
        # np.maximum keeps NaN so a broken weight surfaces downstream
        self._mask = (x > 0) if cache else None
        return np.maximum(x, 0.0)

    def backward(self, grad):
        if self._mask is None:
            raise StateError("relu layer: backward without a cached forward")
        grad_in = np.where(self._mask, grad, 0.0)
        self._mask = None
        return grad_in

    def parameters(self):
        return []

    def buffers(self):
        return []


class BatchNorm:
    """Per-feature batch normalization; running statistics drive eval mode."""
    kind = 'batchnorm'

    def __init__(self, width, momentum=0.1, eps=1e-8):
        if not 0.0 < momentum < 1.0:
            raise InputError(f"batchnorm momentum must lie in (0, 1), got {momentum}")
        if eps <= 0:
            raise InputError(f"batchnorm epsilon must be positive, got {eps}")
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.grad_gamma = np.zeros(width)
        self.grad_beta = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self._cache = None

    @property
    def in_features(self):
        return self.gamma.shape[0]

    out_features = in_features

    def forward(self, x, mode, cache):
        if mode == TRAIN:
            if x.shape[0] < 2:
                raise DimensionError("train-mode batch normalization needs at least 2 rows")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._cache = (mode, x_hat, inv_std) if cache else None
        return self.gamma * x_hat + self.beta

    def backward(self, grad):
        if self._cache is None:
            raise StateError("batchnorm layer: backward without a cached forward")
        mode, x_hat, inv_std = self._cache
        self.grad_gamma[...] = (grad * x_hat).sum(axis=0)
        self.grad_beta[...] = grad.sum(axis=0)
        d_xhat = grad * self.gamma
        if mode == TRAIN:
            n = grad.shape[0]
            grad_in = (inv_std / n) * (n * d_xhat - d_xhat.sum(axis=0)
                                       - x_hat * (d_xhat * x_hat).sum(axis=0))
        else:
            grad_in = d_xhat * inv_std
        self._cache = None
        return grad_in

    def parameters(self):
        return [('gamma', self.gamma, self.grad_gamma),
                ('beta', self.beta, self.grad_beta)]

    def buffers(self):
        return [('running_mean', self.running_mean), ('running_var', self.running_var)]


# ============================================================
# Network
# ============================================================

class Network:
    """Ordered stack of layers with chained widths."""

    def __init__(self, layers, name='net'):
        if not layers:
            raise InputError("a network needs at least one layer")
        self.layers = list(layers)
        self.name = name
        width = None
        for i, layer in enumerate(self.layers):
            if layer.in_features is None:
                continue
            if width is not None and layer.in_features != width:
                raise DimensionError(
                    f"{name}: layer {i} ({layer.kind}) expects width {layer.in_features}, got {width}")
            width = layer.out_features
        widths = [l for l in self.layers if l.in_features is not None]
        if not widths:
            raise InputError(f"{name}: a network needs at least one dense or batchnorm layer")
        self.in_features = widths[0].in_features
        self.out_features = widths[-1].out_features
        self._ready = False

    def forward(self, x, mode=TRAIN, cache=None):
        if mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"{self.name}: expected input of width {self.in_features}, got shape {x.shape}")
        keep = (mode == TRAIN) if cache is None else cache
        for layer in self.layers:
            x = layer.forward(x, mode, keep)
        self._ready = keep
        return x

    def backward(self, upstream_grad):
        """Populate every parameter gradient and return the input gradient."""
        if not self._ready:
            raise StateError(f"{self.name}: backward called without a preceding train-mode forward")
        grad = np.asarray(upstream_grad, dtype=np.float64)
        if grad.ndim != 2 or grad.shape[1] != self.out_features:
            raise DimensionError(
                f"{self.name}: upstream gradient must have width {self.out_features}, got {grad.shape}")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        self._ready = False
        return grad

    def parameters(self):
        """(name, value, grad) triples in layer order; values are updated in place."""
        return [(f"{self.name}.{i}.{pname}", value, grad)
                for i, layer in enumerate(self.layers)
                for pname, value, grad in layer.parameters()]

    def buffers(self):
        return [(f"{self.name}.{i}.{bname}", value)
                for i, layer in enumerate(self.layers)
                for bname, value in layer.buffers()]

    def zero_grad(self):
        for _, _, grad in self.parameters():
            grad[...] = 0.0

    def describe(self):
        """Layer kinds and widths, enough to rebuild the stack."""
        spec = []
        for layer in self.layers:
            if layer.kind == 'dense':
                spec.append(['dense', layer.in_features, layer.out_features])
            elif layer.kind == 'batchnorm':
                spec.append(['batchnorm', layer.in_features])
            else:
                spec.append([layer.kind])
        return spec

    def __repr__(self):
        kinds = ' -> '.join(layer.kind for layer in self.layers)
        return f"Network({self.name}: {self.in_features} -> {self.out_features}; {kinds})"


def build_mlp(widths, rng, name='net'):
    """Dense+ReLU hidden layers, one batchnorm right before the output layer."""
    if len(widths) < 2:
        raise InputError(f"{name}: need at least input and output widths, got {widths}")
    layers = []
    for i in range(len(widths) - 2):
        layers += [Dense(widths[i], widths[i + 1], rng), ReLU()]
    if len(widths) > 2:
        layers.append(BatchNorm(widths[-2]))
    layers.append(Dense(widths[-2], widths[-1], rng))
    return Network(layers, name=name)


def network_from_description(description, name='net'):
    """Rebuild an (uninitialized) network from ``Network.describe`` output."""
    layers = []
    for entry in description:
        if entry[0] == 'dense':
            layers.append(Dense(entry[1], entry[2], weights=np.zeros((entry[2], entry[1]))))
        elif entry[0] == 'batchnorm':
            layers.append(BatchNorm(entry[1]))
        elif entry[0] == 'relu':
            layers.append(ReLU())
        else:
            raise InputError(f"unknown layer kind {entry[0]!r}")
    return Network(layers, name=name)


# ============================================================
# Losses
# ============================================================

def _class_indices(labels, n_rows, n_classes):
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    as_int = labels.astype(np.int64)
    if not np.array_equal(as_int, labels) or as_int.min() < 0 or as_int.max() >= n_classes:
        raise InputError(f"labels must be class indices in [0, {n_classes - 1}]")
    return as_int


def nll_loss(logits, labels):
    """Mean negative log-softmax likelihood; gradient (softmax - onehot) / batch."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"logits must be 2-D with at least 2 columns, got {logits.shape}")
    n = logits.shape[0]
    labels = _class_indices(labels, n, logits.shape[1])
    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def l2_loss(pred, target):
    """Squared error summed over columns, averaged over rows."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match target {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    return float((diff ** 2).sum() / n), 2.0 * diff / n


def entropy_of_bernoulli(probs):
    """Mean binary entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise InputError("entropy of an empty probability vector")
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise InputError("probabilities must lie in [0, 1]")
    return float((entr(p) + entr(1.0 - p)).mean())


def entropy_loss(logits):
    """Mean entropy of softmax(logits) per row, with its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"logits must be 2-D with at least 2 columns, got {logits.shape}")
    n = logits.shape[0]
    log_q = log_softmax(logits, axis=1)
    q = np.exp(log_q)
    row_entropy = -(q * log_q).sum(axis=1)
    grad = -q * (log_q + row_entropy[:, None]) / n
    return float(row_entropy.mean()), grad


# ============================================================
# Adam with decoupled weight decay
# ============================================================

@dataclass
class AdamState:
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InputError(f"learning rate must be nonnegative, got {self.learning_rate}")
        for name in ('beta1', 'beta2'):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise InputError(f"{name} must lie in (0, 1), got {value}")
        if self.eps <= 0:
            raise InputError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise InputError(f"weight decay must be nonnegative, got {self.weight_decay}")


def adam_step(params, grads, state, names=None):
    """
    One in-place Adam update with bias correction and decoupled decay:
        p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    names = names or [f"param_{i}" for i in range(len(params))]
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    for name, p, g, m in zip(names, params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"{name}: parameter {p.shape}, gradient {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", parameter=name, step=state.step + 1)

    state.step += 1
    lr = state.learning_rate
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        decay = state.weight_decay * p
        p -= lr * ((m / correction1) / (np.sqrt(v / correction2) + state.eps) + decay)
    return params, state


class Adam:
    """Adam over the parameters of one or more networks."""

    def __init__(self, networks, learning_rate=DEFAULT_LEARNING_RATE, weight_decay=DEFAULT_WEIGHT_DECAY,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.networks = list(networks)
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2,
                               eps=eps, weight_decay=weight_decay)

    def parameters(self):
        return [entry for net in self.networks for entry in net.parameters()]

    def zero_grad(self):
        for net in self.networks:
            net.zero_grad()

    def step(self):
        entries = self.parameters()
        adam_step([v for _, v, _ in entries], [g for _, _, g in entries], self.state,
                  names=[n for n, _, _ in entries])


# ============================================================
# Gradient verification
# ============================================================

def check_gradients(objective, parameters, eps=GRADCHECK_EPS):
    """
    Max relative error between analytic and central-difference gradients.

    ``objective(backward)`` recomputes the loss from the current parameter
    values; with ``backward=True`` it also fills the gradient buffers listed
    in ``parameters`` as (name, value, grad) triples.
    """
    objective(True)
    analytic = [grad.copy() for _, _, grad in parameters]
    worst = 0.0
    for (_, value, _), exact in zip(parameters, analytic):
        for i in range(value.size):
            original = value.flat[i]
            value.flat[i] = original + eps
            plus = objective(False)
            value.flat[i] = original - eps
            minus = objective(False)
            value.flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = exact.flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def gradcheck(net, loss_fn, x, targets, mode=TRAIN, eps=GRADCHECK_EPS):
    """Gradient check of ``loss_fn(net(x), targets)`` on a private copy of ``net``."""
    probe = copy.deepcopy(net)
    x = as_tensor2(x)

    def objective(backward):
        out = probe.forward(x, mode, cache=backward)
        loss, grad = loss_fn(out, targets)
        if backward:
            probe.backward(grad)
        return loss

    return check_gradients(objective, probe.parameters(), eps)
