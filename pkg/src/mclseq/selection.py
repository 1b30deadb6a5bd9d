"""Inference-time model selection.

Three ways to pick which ensemble member predicts a given sequence: the
oracle (lowest true prediction error — needs the future, so it is an upper
bound, not a deployable strategy), reconstruction error on the observed
prefix, and a small feed-forward classifier with batch normalization that
maps concatenated encoder states to a member probability.
"""

import copy
from dataclasses import dataclass
import warnings

import numpy as np

from .numerics import Rng
from .seq2seq import decode_reconstruct, encode, predict_future
from .training import Ensemble, OptimizerConfig, clip_gradients, sgd_momentum_update

STRATEGIES = ("oracle", "reconstruction", "classifier", "average")


@dataclass
class SelectionResult:
    """Choice of one member for one sequence.

    `model_index` is 1-based (member 1..M); `scores` holds the per-member
    quantity the choice was made on (losses or probabilities).
    """

    model_index: int
    scores: np.ndarray
    strategy: str
    deployable: bool = True

    def __post_init__(self):
        if not 1 <= self.model_index <= len(self.scores):
            raise ValueError(f"model_index {self.model_index} outside 1..{len(self.scores)}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


# ---------------------------------------------------------------------------
# error tables and the two loss-based strategies
# ---------------------------------------------------------------------------

def _as_batch(windows: np.ndarray) -> np.ndarray:
    windows = np.asarray(windows)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.ndim != 3:
        raise ValueError(f"expected [N x frames x D] windows, got shape {windows.shape}")
    return windows


def prediction_errors(ensemble: Ensemble, windows: np.ndarray) -> np.ndarray:
    """[N x M] mean squared error over the predicted frames only."""
    windows = _as_batch(windows)
    spec = ensemble.spec
    if windows.shape[1] != spec.L:
        raise ValueError(f"need full {spec.L}-frame samples, got {windows.shape[1]}")
    prefix = windows[:, :spec.prefix_len].transpose(1, 0, 2)
    future = windows[:, spec.prefix_len:].transpose(1, 0, 2)
    cols = []
    for member in ensemble.members:
        pred = predict_future(member.model, encode(member.model, prefix))
        cols.append(((pred - future) ** 2).mean(axis=(0, 2)))
    return np.stack(cols, axis=1)


def reconstruction_errors(ensemble: Ensemble, prefixes: np.ndarray) -> np.ndarray:
    """[N x M] mean squared error of the reconstructed input prefix."""
    prefixes = _as_batch(prefixes)
    spec = ensemble.spec
    if prefixes.shape[1] != spec.prefix_len:
        raise ValueError(f"need {spec.prefix_len}-frame prefixes, got {prefixes.shape[1]}")
    tm = prefixes.transpose(1, 0, 2)
    cols = []
    for member in ensemble.members:
        recon = decode_reconstruct(member.model, encode(member.model, tm))
        cols.append(((recon - tm) ** 2).mean(axis=(0, 2)))
    return np.stack(cols, axis=1)


def _select_min(errors: np.ndarray, strategy: str, deployable: bool) -> list:
    return [SelectionResult(model_index=int(np.argmin(row)) + 1, scores=row,
                            strategy=strategy, deployable=deployable)
            for row in errors]


def oracle_select_many(ensemble: Ensemble, windows: np.ndarray) -> list:
    """Lowest true prediction error per sample; requires the future frames."""
    return _select_min(prediction_errors(ensemble, windows), "oracle", deployable=False)


def oracle_select(ensemble: Ensemble, full_sample: np.ndarray) -> SelectionResult:
    return oracle_select_many(ensemble, full_sample)[0]


def reconstruction_select_many(ensemble: Ensemble, prefixes: np.ndarray) -> list:
    """Lowest reconstruction error per sample; uses only the observed prefix."""
    return _select_min(reconstruction_errors(ensemble, prefixes), "reconstruction",
                       deployable=True)


def reconstruction_select(ensemble: Ensemble, input_prefix: np.ndarray) -> SelectionResult:
    return reconstruction_select_many(ensemble, input_prefix)[0]


# ---------------------------------------------------------------------------
# classifier features
# ---------------------------------------------------------------------------

def classifier_features(ensemble: Ensemble, input_prefix: np.ndarray) -> np.ndarray:
    """Concatenation over members of the top encoder h at the last input step.

    Accepts one prefix [P x D] (returns [M*hidden]) or a batch [N x P x D]
    (returns [N x M*hidden]).
    """
    single = np.asarray(input_prefix).ndim == 2
    prefixes = _as_batch(input_prefix)
    tm = prefixes.transpose(1, 0, 2)
    parts = [encode(member.model, tm)[-1].h for member in ensemble.members]
    features = np.concatenate(parts, axis=1)
    return features[0] if single else features


# ---------------------------------------------------------------------------
# the MLP with batch normalization
# ---------------------------------------------------------------------------

@dataclass
class MlpClassifier:
    """input -> fc -> batchnorm -> relu -> fc -> batchnorm -> relu -> fc -> softmax."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    bn1_gamma: np.ndarray
    bn1_beta: np.ndarray
    bn1_mean: np.ndarray
    bn1_var: np.ndarray
    bn2_gamma: np.ndarray
    bn2_beta: np.ndarray
    bn2_mean: np.ndarray
    bn2_var: np.ndarray
    bn_eps: float = 1e-5
    bn_decay: float = 0.9   # running stats keep this fraction of the old value

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W3.shape[0]


def init_classifier(rng: Rng, input_dim: int, n_classes: int,
                    hidden=(256, 64), dtype=np.float32) -> MlpClassifier:
    """Uniform fan-balanced weight init; identity batch-norm state."""
    h1, h2 = hidden

    def layer(r, fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = r.uniform(-limit, limit, (fan_out, fan_in)).astype(dtype)
        return w, np.zeros(fan_out, dtype=dtype)

    w1, b1 = layer(rng.split(0), h1, input_dim)
    w2, b2 = layer(rng.split(1), h2, h1)
    w3, b3 = layer(rng.split(2), n_classes, h2)
    return MlpClassifier(
        W1=w1, b1=b1, W2=w2, b2=b2, W3=w3, b3=b3,
        bn1_gamma=np.ones(h1, dtype=dtype), bn1_beta=np.zeros(h1, dtype=dtype),
        bn1_mean=np.zeros(h1, dtype=dtype), bn1_var=np.ones(h1, dtype=dtype),
        bn2_gamma=np.ones(h2, dtype=dtype), bn2_beta=np.zeros(h2, dtype=dtype),
        bn2_mean=np.zeros(h2, dtype=dtype), bn2_var=np.ones(h2, dtype=dtype))


def classifier_param_list(clf: MlpClassifier) -> list:
    """Trainable parameters in canonical order (running stats excluded)."""
    return [clf.W1, clf.b1, clf.W2, clf.b2, clf.W3, clf.b3,
            clf.bn1_gamma, clf.bn1_beta, clf.bn2_gamma, clf.bn2_beta]


def _bn_forward(z, gamma, beta, running_mean, running_var, eps, decay, train):
    """Returns (output, cache); updates running stats in place when training."""
    if train:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        running_mean *= decay
        running_mean += (1.0 - decay) * mean.astype(running_mean.dtype)
        running_var *= decay
        running_var += (1.0 - decay) * var.astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (z - mean) * inv_std
    return gamma * x_hat + beta, (x_hat, inv_std)


def _bn_backward(dy, gamma, cache):
    """Gradient through batch-statistics normalization."""
    x_hat, inv_std = cache
    dbeta = dy.sum(axis=0)
    dgamma = (dy * x_hat).sum(axis=0)
    dx_hat = dy * gamma
    dz = inv_std * (dx_hat - dx_hat.mean(axis=0) - x_hat * (dx_hat * x_hat).mean(axis=0))
    return dz, dgamma, dbeta


def classifier_forward(clf: MlpClassifier, x: np.ndarray, train: bool = False):
    """Per-class probabilities [B x M]; with train=True also returns the cache."""
    x = np.asarray(x)
    z1 = x @ clf.W1.T + clf.b1
    y1, c1 = _bn_forward(z1, clf.bn1_gamma, clf.bn1_beta, clf.bn1_mean,
                         clf.bn1_var, clf.bn_eps, clf.bn_decay, train)
    a1 = np.maximum(y1, 0.0)
    z2 = a1 @ clf.W2.T + clf.b2
    y2, c2 = _bn_forward(z2, clf.bn2_gamma, clf.bn2_beta, clf.bn2_mean,
                         clf.bn2_var, clf.bn_eps, clf.bn_decay, train)
    a2 = np.maximum(y2, 0.0)
    z3 = a2 @ clf.W3.T + clf.b3
    shifted = z3 - z3.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    if not train:
        return probs
    log_probs = shifted - np.log(expz.sum(axis=1, keepdims=True))
    cache = (x, y1, c1, a1, y2, c2, a2, probs, log_probs)
    return probs, cache


def classifier_loss_and_grads(clf: MlpClassifier, cache, labels: np.ndarray):
    """Mean cross-entropy and gradients in classifier_param_list order."""
    x, y1, c1, a1, y2, c2, a2, probs, log_probs = cache
    n = len(labels)
    loss = -float(log_probs[np.arange(n), labels].mean())

    dz3 = probs.copy()
    dz3[np.arange(n), labels] -= 1.0
    dz3 /= n
    dW3 = dz3.T @ a2
    db3 = dz3.sum(axis=0)
    da2 = dz3 @ clf.W3
    dy2 = da2 * (y2 > 0.0)
    dz2, dg2, dbeta2 = _bn_backward(dy2, clf.bn2_gamma, c2)
    dW2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ clf.W2
    dy1 = da1 * (y1 > 0.0)
    dz1, dg1, dbeta1 = _bn_backward(dy1, clf.bn1_gamma, c1)
    dW1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return loss, [dW1, db1, dW2, db2, dW3, db3, dg1, dbeta1, dg2, dbeta2]


def classifier_accuracy(clf: MlpClassifier, features: np.ndarray,
                        labels: np.ndarray) -> float:
    probs = classifier_forward(clf, features)
    return float((np.argmax(probs, axis=1) == labels).mean())


def fit_mlp(clf: MlpClassifier, features: np.ndarray, labels: np.ndarray,
            val_features: np.ndarray, val_labels: np.ndarray,
            opt: OptimizerConfig, rng: Rng, patience: int = 3,
            max_epochs: int = 100) -> MlpClassifier:
    """Cross-entropy SGD with early stopping on validation accuracy."""
    if len(features) == 0 or len(val_features) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if clf.n_classes > 1 and len(np.unique(labels)) == 1:
        warnings.warn(f"all training labels are class {int(labels[0])}; "
                      "classifier will learn a constant")
    velocity = [np.zeros_like(p) for p in classifier_param_list(clf)]
    best = copy.deepcopy(clf)
    best_acc = -1.0
    since_improve = 0
    for _ in range(max_epochs):
        order = rng.permutation(len(features))
        for start in range(0, len(order), opt.batch_size):
            idx = order[start:start + opt.batch_size]
            _, cache = classifier_forward(clf, features[idx], train=True)
            _, grads = classifier_loss_and_grads(clf, cache, labels[idx])
            clip_gradients(grads, opt.clip_norm)
            sgd_momentum_update(classifier_param_list(clf), grads, velocity, opt)
        acc = classifier_accuracy(clf, val_features, val_labels)
        if acc > best_acc:
            best_acc = acc
            best = copy.deepcopy(clf)
            since_improve = 0
        else:
            since_improve += 1
        if since_improve >= patience:
            break
    return best


def train_classifier(ensemble: Ensemble, train_windows: np.ndarray,
                     val_windows: np.ndarray, rng: Rng,
                     opt: OptimizerConfig = None, hidden=(256, 64),
                     patience: int = 3, max_epochs: int = 100) -> MlpClassifier:
    """Teach an MLP to name the member the oracle would pick.

    The ensemble is frozen: it is only read, to produce features (encoder
    states on the prefix) and labels (member with the lowest prediction
    error).  Early stopping monitors validation classification accuracy.
    """
    opt = opt or OptimizerConfig(learning_rate=0.01)
    spec = ensemble.spec
    train_windows = _as_batch(train_windows)
    val_windows = _as_batch(val_windows)

    labels = np.argmin(prediction_errors(ensemble, train_windows), axis=1)
    val_labels = np.argmin(prediction_errors(ensemble, val_windows), axis=1)
    features = classifier_features(ensemble, train_windows[:, :spec.prefix_len])
    val_features = classifier_features(ensemble, val_windows[:, :spec.prefix_len])

    clf = init_classifier(rng.split(0), features.shape[1], ensemble.size,
                          hidden=hidden, dtype=features.dtype)
    return fit_mlp(clf, features, labels, val_features, val_labels, opt,
                   rng.split(1), patience=patience, max_epochs=max_epochs)


def classifier_select_many(ensemble: Ensemble, clf: MlpClassifier,
                           prefixes: np.ndarray) -> list:
    """Highest classifier probability per sample."""
    prefixes = _as_batch(prefixes)
    probs = classifier_forward(clf, classifier_features(ensemble, prefixes))
    return [SelectionResult(model_index=int(np.argmax(row)) + 1, scores=row,
                            strategy="classifier", deployable=True)
            for row in probs]


def classifier_select(ensemble: Ensemble, clf: MlpClassifier,
                      input_prefix: np.ndarray) -> SelectionResult:
    return classifier_select_many(ensemble, clf, input_prefix)[0]
