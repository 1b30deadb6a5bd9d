"""Winner-take-all ensemble training.

Coordinate descent that alternates two moves: a hard assignment sending each
sequence in a batch to the member that currently fits it best, and a
momentum-SGD update in which every member is charged only the samples it won.
Includes the diversity pretraining phase (disjoint random subsets, one plain
epoch per member) that keeps an early winner from monopolising the
assignments, plus the plain single-model training path used for baselines.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math

import numpy as np

from .lstm import DropoutSpec
from .numerics import Rng
from .seq2seq import (
    ModelGrads,
    Seq2SeqModel,
    SequenceSpec,
    clone_model,
    init_seq2seq,
    model_backward,
    model_param_list,
    model_zeros_like,
    sequence_loss,
)


# ---------------------------------------------------------------------------
# configuration and ensemble containers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    """Momentum-SGD settings shared by all training paths."""

    learning_rate: float = 2e-3
    momentum: float = 0.9
    clip_norm: float = 5.0
    batch_size: int = 32
    # What happens to a member that wins no sample in a batch: "decay" keeps
    # the uniform update rule (velocity shrinks by `momentum`, parameters
    # still move by the decayed velocity); "freeze" skips the member entirely.
    zero_assignment: str = "decay"

    def __post_init__(self):
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.clip_norm > 0.0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.zero_assignment not in ("decay", "freeze"):
            raise ValueError(f"unknown zero_assignment policy {self.zero_assignment!r}")


@dataclass
class EnsembleMember:
    """One model plus its optimizer velocity and private random stream."""

    model: Seq2SeqModel
    velocity: ModelGrads
    rng: Rng


@dataclass
class Ensemble:
    members: list[EnsembleMember]
    pretrained: bool = False

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        spec = self.members[0].model.spec
        for m in self.members[1:]:
            if m.model.spec != spec:
                raise ValueError("all ensemble members must share one SequenceSpec")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def spec(self) -> SequenceSpec:
        return self.members[0].model.spec


def build_ensemble(rng: Rng, spec: SequenceSpec, hidden_dim: int, n_layers: int,
                   n_members: int, dtype=np.float32, **model_kw) -> Ensemble:
    """Independently initialised members with disjoint random streams.

    Member m draws its parameters from split 2m and keeps split 2m+1 as its
    private stream, so results do not depend on how members are scheduled.
    """
    members = []
    for m in range(n_members):
        model = init_seq2seq(rng.split(2 * m), spec, hidden_dim, n_layers,
                             dtype=dtype, **model_kw)
        members.append(EnsembleMember(model=model,
                                      velocity=model_zeros_like(model),
                                      rng=rng.split(2 * m + 1)))
    return Ensemble(members=members)


@dataclass
class TrainState:
    """Progress of one training run (wrapped by the loops below)."""

    epoch: int = 0
    best_val: float = math.inf
    since_improve: int = 0


@dataclass
class TrainLogRecord:
    epoch: int
    train_loss: float
    val_loss: float
    assignments: list[int]

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "assignments": list(self.assignments)}


# ---------------------------------------------------------------------------
# assignment and parameter updates
# ---------------------------------------------------------------------------

def assign(losses: np.ndarray) -> np.ndarray:
    """One-hot winner matrix for a [batch x M] loss table.

    Row i carries a single 1 at the member with the smallest loss; exact ties
    go to the lowest member index.  Losses are compared exactly, in whatever
    precision training produced them.
    """
    losses = np.asarray(losses)
    if losses.ndim != 2:
        raise ValueError(f"expected a [batch x M] loss matrix, got shape {losses.shape}")
    nan_rows = np.isnan(losses)
    if nan_rows.any():
        i, m = np.argwhere(nan_rows)[0]
        raise ValueError(f"NaN loss for sample {i}, model {m}")
    winners = np.argmin(losses, axis=1)
    p = np.zeros(losses.shape, dtype=np.uint8)
    p[np.arange(losses.shape[0]), winners] = 1
    return p


def clip_gradients(grads: list[np.ndarray], clip_norm: float) -> float:
    """Scale the whole gradient list so its global L2 norm is <= clip_norm.

    Returns the pre-clip norm.  The norm is accumulated in float64 over the
    canonical parameter order so the result does not depend on layout.
    """
    total = 0.0
    for g in grads:
        total += float(np.vdot(g, g))
    norm = math.sqrt(total)
    if norm > clip_norm:
        for g in grads:
            g *= np.asarray(clip_norm / norm, dtype=g.dtype)
    return norm


def sgd_momentum_update(params: list[np.ndarray], grads: list[np.ndarray],
                        velocity: list[np.ndarray], opt: OptimizerConfig) -> None:
    """Classical momentum, in place: v <- momentum*v + lr*g; theta <- theta - v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must have equal length")
    for th, g, v in zip(params, grads, velocity):
        if not (th.shape == g.shape == v.shape):
            raise ValueError(f"shape mismatch in update: {th.shape} vs {g.shape} vs {v.shape}")
        v *= opt.momentum
        v += opt.learning_rate * g
        th -= v


def _decay_only_update(params: list[np.ndarray], velocity: list[np.ndarray],
                       opt: OptimizerConfig) -> None:
    """The uniform update rule with a zero gradient."""
    for th, v in zip(params, velocity):
        v *= opt.momentum
        th -= v


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def _member_forward(member: EnsembleMember, batch, dropout):
    return sequence_loss(member.model, batch, dropout=dropout,
                         rng=member.rng if dropout is not None else None)


def _member_update(member: EnsembleMember, batch, out, idx, opt: OptimizerConfig):
    if idx is None:  # member won the whole batch; reuse the forward as-is
        sub_frames, sub_out = batch, out
    else:
        sub_frames, sub_out = batch[:, idx, :], out.take(idx)
    grads = model_param_list(model_backward(member.model, sub_frames, sub_out))
    clip_gradients(grads, opt.clip_norm)
    sgd_momentum_update(model_param_list(member.model), grads,
                        model_param_list(member.velocity), opt)


def mcl_step(ensemble: Ensemble, batch: np.ndarray, opt: OptimizerConfig,
             dropout: DropoutSpec = None, pool: ThreadPoolExecutor = None):
    """One coordinate-descent step on a [L x B x D] batch.

    Every member sees every sample; the winner matrix then routes each
    sample's gradient to exactly one member.  Returns the batch objective
    (sum over samples of the winning loss) and the per-member win counts.
    Results are bit-identical with or without a thread pool: members touch
    only their own parameters and random streams, and the assignment uses
    losses gathered in member order.
    """
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1] == 0:
        raise ValueError(f"expected a non-empty [L x B x D] batch, got shape {batch.shape}")
    n_batch = batch.shape[1]

    if pool is not None:
        results = list(pool.map(lambda mb: _member_forward(mb, batch, dropout),
                                ensemble.members))
    else:
        results = [_member_forward(mb, batch, dropout) for mb in ensemble.members]
    losses = np.stack([l for l, _ in results], axis=1)
    outputs = [out for _, out in results]

    p = assign(losses)
    counts = [int(c) for c in p.sum(axis=0)]
    winners = np.argmax(p, axis=1)
    objective = float(losses[np.arange(n_batch), winners].sum())

    def update_one(m: int):
        member = ensemble.members[m]
        if counts[m] == 0:
            if opt.zero_assignment == "decay":
                _decay_only_update(model_param_list(member.model),
                                   model_param_list(member.velocity), opt)
            return
        idx = None if counts[m] == n_batch else np.nonzero(p[:, m])[0]
        _member_update(member, batch, outputs[m], idx, opt)

    if pool is not None:
        list(pool.map(update_one, range(ensemble.size)))
    else:
        for m in range(ensemble.size):
            update_one(m)
    return objective, counts


def plain_step(model: Seq2SeqModel, velocity: ModelGrads, batch: np.ndarray,
               opt: OptimizerConfig, dropout: DropoutSpec = None,
               rng: Rng = None) -> float:
    """One full-batch-charged SGD step on a single model; returns the loss sum."""
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1] == 0:
        raise ValueError(f"expected a non-empty [L x B x D] batch, got shape {batch.shape}")
    losses, out = sequence_loss(model, batch, dropout=dropout,
                                rng=rng if dropout is not None else None)
    grads = model_param_list(model_backward(model, batch, out))
    clip_gradients(grads, opt.clip_norm)
    sgd_momentum_update(model_param_list(model), grads, model_param_list(velocity), opt)
    return float(losses.sum())


# ---------------------------------------------------------------------------
# epoch loops
# ---------------------------------------------------------------------------

def _batches(windows: np.ndarray, order: np.ndarray, batch_size: int):
    """Yield [L x B x D] batches of `windows` ([N x L x D]) in `order`."""
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield windows[idx].transpose(1, 0, 2)


def _dropout_spec(rate: float) -> DropoutSpec:
    return DropoutSpec(rate=rate, train=True) if rate > 0.0 else None


def oracle_validation_loss(ensemble: Ensemble, windows: np.ndarray,
                           batch_size: int, pool: ThreadPoolExecutor = None) -> float:
    """Mean over samples of the best member's loss, evaluated without dropout."""
    if len(windows) == 0:
        raise ValueError("validation set is empty")
    total = 0.0
    order = np.arange(len(windows))
    for batch in _batches(windows, order, batch_size):
        if pool is not None:
            per_member = list(pool.map(
                lambda mb: sequence_loss(mb.model, batch)[0], ensemble.members))
        else:
            per_member = [sequence_loss(mb.model, batch)[0] for mb in ensemble.members]
        best = per_member[0]
        for l in per_member[1:]:
            best = np.minimum(best, l)
        total += float(best.sum())
    return total / len(windows)


def plain_validation_loss(model: Seq2SeqModel, windows: np.ndarray,
                          batch_size: int) -> float:
    """Mean per-sample loss of a single model, evaluated without dropout."""
    if len(windows) == 0:
        raise ValueError("validation set is empty")
    total = 0.0
    order = np.arange(len(windows))
    for batch in _batches(windows, order, batch_size):
        total += float(sequence_loss(model, batch)[0].sum())
    return total / len(windows)


def partition_indices(rng: Rng, n: int, m: int) -> list[np.ndarray]:
    """Random partition of range(n) into m disjoint, near-equal subsets."""
    if n < m:
        raise ValueError(f"cannot split {n} samples into {m} non-empty subsets")
    return np.array_split(rng.permutation(n), m)


def _check_partition(subsets: list[np.ndarray], n: int) -> None:
    if any(len(s) == 0 for s in subsets):
        raise ValueError("every pretraining subset must be non-empty")
    merged = np.concatenate([np.asarray(s) for s in subsets])
    if len(merged) != n or len(np.unique(merged)) != n:
        raise ValueError("pretraining subsets must partition the training set")


def diversity_pretrain(ensemble: Ensemble, train_windows: np.ndarray, rng: Rng,
                       opt: OptimizerConfig, dropout_rate: float = 0.0,
                       subsets: list[np.ndarray] = None) -> Ensemble:
    """Specialise members before joint training.

    The training set is randomly split into `ensemble.size` disjoint,
    near-equal subsets; member m runs exactly one plain epoch on subset m.
    Pass `subsets` to pin the partition (it is validated).  Velocities are
    reset afterwards so joint training starts from clean optimizer state.
    """
    train_windows = np.asarray(train_windows)
    n = len(train_windows)
    if subsets is None:
        subsets = partition_indices(rng, n, ensemble.size)
    else:
        if len(subsets) != ensemble.size:
            raise ValueError("need exactly one subset per member")
        _check_partition(subsets, n)
    dropout = _dropout_spec(dropout_rate)
    for member, subset in zip(ensemble.members, subsets):
        for batch in _batches(train_windows, subset, opt.batch_size):
            plain_step(member.model, member.velocity, batch, opt,
                       dropout=dropout, rng=member.rng)
        member.velocity = model_zeros_like(member.model)
    ensemble.pretrained = True
    return ensemble


def train(ensemble: Ensemble, train_windows: np.ndarray, val_windows: np.ndarray,
          opt: OptimizerConfig, rng: Rng, patience: int = 3, max_epochs: int = 50,
          dropout_rate: float = 0.0, allow_unpretrained: bool = False,
          n_threads: int = 1):
    """Joint winner-take-all training with early stopping.

    Runs shuffled mini-batch steps until the validation oracle loss (per-sample
    minimum over members) fails to improve for `patience` consecutive epochs
    or `max_epochs` is reached, then restores the best snapshot.  `patience`
    counts from the epoch's own result, so patience=0 runs exactly one epoch.
    Returns (ensemble, list of TrainLogRecord).
    """
    train_windows = np.asarray(train_windows)
    val_windows = np.asarray(val_windows)
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if not ensemble.pretrained and not allow_unpretrained:
        raise ValueError("ensemble has not been diversity-pretrained; "
                         "pass allow_unpretrained=True to train anyway")
    if max_epochs < 1:
        raise ValueError(f"max_epochs must be >= 1, got {max_epochs}")

    dropout = _dropout_spec(dropout_rate)
    pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
    state = TrainState()
    best_models = None
    log = []
    try:
        for epoch in range(1, max_epochs + 1):
            state.epoch = epoch
            order = rng.permutation(len(train_windows))
            objective_sum = 0.0
            count_sum = [0] * ensemble.size
            for batch in _batches(train_windows, order, opt.batch_size):
                objective, counts = mcl_step(ensemble, batch, opt,
                                             dropout=dropout, pool=pool)
                objective_sum += objective
                count_sum = [a + b for a, b in zip(count_sum, counts)]
            val_loss = oracle_validation_loss(ensemble, val_windows,
                                              opt.batch_size, pool=pool)
            log.append(TrainLogRecord(epoch=epoch,
                                      train_loss=objective_sum / len(train_windows),
                                      val_loss=val_loss,
                                      assignments=count_sum))
            if val_loss < state.best_val:
                state.best_val = val_loss
                state.since_improve = 0
                best_models = [clone_model(m.model) for m in ensemble.members]
            else:
                state.since_improve += 1
            if state.since_improve >= patience:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if best_models is None:
        raise FloatingPointError("validation loss never went below infinity; training diverged")
    for member, model in zip(ensemble.members, best_models):
        member.model = model
    return ensemble, log


def train_plain(model: Seq2SeqModel, velocity: ModelGrads, train_windows: np.ndarray,
                val_windows: np.ndarray, opt: OptimizerConfig, rng: Rng,
                stream_rng: Rng = None, patience: int = 3, max_epochs: int = 50,
                dropout_rate: float = 0.0):
    """Standard single-model training; the degenerate-ensemble reference path.

    Matches `train` batch for batch: same shuffle stream, same loss and
    update arithmetic, same early-stopping rule — so a one-member ensemble
    and this loop produce bit-identical parameter trajectories.
    Returns (model, list of TrainLogRecord).
    """
    train_windows = np.asarray(train_windows)
    val_windows = np.asarray(val_windows)
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("training and validation sets must be non-empty")
    dropout = _dropout_spec(dropout_rate)
    state = TrainState()
    best_model = None
    log = []
    for epoch in range(1, max_epochs + 1):
        state.epoch = epoch
        order = rng.permutation(len(train_windows))
        loss_sum = 0.0
        for batch in _batches(train_windows, order, opt.batch_size):
            loss_sum += plain_step(model, velocity, batch, opt,
                                   dropout=dropout, rng=stream_rng)
        val_loss = plain_validation_loss(model, val_windows, opt.batch_size)
        log.append(TrainLogRecord(epoch=epoch,
                                  train_loss=loss_sum / len(train_windows),
                                  val_loss=val_loss,
                                  assignments=[len(train_windows)]))
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.since_improve = 0
            best_model = clone_model(model)
        else:
            state.since_improve += 1
        if state.since_improve >= patience:
            break
    if best_model is None:
        raise FloatingPointError("validation loss never went below infinity; training diverged")
    return best_model, log
