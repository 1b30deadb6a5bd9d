"""Prediction quality metrics and ensemble behaviour analyses.

PSNR here always converts POOLED mean squared error to decibels (pool first,
then log), which makes "the oracle is at least as good as any other
strategy" an exact theorem rather than an empirical tendency.  Model-usage
distributions and next-model transition matrices describe which members an
ensemble actually deploys, split by recording phase.  Report writers emit a
text summary plus three CSV tables with fully deterministic content.
"""

from dataclasses import dataclass
import math
import os

import numpy as np

from .data import PHASE_NAMES
from .selection import (
    classifier_select_many,
    oracle_select_many,
    reconstruction_select_many,
)
from .seq2seq import encode, predict_future
from .training import Ensemble

STRATEGY_ORDER = ("oracle", "reconstruction", "classifier", "average")


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def psnr(pred: np.ndarray, truth: np.ndarray, max_intensity: float) -> float:
    """10*log10(max_intensity^2 / MSE) in dB; +inf when the MSE is zero."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if max_intensity <= 0.0:
        raise ValueError("max_intensity must be positive")
    mse = float(np.mean((pred.astype(np.float64) - truth.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_intensity ** 2 / mse)


# ---------------------------------------------------------------------------
# strategy evaluation
# ---------------------------------------------------------------------------

@dataclass
class StrategyEval:
    strategy: str
    overall_psnr: float
    horizon_psnr: np.ndarray          # [n] dB, offsets 1..n
    model_indices: np.ndarray = None  # [N] 1-based chosen member; None for average


def average_baseline(ensemble: Ensemble, input_prefix: np.ndarray) -> np.ndarray:
    """Arithmetic mean of all members' predictions.

    One prefix [P x D] gives [n x D]; a batch [N x P x D] gives [N x n x D].
    """
    single = np.asarray(input_prefix).ndim == 2
    prefixes = np.asarray(input_prefix)
    if single:
        prefixes = prefixes[None]
    tm = prefixes.transpose(1, 0, 2)
    acc = None
    for member in ensemble.members:
        pred = predict_future(member.model, encode(member.model, tm))
        acc = pred if acc is None else acc + pred
    mean = acc / ensemble.size
    return mean[:, 0, :] if single else mean.transpose(1, 0, 2)


def evaluate_strategy(ensemble: Ensemble, strategy: str, windows: np.ndarray,
                      max_intensity: float, classifier=None) -> StrategyEval:
    """Overall and per-horizon PSNR of one selection strategy on full windows."""
    windows = np.asarray(windows)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValueError("need a non-empty [N x L x D] test set")
    spec = ensemble.spec
    if windows.shape[1] != spec.L:
        raise ValueError(f"need full {spec.L}-frame windows, got {windows.shape[1]}")
    prefixes = windows[:, :spec.prefix_len]
    future = windows[:, spec.prefix_len:]
    n_samples = len(windows)

    indices = None
    if strategy == "average":
        chosen = average_baseline(ensemble, prefixes)
    else:
        if strategy == "oracle":
            selections = oracle_select_many(ensemble, windows)
        elif strategy == "reconstruction":
            selections = reconstruction_select_many(ensemble, prefixes)
        elif strategy == "classifier":
            if classifier is None:
                raise ValueError("classifier strategy needs a trained classifier")
            selections = classifier_select_many(ensemble, classifier, prefixes)
        else:
            raise ValueError(f"unknown strategy {strategy!r}; know {STRATEGY_ORDER}")
        indices = np.array([s.model_index for s in selections])
        tm = prefixes.transpose(1, 0, 2)
        preds = np.stack([predict_future(m.model, encode(m.model, tm))
                          for m in ensemble.members])      # [M, n, N, D]
        chosen = preds[indices - 1, :, np.arange(n_samples), :]  # [N, n, D]

    curve = np.array([psnr(chosen[:, k, :], future[:, k, :], max_intensity)
                      for k in range(spec.n)])
    return StrategyEval(strategy=strategy,
                        overall_psnr=psnr(chosen, future, max_intensity),
                        horizon_psnr=curve,
                        model_indices=indices)


def psnr_vs_horizon(ensemble: Ensemble, strategy: str, windows: np.ndarray,
                    max_intensity: float, classifier=None) -> np.ndarray:
    """PSNR at each future offset 1..n under the given strategy."""
    return evaluate_strategy(ensemble, strategy, windows, max_intensity,
                             classifier=classifier).horizon_psnr


# ---------------------------------------------------------------------------
# usage and transition analyses
# ---------------------------------------------------------------------------

def _check_tag(phase: int, model_index: int, n_models: int) -> None:
    if phase not in (0, 1):
        raise ValueError(f"unknown phase tag {phase!r}")
    if not 1 <= model_index <= n_models:
        raise ValueError(f"model index {model_index} outside 1..{n_models}")


def usage_distribution(selections, n_models: int) -> dict:
    """Per-phase empirical frequency of each chosen member.

    `selections` is an iterable of (phase, 1-based model index) pairs;
    returns {phase: length-M probability vector} for the phases present.
    """
    counts = {}
    for phase, model_index in selections:
        phase, model_index = int(phase), int(model_index)
        _check_tag(phase, model_index, n_models)
        counts.setdefault(phase, np.zeros(n_models))[model_index - 1] += 1.0
    return {phase: c / c.sum() for phase, c in sorted(counts.items())}


def transition_matrix(tracks, n_models: int) -> dict:
    """Per-phase conditional distribution of the next chosen member.

    `tracks` is a list of per-episode selection sequences, each an ordered
    list of (phase, 1-based model index) over consecutive windows; pairs are
    formed only inside a track, so transitions never cross episodes.  A
    transition is attributed to the phase of its successor window.  Returns
    {phase: (matrix, observed)} where matrix[next-1, prev-1] is
    P(next | prev) with each observed predecessor's column summing to 1, and
    observed marks predecessors that occurred at all.
    """
    counts = {}
    for track in tracks:
        for (_, prev), (phase, nxt) in zip(track[:-1], track[1:]):
            phase, prev, nxt = int(phase), int(prev), int(nxt)
            _check_tag(phase, prev, n_models)
            _check_tag(phase, nxt, n_models)
            counts.setdefault(phase, np.zeros((n_models, n_models)))[nxt - 1, prev - 1] += 1.0
    out = {}
    for phase, matrix in sorted(counts.items()):
        totals = matrix.sum(axis=0)
        observed = totals > 0.0
        normalised = matrix / np.where(observed, totals, 1.0)
        out[phase] = (normalised, observed)
    return out


# ---------------------------------------------------------------------------
# report assembly and writing
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    n_models: int
    horizon: int
    max_intensity: float
    strategies: dict      # name -> StrategyEval
    usage: dict           # phase -> [M] probabilities
    transitions: dict     # phase -> (M x M matrix, observed [M])


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def write_report(report: EvalReport, directory) -> None:
    """Emit report.txt, psnr.csv, usage.csv and transitions.csv.

    Output bytes are a pure function of the report contents (fixed ordering,
    fixed float formatting, no timestamps).
    """
    os.makedirs(directory, exist_ok=True)
    names = [s for s in STRATEGY_ORDER if s in report.strategies]
    names += [s for s in report.strategies if s not in STRATEGY_ORDER]

    lines = ["prediction quality report", "=" * 25, ""]
    lines.append(f"members: {report.n_models}")
    lines.append(f"horizon: {report.horizon} frames")
    lines.append(f"max intensity: {_fmt(report.max_intensity)}")
    lines.append("")
    lines.append("overall PSNR (dB, pooled MSE over all predicted frames)")
    for name in names:
        ev = report.strategies[name]
        note = "" if ev.strategy != "oracle" else "  (not deployable: uses the true future)"
        lines.append(f"  {name:15s} {_fmt(ev.overall_psnr)}{note}")
    lines.append("")
    for phase, dist in report.usage.items():
        lines.append(f"model usage, {PHASE_NAMES[phase]} phase")
        for m, p in enumerate(dist, start=1):
            lines.append(f"  model {m}: {_fmt(p)}")
        lines.append("")
    for phase, (matrix, observed) in report.transitions.items():
        lines.append(f"next-model transition probabilities, {PHASE_NAMES[phase]} phase")
        lines.append("  (column = previous model; rows = next model)")
        for r in range(report.n_models):
            row = " ".join(_fmt(matrix[r, c]) if observed[c] else "   -    "
                           for c in range(report.n_models))
            lines.append(f"  next {r + 1}: {row}")
        missing = [str(c + 1) for c in range(report.n_models) if not observed[c]]
        if missing:
            lines.append(f"  never a predecessor: {', '.join(missing)}")
        lines.append("")
    with open(os.path.join(directory, "report.txt"), "w") as fh:
        fh.write("\n".join(lines))

    with open(os.path.join(directory, "psnr.csv"), "w") as fh:
        fh.write("strategy,horizon,psnr_db\n")
        for name in names:
            for k, value in enumerate(report.strategies[name].horizon_psnr, start=1):
                fh.write(f"{name},{k},{_fmt(value)}\n")

    with open(os.path.join(directory, "usage.csv"), "w") as fh:
        fh.write("phase,model,probability\n")
        for phase, dist in report.usage.items():
            for m, p in enumerate(dist, start=1):
                fh.write(f"{PHASE_NAMES[phase]},{m},{_fmt(p)}\n")

    with open(os.path.join(directory, "transitions.csv"), "w") as fh:
        fh.write("phase,prev_model,next_model,probability\n")
        for phase, (matrix, observed) in report.transitions.items():
            for c in range(report.n_models):
                if not observed[c]:
                    continue
                for r in range(report.n_models):
                    fh.write(f"{PHASE_NAMES[phase]},{c + 1},{r + 1},{_fmt(matrix[r, c])}\n")
