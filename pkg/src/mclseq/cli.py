"""Command-line pipeline.

Subcommands cover the full workflow: synthesise a recording (`gen-data`),
train a winner-take-all ensemble on it (`train`), fit the selection
classifier (`train-classifier`), score selection strategies and write report
files (`eval`), emit chosen-member predictions as a new recording
(`predict`), and compute per-window channel delay maps (`delay-map`).

Every run is deterministic in the config's `seed`; `--threads` changes wall
time, never results.  Commands fail with a one-line diagnostic on stderr and
a non-zero exit code.
"""

import argparse
from dataclasses import replace
import sys

import numpy as np

from .config import RunConfig, load_config
from .data import (
    PHASE_NAMES,
    Recording,
    delay_map,
    fill_missing,
    generate_synthetic,
    load_recording,
    save_recording,
    sliding_windows,
    split_by_episode,
    windows_array,
)
from .evaluate import (
    EvalReport,
    average_baseline,
    evaluate_strategy,
    transition_matrix,
    usage_distribution,
    write_report,
)
from .numerics import Rng
from .persist import Checkpoint, load_checkpoint, save_checkpoint
from .selection import (
    classifier_select_many,
    oracle_select_many,
    reconstruction_select_many,
    train_classifier,
)
from .seq2seq import SequenceSpec, encode, predict_future
from .training import OptimizerConfig, build_ensemble, diversity_pretrain, train

# Accepted strategy spellings on the command line.
_STRATEGY_ALIASES = {
    "oracle": "oracle",
    "recon": "reconstruction",
    "reconstruction": "reconstruction",
    "classifier": "classifier",
    "average": "average",
}


def _optimizer(config: RunConfig) -> OptimizerConfig:
    return OptimizerConfig(learning_rate=config.learning_rate,
                           momentum=config.momentum,
                           clip_norm=config.clip_norm,
                           batch_size=config.batch_size,
                           zero_assignment=config.zero_assignment)


def _pick_split_episodes(samples: list, config: RunConfig) -> tuple:
    """Resolve the test/validation episode ids, defaulting to the two largest."""
    present = sorted({s.episode_id for s in samples})
    if len(present) < 3:
        raise ValueError(f"need at least three episodes to form train/val/test "
                         f"splits, recording has {len(present)}")
    test = config.test_episode if config.test_episode is not None else present[-1]
    val = config.val_episode if config.val_episode is not None else \
        max(e for e in present if e != test)
    return test, val


def _prepare_splits(recording: Recording, config: RunConfig):
    filled = fill_missing(recording)
    samples = sliding_windows(filled, config.window_len, config.stride)
    test, val = _pick_split_episodes(samples, config)
    return split_by_episode(samples, test, val)


def _check_geometry(config: RunConfig, ensemble) -> None:
    expected = SequenceSpec(L=config.window_len, n=config.future_len,
                            frame_dim=config.frame_dim)
    if ensemble.spec != expected:
        raise ValueError(f"checkpoint sequence shape {ensemble.spec} does not "
                         f"match the data/config shape {expected}")


def _parse_strategies(arg: str, have_classifier: bool) -> list:
    if arg:
        names = []
        for raw in arg.split(","):
            name = raw.strip().lower()
            if name not in _STRATEGY_ALIASES:
                raise ValueError(f"unknown strategy {raw!r}; choose from "
                                 f"{', '.join(sorted(set(_STRATEGY_ALIASES)))}")
            resolved = _STRATEGY_ALIASES[name]
            if resolved not in names:
                names.append(resolved)
    else:
        names = ["oracle", "reconstruction", "average"]
        if have_classifier:
            names.insert(2, "classifier")
    if "classifier" in names and not have_classifier:
        raise ValueError("the checkpoint has no classifier; run train-classifier "
                         "first or drop 'classifier' from --strategies")
    return names


def _strategy_predictions(ensemble, classifier, strategy: str,
                          windows: np.ndarray):
    """Chosen-member predictions [N x n x D] plus 1-based indices (or None)."""
    spec = ensemble.spec
    prefixes = windows[:, :spec.prefix_len]
    if strategy == "average":
        return average_baseline(ensemble, prefixes), None
    if strategy == "oracle":
        selections = oracle_select_many(ensemble, windows)
    elif strategy == "reconstruction":
        selections = reconstruction_select_many(ensemble, prefixes)
    elif strategy == "classifier":
        if classifier is None:
            raise ValueError("the checkpoint has no classifier")
        selections = classifier_select_many(ensemble, classifier, prefixes)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    indices = np.array([s.model_index for s in selections])
    tm = prefixes.transpose(1, 0, 2)
    preds = np.stack([predict_future(m.model, encode(m.model, tm))
                      for m in ensemble.members])        # [M, n, N, D]
    chosen = preds[indices - 1, :, np.arange(len(windows)), :]
    return chosen, indices


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    config = load_config(args.config)
    recording = generate_synthetic(config.patterns, config.total_frames,
                                   config.height, config.width, config.seed,
                                   baseline_len=config.baseline_len,
                                   event_len=config.event_len)
    recording.sampling_rate = config.sampling_rate
    save_recording(args.out, recording)
    t, h, w = recording.frames.shape
    print(f"wrote {t} frames of {h}x{w} across {recording.episode_count} "
          f"episodes to {args.out}")


def cmd_train(args) -> None:
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        config = ckpt.config
    else:
        if not args.config:
            raise ValueError("train needs --config (or --resume)")
        config = load_config(args.config)
        if args.wide:
            config = replace(config, members=1,
                             hidden_dim=config.hidden_dim * args.wide)
        elif args.single:
            config = replace(config, members=1)
    if args.threads:
        config = replace(config, threads=args.threads)

    recording = load_recording(args.data)
    split = _prepare_splits(recording, config)
    train_w = windows_array(split.train)
    val_w = windows_array(split.validation)
    opt = _optimizer(config)

    if args.resume:
        ensemble = ckpt.ensemble
        _check_geometry(config, ensemble)
        classifier = ckpt.classifier
        log = list(ckpt.log)
        shuffle = Rng(config.seed).split(3)
        if ckpt.trainer_rng_state is not None:
            shuffle.set_state(ckpt.trainer_rng_state)
        allow_unpretrained = True
    else:
        root = Rng(config.seed)
        spec = SequenceSpec(L=config.window_len, n=config.future_len,
                            frame_dim=config.frame_dim)
        ensemble = build_ensemble(root.split(1), spec, config.hidden_dim,
                                  config.n_layers, config.members,
                                  init_scale=config.init_scale)
        if not args.no_pretrain:
            diversity_pretrain(ensemble, train_w, root.split(2), opt,
                               dropout_rate=config.dropout_rate)
        classifier = None
        log = []
        shuffle = root.split(3)
        allow_unpretrained = args.no_pretrain

    ensemble, new_log = train(ensemble, train_w, val_w, opt, shuffle,
                              patience=config.patience,
                              max_epochs=config.max_epochs,
                              dropout_rate=config.dropout_rate,
                              allow_unpretrained=allow_unpretrained,
                              n_threads=config.threads)
    offset = log[-1].epoch if log else 0
    for record in new_log:
        record.epoch += offset
    log.extend(new_log)

    # Results are identical for any worker count, so the artifact must not
    # encode it; otherwise --threads would change checkpoint bytes.
    save_checkpoint(args.out, Checkpoint(config=replace(config, threads=1),
                                         ensemble=ensemble,
                                         classifier=classifier, log=log,
                                         trainer_rng_state=shuffle.get_state()))
    best = min(r.val_loss for r in new_log)
    print(f"trained {ensemble.size} member(s) for {len(new_log)} epoch(s); "
          f"best validation loss {best:.6f}; wrote {args.out}")


def cmd_train_classifier(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    recording = load_recording(args.data)
    split = _prepare_splits(recording, config)
    _check_geometry(config, ckpt.ensemble)
    opt = OptimizerConfig(learning_rate=config.clf_learning_rate,
                          momentum=config.momentum,
                          clip_norm=config.clip_norm,
                          batch_size=config.clf_batch_size)
    ckpt.classifier = train_classifier(ckpt.ensemble, windows_array(split.train),
                                       windows_array(split.validation),
                                       Rng(config.seed).split(4), opt=opt,
                                       hidden=(config.clf_hidden1, config.clf_hidden2),
                                       patience=config.clf_patience,
                                       max_epochs=config.clf_max_epochs)
    save_checkpoint(args.out, ckpt)
    print(f"classifier fitted on {len(split.train)} windows; wrote {args.out}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    recording = load_recording(args.data)
    split = _prepare_splits(recording, config)
    _check_geometry(config, ckpt.ensemble)
    if not split.test:
        raise ValueError("no test windows; check the episode split")
    test_w = windows_array(split.test)
    names = _parse_strategies(args.strategies, ckpt.classifier is not None)

    strategies = {name: evaluate_strategy(ckpt.ensemble, name, test_w,
                                          recording.max_intensity,
                                          classifier=ckpt.classifier)
                  for name in names}

    # Usage and transition analyses follow the best-fitting member per window.
    picks = oracle_select_many(ckpt.ensemble, test_w)
    pairs = [(s.phase, r.model_index) for s, r in zip(split.test, picks)]
    tracks = {}
    for (phase, index), sample in zip(pairs, split.test):
        tracks.setdefault(sample.episode_id, []).append((phase, index))
    report = EvalReport(n_models=ckpt.ensemble.size,
                        horizon=ckpt.ensemble.spec.n,
                        max_intensity=recording.max_intensity,
                        strategies=strategies,
                        usage=usage_distribution(pairs, ckpt.ensemble.size),
                        transitions=transition_matrix(list(tracks.values()),
                                                      ckpt.ensemble.size))
    write_report(report, args.report)
    for name in names:
        value = strategies[name].overall_psnr
        shown = "inf" if value == float("inf") else f"{value:.3f}"
        print(f"{name}: {shown} dB over {len(split.test)} test windows")
    print(f"report written to {args.report}")


def cmd_predict(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    recording = load_recording(args.data)
    filled = fill_missing(recording)
    samples = sliding_windows(filled, config.window_len, config.stride)
    _check_geometry(config, ckpt.ensemble)
    if not samples:
        raise ValueError("recording has no full windows")
    windows = windows_array(samples)
    strategy = _STRATEGY_ALIASES.get(args.strategy)
    if strategy is None:
        raise ValueError(f"unknown strategy {args.strategy!r}")
    preds, _ = _strategy_predictions(ckpt.ensemble, ckpt.classifier, strategy,
                                     windows)
    n = ckpt.ensemble.spec.n
    t, h, w = recording.frames.shape
    frames = preds.reshape(len(samples) * n, h, w).astype(np.float32)
    out = Recording(
        frames=frames,
        valid_mask=recording.valid_mask,
        episode_ids=np.repeat([s.episode_id for s in samples], n),
        phases=np.repeat([s.phase for s in samples], n),
        sampling_rate=recording.sampling_rate,
        max_intensity=max(recording.max_intensity, float(np.abs(frames).max())),
        generator=f"predict-{strategy}",
    )
    save_recording(args.out, out)
    print(f"wrote {len(samples)} x {n} predicted frames ({strategy}) to {args.out}")


def cmd_delay_map(args) -> None:
    config = load_config(args.config) if args.config else RunConfig()
    max_lag = args.max_lag if args.max_lag is not None else config.max_lag
    recording = load_recording(args.data)
    # Non-overlapping windows by default; delay maps per frame offset are noisy
    # and overlapping ones mostly repeat each other.
    stride = args.stride if args.stride is not None else config.window_len
    samples = sliding_windows(recording, config.window_len, stride)
    if not samples:
        raise ValueError("recording has no full windows")
    ms_per_frame = 1000.0 / recording.sampling_rate
    with open(args.out, "w") as fh:
        fh.write("window,episode,phase,start,row,col,delay_frames,delay_ms,degenerate\n")
        for idx, sample in enumerate(samples):
            segment = recording.frames[sample.start:sample.start + config.window_len]
            delays, degenerate = delay_map(segment, max_lag, recording.valid_mask)
            phase = PHASE_NAMES[sample.phase]
            for r in range(delays.shape[0]):
                for c in range(delays.shape[1]):
                    fh.write(f"{idx},{sample.episode_id},{phase},{sample.start},"
                             f"{r},{c},{delays[r, c]},"
                             f"{delays[r, c] * ms_per_frame:.6f},"
                             f"{int(degenerate[r, c])}\n")
    print(f"wrote {len(samples)} delay maps to {args.out}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mclseq",
        description="Winner-take-all sequence ensembles for grid recordings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesise a recording from the "
                                        "config's pattern mixture")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="output recording path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an ensemble on a recording")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="recording path")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--resume", help="checkpoint to continue from "
                                    "(its config wins over --config)")
    p.add_argument("--no-pretrain", action="store_true",
                   help="skip diversity pretraining (members start identical-ish)")
    p.add_argument("--single", action="store_true",
                   help="one-member baseline at the configured width")
    p.add_argument("--wide", type=int, metavar="K",
                   help="one-member baseline, K times the configured width")
    p.add_argument("--threads", type=int,
                   help="worker threads; results are identical for any value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-classifier",
                       help="fit the member-selection classifier")
    p.add_argument("--ckpt", required=True, help="trained ensemble checkpoint")
    p.add_argument("--data", required=True, help="recording path")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("eval", help="score selection strategies on the test split")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="recording path")
    p.add_argument("--report", required=True, help="directory for report files")
    p.add_argument("--strategies",
                   help="comma list from oracle,recon,classifier,average "
                        "(default: all that apply)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write chosen-member predictions as a "
                                       "recording")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="recording path")
    p.add_argument("--out", required=True, help="output recording path")
    p.add_argument("--strategy", default="recon",
                   help="selection strategy (default recon)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("delay-map", help="per-window channel delay maps as CSV")
    p.add_argument("--data", required=True, help="recording path")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", help="key=value config file (window length, lag)")
    p.add_argument("--max-lag", type=int, help="largest lag to scan, in frames")
    p.add_argument("--stride", type=int,
                   help="window stride (default: one window length)")
    p.set_defaults(func=cmd_delay_map)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
