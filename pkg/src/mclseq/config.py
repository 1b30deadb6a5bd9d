"""Run configuration: a flat, strictly validated key=value file.

Every hyperparameter of the pipeline lives here.  Unknown keys are rejected
outright — a silently ignored typo in a hyperparameter name is the easiest
way to ruin a reproduction.  Pattern clusters are configured through dotted
keys (`pattern.0.kind=plane_wave`, `pattern.0.weight=0.25`, ...); when no
pattern keys appear, a four-cluster default mixture (two plane-wave
directions, two spiral handednesses) is used.
"""

from dataclasses import dataclass, field, fields as dataclass_fields

from .data import PatternSpec


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_pair(s: str) -> tuple:
    parts = s.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {s!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_episode(s: str):
    return None if s == "auto" else int(s)


@dataclass
class RunConfig:
    # data generation
    seed: int = 0
    height: int = 12
    width: int = 12
    total_frames: int = 6000
    baseline_len: int = 40
    event_len: int = 120
    sampling_rate: float = 277.78
    # windowing and splits
    window_len: int = 20        # L: frames per sample
    future_len: int = 10        # n: predicted frames at the end of a window
    stride: int = 1
    test_episode: int = None    # None = auto (episode with the largest id)
    val_episode: int = None     # None = auto (second largest)
    # model
    hidden_dim: int = 64
    n_layers: int = 2
    members: int = 4
    init_scale: float = 0.08
    dropout_rate: float = 0.0
    # optimizer / training loop
    learning_rate: float = 2e-3
    momentum: float = 0.9
    clip_norm: float = 5.0
    batch_size: int = 32
    patience: int = 3
    max_epochs: int = 50
    zero_assignment: str = "decay"
    # classifier
    clf_hidden1: int = 256
    clf_hidden2: int = 64
    clf_learning_rate: float = 0.01
    clf_batch_size: int = 32
    clf_patience: int = 3
    clf_max_epochs: int = 100
    # analyses / execution
    max_lag: int = 8
    threads: int = 1
    # pattern clusters
    patterns: list = field(default_factory=list)

    def __post_init__(self):
        if not self.patterns:
            self.patterns = default_patterns()
        positive = ("height", "width", "total_frames", "event_len", "window_len",
                    "future_len", "stride", "hidden_dim", "n_layers", "members",
                    "batch_size", "max_epochs", "clf_hidden1", "clf_hidden2",
                    "clf_batch_size", "clf_max_epochs", "threads")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        non_negative = ("baseline_len", "patience", "clf_patience", "max_lag")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 < self.future_len < self.window_len:
            raise ValueError(f"future_len must lie strictly between 0 and window_len, "
                             f"got {self.future_len} vs {self.window_len}")
        for name in ("learning_rate", "clip_norm", "init_scale", "clf_learning_rate",
                     "sampling_rate"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.zero_assignment not in ("decay", "freeze"):
            raise ValueError(f"unknown zero_assignment policy {self.zero_assignment!r}")
        weights = sum(p.weight for p in self.patterns)
        if abs(weights - 1.0) > 1e-9:
            raise ValueError(f"pattern weights must sum to 1, got {weights}")

    @property
    def frame_dim(self) -> int:
        return self.height * self.width


def default_patterns() -> list:
    return [
        PatternSpec("plane_wave", weight=0.25, direction=(1.0, 0.0),
                    spatial_scale=6.0, temporal_freq=1.0 / 6.0, noise=0.02),
        PatternSpec("plane_wave", weight=0.25, direction=(0.0, 1.0),
                    spatial_scale=6.0, temporal_freq=1.0 / 6.0, noise=0.02),
        PatternSpec("spiral", weight=0.25, angular_velocity=0.5,
                    spatial_scale=8.0, noise=0.02),
        PatternSpec("spiral", weight=0.25, angular_velocity=-0.5,
                    spatial_scale=8.0, noise=0.02),
    ]


_SCALAR_PARSERS = {
    "seed": int, "height": int, "width": int, "total_frames": int,
    "baseline_len": int, "event_len": int, "sampling_rate": float,
    "window_len": int, "future_len": int, "stride": int,
    "test_episode": _parse_episode, "val_episode": _parse_episode,
    "hidden_dim": int, "n_layers": int, "members": int,
    "init_scale": float, "dropout_rate": float,
    "learning_rate": float, "momentum": float, "clip_norm": float,
    "batch_size": int, "patience": int, "max_epochs": int,
    "zero_assignment": str,
    "clf_hidden1": int, "clf_hidden2": int, "clf_learning_rate": float,
    "clf_batch_size": int, "clf_patience": int, "clf_max_epochs": int,
    "max_lag": int, "threads": int,
}

_PATTERN_PARSERS = {
    "kind": str, "weight": float, "direction": _parse_pair,
    "angular_velocity": float, "center": _parse_pair, "spatial_scale": float,
    "amplitude": float, "temporal_freq": float, "noise": float,
}


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines; '#' starts a comment; unknown keys are errors."""
    scalars = {}
    pattern_values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key.startswith("pattern."):
            parts = key.split(".")
            if len(parts) != 3 or not parts[1].isdigit():
                raise ValueError(f"line {lineno}: pattern keys look like "
                                 f"pattern.<index>.<field>, got {key!r}")
            index, pfield = int(parts[1]), parts[2]
            if pfield not in _PATTERN_PARSERS:
                raise ValueError(f"line {lineno}: unknown pattern field {pfield!r}")
            bucket = pattern_values.setdefault(index, {})
            if pfield in bucket:
                raise ValueError(f"line {lineno}: duplicate key {key!r}")
            bucket[pfield] = _PATTERN_PARSERS[pfield](value)
        else:
            if key not in _SCALAR_PARSERS:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            if key in scalars:
                raise ValueError(f"line {lineno}: duplicate key {key!r}")
            scalars[key] = _SCALAR_PARSERS[key](value)

    patterns = []
    if pattern_values:
        expected = list(range(len(pattern_values)))
        if sorted(pattern_values) != expected:
            raise ValueError(f"pattern indices must be 0..{len(pattern_values) - 1}, "
                             f"got {sorted(pattern_values)}")
        for index in expected:
            fields = pattern_values[index]
            if "kind" not in fields:
                raise ValueError(f"pattern.{index} needs a kind")
            patterns.append(PatternSpec(**fields))
    return RunConfig(patterns=patterns, **scalars)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_to_text(config: RunConfig) -> str:
    """Serialize back to the key=value format (parse_config round-trips it)."""
    lines = []
    skip = {"patterns"}
    for f in dataclass_fields(config):
        if f.name in skip:
            continue
        value = getattr(config, f.name)
        if value is None:
            value = "auto"
        lines.append(f"{f.name}={value}")
    for i, p in enumerate(config.patterns):
        lines.append(f"pattern.{i}.kind={p.kind}")
        lines.append(f"pattern.{i}.weight={p.weight}")
        lines.append(f"pattern.{i}.direction={p.direction[0]},{p.direction[1]}")
        lines.append(f"pattern.{i}.angular_velocity={p.angular_velocity}")
        if p.center is not None:
            lines.append(f"pattern.{i}.center={p.center[0]},{p.center[1]}")
        lines.append(f"pattern.{i}.spatial_scale={p.spatial_scale}")
        lines.append(f"pattern.{i}.amplitude={p.amplitude}")
        lines.append(f"pattern.{i}.temporal_freq={p.temporal_freq}")
        lines.append(f"pattern.{i}.noise={p.noise}")
    return "\n".join(lines) + "\n"
