"""Synthetic multi-cluster grid recordings and dataset plumbing.

A Recording is a T x H x W activity video over a fixed electrode grid, cut
into episodes.  Every episode is a quiet baseline segment followed by an
event segment drawn from one spatiotemporal pattern cluster (travelling
plane waves, spirals, localised bursts, silence, or decaying activity).
This module also owns missing-channel interpolation, sliding-window
extraction, episode-disjoint splits, per-channel delay maps, and the binary
file format recordings travel in.
"""

from dataclasses import dataclass, field
import math
import struct
import warnings

import numpy as np

from .numerics import Rng

MAGIC = b"MCLSEQ01"
PHASE_BASELINE = 0
PHASE_EVENT = 1
PHASE_NAMES = ("baseline", "event")

PATTERN_KINDS = ("plane_wave", "spiral", "local_burst", "silence", "refractory_decay")


@dataclass
class Recording:
    """Grid video plus per-frame episode labels and channel validity."""

    frames: np.ndarray        # [T, H, W] float32
    valid_mask: np.ndarray    # [H, W] bool; False = missing channel
    episode_ids: np.ndarray   # [T] uint32
    phases: np.ndarray        # [T] uint8; 0 baseline, 1 event
    sampling_rate: float = 277.78
    max_intensity: float = 1.0
    generator: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be [T, H, W], got shape {self.frames.shape}")
        t, h, w = self.frames.shape
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != (h, w):
            raise ValueError(f"valid_mask shape {self.valid_mask.shape} != grid {(h, w)}")
        self.episode_ids = np.asarray(self.episode_ids, dtype=np.uint32)
        self.phases = np.asarray(self.phases, dtype=np.uint8)
        if self.episode_ids.shape != (t,) or self.phases.shape != (t,):
            raise ValueError("episode_ids and phases must have one entry per frame")
        if self.max_intensity < float(np.abs(self.frames).max(initial=0.0)):
            raise ValueError("max_intensity must bound every |frame value|")

    @property
    def shape(self):
        return self.frames.shape

    @property
    def episode_count(self) -> int:
        return len(np.unique(self.episode_ids))


@dataclass
class PatternSpec:
    """One activity cluster; fields are interpreted per kind.

    plane_wave       direction, spatial_scale (wavelength, pixels),
                     temporal_freq (cycles/frame), amplitude
    spiral           center, angular_velocity (rad/frame, sign = handedness),
                     spatial_scale (radial wavelength), amplitude
    local_burst      center, spatial_scale (blob sigma), temporal_freq
                     (burst rate), amplitude
    silence          nothing (noise only)
    refractory_decay center, spatial_scale (blob sigma), temporal_freq
                     (decay rate per frame), amplitude
    `noise` is the sigma of white noise added in both phases.
    """

    kind: str
    weight: float = 1.0
    direction: tuple = (1.0, 0.0)
    angular_velocity: float = 0.3
    center: tuple = None
    spatial_scale: float = 4.0
    amplitude: float = 0.8
    temporal_freq: float = 0.05
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}; know {PATTERN_KINDS}")
        if self.weight < 0.0:
            raise ValueError("weight must be non-negative")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("amplitude must lie in [0, 1]")
        if self.noise < 0.0:
            raise ValueError("noise must be non-negative")
        if self.spatial_scale <= 0.0:
            raise ValueError("spatial_scale must be positive")
        if self.temporal_freq < 0.0:
            raise ValueError("temporal_freq must be non-negative")


@dataclass
class SequenceSample:
    """One flattened L-frame window with its provenance."""

    frames: np.ndarray   # [L, H*W] float32
    episode_id: int
    phase: int           # phase of the window's final frame
    start: int           # index of the first frame in the recording


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    train_episodes: list = field(default_factory=list)
    val_episodes: list = field(default_factory=list)
    test_episodes: list = field(default_factory=list)


def windows_array(samples: list) -> np.ndarray:
    """Stack SequenceSamples into the [N x L x D] array the trainer eats."""
    if not samples:
        raise ValueError("no windows to stack")
    return np.stack([s.frames for s in samples])


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _grid(h, w, center):
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    if center is None:
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
    return rows, cols, rows - center[0], cols - center[1]


def _event_frames(spec: PatternSpec, n_frames: int, h: int, w: int,
                  phase_offset: float) -> np.ndarray:
    """Noise-free event segment for one episode, [n_frames, h, w] float64."""
    t = np.arange(n_frames, dtype=np.float64)[:, None, None]
    rows, cols, dy, dx = _grid(h, w, spec.center)
    two_pi = 2.0 * math.pi
    if spec.kind == "plane_wave":
        proj = spec.direction[0] * rows + spec.direction[1] * cols
        return spec.amplitude * np.sin(
            two_pi * (proj / spec.spatial_scale - spec.temporal_freq * t) + phase_offset)
    if spec.kind == "spiral":
        theta = np.arctan2(dy, dx)
        radius = np.hypot(dy, dx)
        return spec.amplitude * np.sin(
            theta - spec.angular_velocity * t
            + two_pi * radius / spec.spatial_scale + phase_offset)
    if spec.kind == "local_burst":
        envelope = np.exp(-(dy ** 2 + dx ** 2) / (2.0 * spec.spatial_scale ** 2))
        pulse = np.maximum(np.sin(two_pi * spec.temporal_freq * t + phase_offset), 0.0)
        return spec.amplitude * envelope * pulse
    if spec.kind == "silence":
        return np.zeros((n_frames, h, w))
    # refractory_decay: a blob of activity dying out over the episode
    envelope = np.exp(-(dy ** 2 + dx ** 2) / (2.0 * spec.spatial_scale ** 2))
    return spec.amplitude * envelope * np.exp(-spec.temporal_freq * t)


def generate_synthetic(specs: list, T: int, H: int, W: int, seed: int,
                       baseline_len: int = 40, event_len: int = 120) -> Recording:
    """Concatenated baseline+event episodes, each from one pattern cluster.

    Cluster choice, phase offsets and noise all derive from `seed`, so equal
    arguments give bit-identical recordings.  Values are clipped into
    [-1, 1] and max_intensity is recorded as 1.0.
    """
    if T < 1 or H < 1 or W < 1:
        raise ValueError("T, H and W must all be >= 1")
    if not specs:
        raise ValueError("need at least one PatternSpec")
    if baseline_len < 0 or event_len < 1:
        raise ValueError("baseline_len must be >= 0 and event_len >= 1")
    weights = np.array([s.weight for s in specs], dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixture weights must sum to 1, got {weights.sum()}")
    cumulative = np.cumsum(weights)

    rng = Rng(seed)
    chunks, ids, phases = [], [], []
    episode = 0
    total = 0
    while total < T:
        u = float(rng.uniform(0.0, 1.0, ()))
        spec = specs[int(np.searchsorted(cumulative, u, side="right").clip(0, len(specs) - 1))]
        offset = float(rng.uniform(0.0, 2.0 * math.pi, ()))
        segment = np.concatenate([
            np.zeros((baseline_len, H, W)),
            _event_frames(spec, event_len, H, W, offset),
        ])
        if spec.noise > 0.0:
            segment = segment + rng.normal(0.0, spec.noise, segment.shape)
        chunks.append(np.clip(segment, -1.0, 1.0))
        ids.append(np.full(len(segment), episode, dtype=np.uint32))
        phases.append(np.concatenate([
            np.full(baseline_len, PHASE_BASELINE, dtype=np.uint8),
            np.full(event_len, PHASE_EVENT, dtype=np.uint8),
        ]))
        total += len(segment)
        episode += 1

    generator = "|".join(f"{s.kind}:{s.weight}" for s in specs)
    return Recording(
        frames=np.concatenate(chunks)[:T].astype(np.float32),
        valid_mask=np.ones((H, W), dtype=bool),
        episode_ids=np.concatenate(ids)[:T],
        phases=np.concatenate(phases)[:T],
        max_intensity=1.0,
        generator=generator,
    )


# ---------------------------------------------------------------------------
# missing-channel fill
# ---------------------------------------------------------------------------

def fill_missing(recording: Recording, tol: float = 1e-6,
                 max_iterations: int = 100_000) -> Recording:
    """Harmonic interpolation of invalid channels, frame by frame.

    Each missing value is iterated to the mean of its in-grid 4-neighbours
    (Jacobi sweeps) until the largest change falls below `tol`.  The sweep
    that first meets the tolerance is discarded, which keeps the operation
    exactly idempotent; valid channels are never touched.
    """
    mask = recording.valid_mask
    if mask.all():
        return recording
    if not mask.any():
        raise ValueError("cannot fill a recording with no valid channels")

    holes = ~mask
    neighbour_count = _neighbour_sum(np.ones(mask.shape))

    # Start from whatever the missing channels currently hold: on a fresh
    # recording that is arbitrary (the sweeps forget it), on an already
    # filled one it is the converged solution, which makes a second fill
    # return bit-identical values.
    current = recording.frames.astype(np.float64)
    for _ in range(max_iterations):
        updated = _neighbour_sum(current) / neighbour_count
        delta = np.abs(updated[:, holes] - current[:, holes]).max()
        if delta < tol:
            break
        current[:, holes] = updated[:, holes]
    else:
        raise RuntimeError(f"harmonic fill did not converge within {max_iterations} sweeps")

    filled = recording.frames.copy()
    filled[:, holes] = current[:, holes].astype(np.float32)
    return Recording(frames=filled, valid_mask=mask,
                     episode_ids=recording.episode_ids, phases=recording.phases,
                     sampling_rate=recording.sampling_rate,
                     max_intensity=max(recording.max_intensity,
                                       float(np.abs(filled).max())),
                     generator=recording.generator)


def _neighbour_sum(a: np.ndarray) -> np.ndarray:
    """Sum of in-grid 4-neighbours along the last two axes."""
    out = np.zeros_like(a)
    out[..., 1:, :] += a[..., :-1, :]
    out[..., :-1, :] += a[..., 1:, :]
    out[..., :, 1:] += a[..., :, :-1]
    out[..., :, :-1] += a[..., :, 1:]
    return out


# ---------------------------------------------------------------------------
# windows and splits
# ---------------------------------------------------------------------------

def sliding_windows(recording: Recording, L: int, stride: int = 1) -> list:
    """L-frame windows that never span an episode boundary.

    Frames are flattened to H*W vectors; each window is tagged with the
    phase of its final frame (the part a predictor is judged on).  Episodes
    shorter than L contribute nothing and trigger a warning.
    """
    t = recording.frames.shape[0]
    if L > t:
        raise ValueError(f"window length {L} exceeds recording length {t}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    flat = recording.frames.reshape(t, -1)
    samples = []
    boundaries = np.flatnonzero(np.diff(recording.episode_ids)) + 1
    starts = np.concatenate([[0], boundaries, [t]])
    for seg_start, seg_end in zip(starts[:-1], starts[1:]):
        if seg_end - seg_start < L:
            warnings.warn(f"episode {int(recording.episode_ids[seg_start])} has "
                          f"{seg_end - seg_start} frames (< L={L}); no windows taken")
            continue
        for s in range(seg_start, seg_end - L + 1, stride):
            samples.append(SequenceSample(
                frames=flat[s:s + L].copy(),
                episode_id=int(recording.episode_ids[s]),
                phase=int(recording.phases[s + L - 1]),
                start=int(s)))
    return samples


def split_by_episode(windows: list, test_episode: int, val_episode: int) -> DatasetSplit:
    """Partition windows by episode id into train/validation/test."""
    if test_episode == val_episode:
        raise ValueError("test and validation episodes must differ")
    present = {w.episode_id for w in windows}
    for name, ep in (("test", test_episode), ("validation", val_episode)):
        if ep not in present:
            raise ValueError(f"unknown {name} episode id {ep}")
    split = DatasetSplit(train=[], validation=[], test=[])
    for w in windows:
        if w.episode_id == test_episode:
            split.test.append(w)
        elif w.episode_id == val_episode:
            split.validation.append(w)
        else:
            split.train.append(w)
    split.test_episodes = [test_episode]
    split.val_episodes = [val_episode]
    split.train_episodes = sorted(present - {test_episode, val_episode})
    return split


# ---------------------------------------------------------------------------
# delay maps
# ---------------------------------------------------------------------------

def delay_map(sequence: np.ndarray, max_lag: int, valid_mask: np.ndarray = None):
    """Per-channel delay (in frames) against the grid-mean reference.

    The delay of a channel is the integer lag in [-max_lag, +max_lag] that
    maximises its normalised cross-correlation with the per-frame mean over
    valid channels; positive delay means the channel trails the reference.
    Ties prefer the smallest |lag| and then the negative sign.  Channels with
    zero variance (or marked invalid) get delay 0 and a degenerate flag.
    Returns (delays [H x W] float64, degenerate [H x W] bool).
    """
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.ndim != 3:
        raise ValueError(f"sequence must be [T, H, W], got shape {sequence.shape}")
    t, h, w = sequence.shape
    if max_lag < 0:
        raise ValueError("max_lag must be non-negative")
    if t <= 2 * max_lag:
        raise ValueError(f"need more than {2 * max_lag} frames, got {t}")
    if valid_mask is None:
        valid_mask = np.ones((h, w), dtype=bool)
    if not valid_mask.any():
        raise ValueError("no valid channels to build a reference from")

    channels = sequence.reshape(t, -1)
    reference = channels[:, valid_mask.ravel()].mean(axis=1)

    # constant channels (max == min) have no structure to correlate
    degenerate = ~valid_mask.ravel() | (channels.max(axis=0) == channels.min(axis=0))
    if reference.max() == reference.min():
        degenerate[:] = True

    best_corr = np.full(h * w, -np.inf)
    best_lag = np.zeros(h * w)
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda k: (abs(k), k >= 0)):
        lo, hi = max(0, lag), t + min(0, lag)
        xs = channels[lo:hi]
        rs = reference[lo - lag:hi - lag]
        xs_c = xs - xs.mean(axis=0)
        rs_c = rs - rs.mean()
        denom = np.sqrt((xs_c ** 2).sum(axis=0) * (rs_c ** 2).sum())
        corr = np.where(denom > 0.0, xs_c.T @ rs_c / np.where(denom > 0.0, denom, 1.0), 0.0)
        better = corr > best_corr
        best_lag[better] = lag
        best_corr[better] = corr[better]
    best_lag[degenerate] = 0.0
    return best_lag.reshape(h, w), degenerate.reshape(h, w)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def save_recording(path, recording: Recording) -> None:
    """Write the binary recording format plus its key=value sidecar."""
    t, h, w = recording.frames.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", t, h, w, recording.episode_count))
        fh.write(recording.valid_mask.astype(np.uint8).tobytes())
        per_frame = np.empty(t, dtype=np.dtype([("ep", "<u4"), ("ph", "u1")]))
        per_frame["ep"] = recording.episode_ids
        per_frame["ph"] = recording.phases
        fh.write(per_frame.tobytes())
        fh.write(recording.frames.astype("<f4").tobytes())
    meta = {
        "sampling_rate": repr(float(recording.sampling_rate)),
        "max_intensity": repr(float(recording.max_intensity)),
        "generator": recording.generator,
    }
    with open(str(path) + ".meta", "w") as fh:
        for key in sorted(meta):
            fh.write(f"{key}={meta[key]}\n")


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated recording file: expected {n} bytes of {what}, "
                         f"got {len(data)}")
    return data


def load_recording(path) -> Recording:
    """Read the binary recording format; the sidecar is optional."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "magic")
        if magic != MAGIC:
            raise ValueError(f"not a recording file: bad magic {magic!r}")
        t, h, w, episode_count = struct.unpack("<4I", _read_exact(fh, 16, "header"))
        mask = np.frombuffer(_read_exact(fh, h * w, "valid mask"),
                             dtype=np.uint8).reshape(h, w).astype(bool)
        per_frame = np.frombuffer(_read_exact(fh, 5 * t, "frame labels"),
                                  dtype=np.dtype([("ep", "<u4"), ("ph", "u1")]))
        frames = np.frombuffer(_read_exact(fh, 4 * t * h * w, "frames"),
                               dtype="<f4").reshape(t, h, w)
        if fh.read(1):
            raise ValueError("trailing bytes after frame data")
    meta = {"sampling_rate": 277.78, "max_intensity": 1.0, "generator": ""}
    try:
        with open(str(path) + ".meta") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                if key in ("sampling_rate", "max_intensity"):
                    meta[key] = float(value)
                else:
                    meta[key] = value
    except FileNotFoundError:
        pass
    rec = Recording(frames=frames.copy(), valid_mask=mask,
                    episode_ids=per_frame["ep"].copy(),
                    phases=per_frame["ph"].copy(),
                    sampling_rate=meta["sampling_rate"],
                    max_intensity=meta["max_intensity"],
                    generator=str(meta.get("generator", "")))
    if rec.episode_count != episode_count:
        raise ValueError(f"header claims {episode_count} episodes, "
                         f"labels contain {rec.episode_count}")
    return rec
