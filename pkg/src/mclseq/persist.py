"""Checkpoint serialization.

A checkpoint is a single binary file holding everything needed to resume a
run or evaluate it later: the run configuration, every member's parameters
and optimizer velocity, each member's random-stream state, the tail of the
training log, and (once trained) the selection classifier.

Layout::

    magic "MCLCKPT1" | version u8 | payload_len u64 LE | payload | sha256(payload)

The payload is a sequence of tagged entries sorted by key, so identical
state always produces identical bytes::

    key_len u16 LE | key utf-8 | tag u8 | body

    tag 'A'  ndarray: dtype_len u8 | dtype str | ndim u8 | dims u32 LE each | raw LE bytes
    tag 'T'  text:    len u32 LE | utf-8 bytes
    tag 'I'  integer: i64 LE
    tag 'F'  float:   f64 LE

Failure modes are distinct exception types: a foreign or future format
version raises :class:`VersionError`, a file that ends early raises
:class:`TruncatedError`, and a complete file whose payload hash does not
match raises :class:`ChecksumError`.
"""

from dataclasses import dataclass, field, fields as dataclass_fields
import hashlib
import io
import json
import struct

import numpy as np

from .config import RunConfig, config_to_text, parse_config
from .numerics import Rng
from .selection import MlpClassifier
from .seq2seq import SequenceSpec, init_seq2seq, model_param_list, model_zeros_like
from .training import Ensemble, EnsembleMember, TrainLogRecord

MAGIC = b"MCLCKPT1"
VERSION = 1
LOG_TAIL = 50   # training-log records kept in a checkpoint

_CLF_ARRAYS = ("W1", "b1", "W2", "b2", "W3", "b3",
               "bn1_gamma", "bn1_beta", "bn1_mean", "bn1_var",
               "bn2_gamma", "bn2_beta", "bn2_mean", "bn2_var")


class CheckpointError(Exception):
    """A checkpoint file could not be read."""


class VersionError(CheckpointError):
    """The file is a checkpoint, but of a format version we do not speak."""


class ChecksumError(CheckpointError):
    """The payload hash does not match; the file is corrupt."""


class TruncatedError(CheckpointError):
    """The file ends before the declared content does."""


@dataclass
class Checkpoint:
    config: RunConfig
    ensemble: Ensemble
    classifier: MlpClassifier = None
    log: list = field(default_factory=list)
    trainer_rng_state: dict = None


# ---------------------------------------------------------------------------
# tagged payload encoding
# ---------------------------------------------------------------------------

def _encode_entry(key: str, value) -> bytes:
    key_b = key.encode("utf-8")
    out = [struct.pack("<H", len(key_b)), key_b]
    if isinstance(value, np.ndarray):
        a = np.ascontiguousarray(value)
        dt = a.dtype.newbyteorder("<")
        dt_b = dt.str.encode("ascii")
        out.append(b"A")
        out.append(struct.pack("<B", len(dt_b)))
        out.append(dt_b)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.astype(dt, copy=False).tobytes())
    elif isinstance(value, str):
        s = value.encode("utf-8")
        out.append(b"T")
        out.append(struct.pack("<I", len(s)))
        out.append(s)
    elif isinstance(value, bool) or isinstance(value, (int, np.integer)):
        out.append(b"I")
        out.append(struct.pack("<q", int(value)))
    elif isinstance(value, float):
        out.append(b"F")
        out.append(struct.pack("<d", value))
    else:
        raise TypeError(f"cannot serialize {type(value).__name__} under key {key!r}")
    return b"".join(out)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedError(f"file ends inside {what} "
                             f"(wanted {n} bytes, got {len(data)})")
    return data


def _decode_payload(payload: bytes) -> dict:
    fh = io.BytesIO(payload)
    entries = {}
    while fh.tell() < len(payload):
        (key_len,) = struct.unpack("<H", _read_exact(fh, 2, "an entry key length"))
        key = _read_exact(fh, key_len, "an entry key").decode("utf-8")
        tag = _read_exact(fh, 1, f"the tag of {key!r}")
        if tag == b"A":
            (dt_len,) = struct.unpack("<B", _read_exact(fh, 1, f"{key!r}"))
            dt = np.dtype(_read_exact(fh, dt_len, f"{key!r}").decode("ascii"))
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"{key!r}"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"{key!r}"))
            nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            raw = _read_exact(fh, nbytes, f"the array {key!r}")
            value = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        elif tag == b"T":
            (n,) = struct.unpack("<I", _read_exact(fh, 4, f"{key!r}"))
            value = _read_exact(fh, n, f"the text {key!r}").decode("utf-8")
        elif tag == b"I":
            (value,) = struct.unpack("<q", _read_exact(fh, 8, f"{key!r}"))
        elif tag == b"F":
            (value,) = struct.unpack("<d", _read_exact(fh, 8, f"{key!r}"))
        else:
            raise CheckpointError(f"unknown entry tag {tag!r} for key {key!r}")
        if key in entries:
            raise CheckpointError(f"duplicate checkpoint key {key!r}")
        entries[key] = value
    return entries


# ---------------------------------------------------------------------------
# checkpoint <-> flat entry dict
# ---------------------------------------------------------------------------

def _flatten(ckpt: Checkpoint) -> dict:
    model0 = ckpt.ensemble.members[0].model
    entries = {
        "config": config_to_text(ckpt.config),
        "spec/window_len": model0.spec.L,
        "spec/future_len": model0.spec.n,
        "spec/frame_dim": model0.spec.frame_dim,
        "model/hidden_dim": model0.hidden_dim,
        "model/n_layers": model0.n_layers,
        "model/dtype": np.dtype(model0.dtype).str,
        "model/reverse_recon": int(model0.reverse_recon),
        "model/use_peepholes": int(model0.use_peepholes),
        "ensemble/members": ckpt.ensemble.size,
        "ensemble/pretrained": int(ckpt.ensemble.pretrained),
        "log": json.dumps([r.as_dict() for r in ckpt.log[-LOG_TAIL:]],
                          sort_keys=True),
        "classifier/present": int(ckpt.classifier is not None),
    }
    for m, member in enumerate(ckpt.ensemble.members):
        for i, a in enumerate(model_param_list(member.model)):
            entries[f"member{m:02d}/p{i:03d}"] = a
        for i, a in enumerate(model_param_list(member.velocity)):
            entries[f"member{m:02d}/v{i:03d}"] = a
        entries[f"member{m:02d}/rng"] = json.dumps(member.rng.get_state(),
                                                   sort_keys=True)
    if ckpt.trainer_rng_state is not None:
        entries["trainer/rng"] = json.dumps(ckpt.trainer_rng_state, sort_keys=True)
    if ckpt.classifier is not None:
        for name in _CLF_ARRAYS:
            entries[f"classifier/{name}"] = getattr(ckpt.classifier, name)
        entries["classifier/bn_eps"] = float(ckpt.classifier.bn_eps)
        entries["classifier/bn_decay"] = float(ckpt.classifier.bn_decay)
    return entries


def _require(entries: dict, key: str):
    if key not in entries:
        raise CheckpointError(f"checkpoint is missing required key {key!r}")
    return entries[key]


def _load_arrays(entries: dict, prefix: str, targets: list) -> None:
    """Copy stored arrays into `targets` in place, insisting on exact layout."""
    for i, a in enumerate(targets):
        stored = _require(entries, f"{prefix}{i:03d}")
        if stored.shape != a.shape or stored.dtype != a.dtype:
            raise CheckpointError(
                f"array {prefix}{i:03d} has shape {stored.shape} {stored.dtype}, "
                f"expected {a.shape} {a.dtype}")
        a[...] = stored


def _unflatten(entries: dict) -> Checkpoint:
    config = parse_config(_require(entries, "config"))
    spec = SequenceSpec(L=_require(entries, "spec/window_len"),
                        n=_require(entries, "spec/future_len"),
                        frame_dim=_require(entries, "spec/frame_dim"))
    dtype = np.dtype(_require(entries, "model/dtype"))
    n_members = _require(entries, "ensemble/members")
    members = []
    for m in range(n_members):
        model = init_seq2seq(Rng(0), spec,
                             hidden_dim=_require(entries, "model/hidden_dim"),
                             n_layers=_require(entries, "model/n_layers"),
                             dtype=dtype,
                             reverse_recon=bool(_require(entries, "model/reverse_recon")),
                             use_peepholes=bool(_require(entries, "model/use_peepholes")))
        velocity = model_zeros_like(model)
        _load_arrays(entries, f"member{m:02d}/p", model_param_list(model))
        _load_arrays(entries, f"member{m:02d}/v", model_param_list(velocity))
        rng = Rng(0)
        rng.set_state(json.loads(_require(entries, f"member{m:02d}/rng")))
        members.append(EnsembleMember(model=model, velocity=velocity, rng=rng))
    ensemble = Ensemble(members=members,
                        pretrained=bool(_require(entries, "ensemble/pretrained")))

    classifier = None
    if _require(entries, "classifier/present"):
        arrays = {name: _require(entries, f"classifier/{name}")
                  for name in _CLF_ARRAYS}
        classifier = MlpClassifier(**arrays,
                                   bn_eps=_require(entries, "classifier/bn_eps"),
                                   bn_decay=_require(entries, "classifier/bn_decay"))

    log = [TrainLogRecord(**d) for d in json.loads(_require(entries, "log"))]
    trainer_rng_state = None
    if "trainer/rng" in entries:
        trainer_rng_state = json.loads(entries["trainer/rng"])
    return Checkpoint(config=config, ensemble=ensemble, classifier=classifier,
                      log=log, trainer_rng_state=trainer_rng_state)


# ---------------------------------------------------------------------------
# file API
# ---------------------------------------------------------------------------

def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries = _flatten(ckpt)
    payload = b"".join(_encode_entry(k, entries[k]) for k in sorted(entries))
    digest = hashlib.sha256(payload).digest()
    return b"".join([MAGIC, struct.pack("<B", VERSION),
                     struct.pack("<Q", len(payload)), payload, digest])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "the magic header")
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<B", _read_exact(fh, 1, "the version byte"))
        if version != VERSION:
            raise VersionError(f"checkpoint format version {version}, "
                               f"expected {VERSION}")
        (payload_len,) = struct.unpack("<Q", _read_exact(fh, 8, "the payload length"))
        payload = _read_exact(fh, payload_len, "the payload")
        digest = _read_exact(fh, hashlib.sha256().digest_size, "the checksum")
        if fh.read(1):
            raise CheckpointError("trailing bytes after the checksum")
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError("payload checksum mismatch; the file is corrupt")
    return _unflatten(_decode_payload(payload))
