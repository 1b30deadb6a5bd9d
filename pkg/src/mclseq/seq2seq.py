"""Encoder/decoder/predictor composite model over flattened grid frames.

One model maps an observed prefix of ``L - n`` frames to all ``L`` frames:
the encoder folds the prefix into per-layer (h, c) states, the decoder
replays the observed frames from those states, and the predictor rolls out
the ``n`` future frames.  Decoder and predictor run unconditioned (zero step
inputs) and each owns its output projection.  The reconstruction is emitted
in reversed target order by default, mirroring the convention of the
unsupervised-LSTM lineage this model follows; a switch restores natural
order.

Shapes: a single sample is ``[L, frame_dim]``; batched calls use time-major
``[L, batch, frame_dim]``.  The loss is one mean square error over all L
frames jointly, normalized by the element count ``L * frame_dim``; batched
backward sums per-sample gradients, so charging a member with its assigned
subset is a plain slice.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lstm import (
    DropoutSpec,
    LstmLayerParams,
    LstmState,
    StackResult,
    init_lstm_layer,
    make_dropout_masks,
    stack_backward,
    stack_forward,
    zeros_like_layer,
)
from .numerics import Rng, uniform_init


@dataclass
class SequenceSpec:
    """Window geometry: L total frames, the last n of them prediction targets."""

    L: int = 20
    n: int = 10
    frame_dim: int = 144

    def __post_init__(self):
        if not 0 < self.n < self.L:
            raise ValueError(f"need 0 < n < L, got n={self.n}, L={self.L}")
        if self.frame_dim < 1:
            raise ValueError(f"frame_dim must be >= 1, got {self.frame_dim}")

    @property
    def prefix_len(self) -> int:
        return self.L - self.n


@dataclass
class OutputProjection:
    W: np.ndarray  # [frame_dim x hidden_dim]
    b: np.ndarray  # [frame_dim]


@dataclass
class Seq2SeqModel:
    spec: SequenceSpec
    encoder: list[LstmLayerParams]
    decoder: list[LstmLayerParams]
    predictor: list[LstmLayerParams]
    dec_proj: OutputProjection
    pred_proj: OutputProjection
    reverse_recon: bool = True
    use_peepholes: bool = True

    @property
    def hidden_dim(self) -> int:
        return self.encoder[-1].hidden_dim

    @property
    def n_layers(self) -> int:
        return len(self.encoder)

    @property
    def dtype(self):
        return self.encoder[0].W_hi.dtype


@dataclass
class ModelGrads:
    encoder: list[LstmLayerParams]
    decoder: list[LstmLayerParams]
    predictor: list[LstmLayerParams]
    dec_proj: OutputProjection
    pred_proj: OutputProjection


@dataclass
class ModelOutput:
    """Forward result plus everything the backward pass reuses.

    ``recon_tm`` is stored in natural time order (frame k lines up with
    input frame k) regardless of the decoder's emission order.
    """

    recon_tm: np.ndarray    # [P, B, D]
    pred_tm: np.ndarray     # [n, B, D]
    enc_res: StackResult
    dec_res: StackResult
    pred_res: StackResult
    batched: bool
    per_sample_loss: np.ndarray = field(default=None)  # [B], model dtype

    @property
    def reconstruction(self) -> np.ndarray:
        return self.recon_tm if self.batched else self.recon_tm[:, 0, :]

    @property
    def prediction(self) -> np.ndarray:
        return self.pred_tm if self.batched else self.pred_tm[:, 0, :]

    def take(self, indices: np.ndarray) -> "ModelOutput":
        """Batch-axis slice; used to charge a member only its assigned samples."""
        if not self.batched:
            raise ValueError("take() requires a batched output")
        return ModelOutput(
            recon_tm=self.recon_tm[:, indices, :],
            pred_tm=self.pred_tm[:, indices, :],
            enc_res=_take_stack(self.enc_res, indices),
            dec_res=_take_stack(self.dec_res, indices),
            pred_res=_take_stack(self.pred_res, indices),
            batched=True,
            per_sample_loss=self.per_sample_loss[indices],
        )


def _take_stack(res: StackResult, idx: np.ndarray) -> StackResult:
    def tk(a):
        return None if a is None else a[idx]

    # Rebuild caches with sliced arrays; StepCache fields are all batch-major.
    sliced = []
    for layer in res.caches:
        row = []
        for c in layer:
            row.append(type(c)(x_t=tk(c.x_t), h_prev=tk(c.h_prev), c_prev=tk(c.c_prev),
                               i_t=tk(c.i_t), f_t=tk(c.f_t), o_t=tk(c.o_t), g_t=tk(c.g_t),
                               c_t=tk(c.c_t), h_t=tk(c.h_t), tc_t=tk(c.tc_t)))
        sliced.append(row)
    masks = None if res.masks is None else [m[idx] for m in res.masks]
    finals = [LstmState(h=s.h[idx], c=s.c[idx]) for s in res.final_states]
    h_seqs = [[h[idx] for h in layer] for layer in res.h_seqs]
    return StackResult(h_seqs=h_seqs, final_states=finals, caches=sliced, masks=masks)


def init_seq2seq(rng: Rng, spec: SequenceSpec, hidden_dim: int, n_layers: int,
                 dtype=np.float32, init_scale: float = 0.08, forget_bias: float = 1.0,
                 reverse_recon: bool = True, use_peepholes: bool = True) -> Seq2SeqModel:
    """Fresh model; all branches share depth and width so encoder states can
    seed decoder and predictor layer by layer."""
    if n_layers < 1 or hidden_dim < 1:
        raise ValueError("need n_layers >= 1 and hidden_dim >= 1")

    def branch(branch_rng: Rng) -> list[LstmLayerParams]:
        layers = []
        for l in range(n_layers):
            in_dim = spec.frame_dim if l == 0 else hidden_dim
            layers.append(init_lstm_layer(branch_rng.split(l), in_dim, hidden_dim,
                                          init_scale, forget_bias, dtype))
        return layers

    def proj(proj_rng: Rng) -> OutputProjection:
        return OutputProjection(
            W=uniform_init(proj_rng, spec.frame_dim, hidden_dim, init_scale, dtype),
            b=np.zeros(spec.frame_dim, dtype=dtype))

    return Seq2SeqModel(
        spec=spec,
        encoder=branch(rng.split(0)),
        decoder=branch(rng.split(1)),
        predictor=branch(rng.split(2)),
        dec_proj=proj(rng.split(3)),
        pred_proj=proj(rng.split(4)),
        reverse_recon=reverse_recon,
        use_peepholes=use_peepholes,
    )


def model_zeros_like(model: Seq2SeqModel) -> ModelGrads:
    return ModelGrads(
        encoder=[zeros_like_layer(p) for p in model.encoder],
        decoder=[zeros_like_layer(p) for p in model.decoder],
        predictor=[zeros_like_layer(p) for p in model.predictor],
        dec_proj=OutputProjection(W=np.zeros_like(model.dec_proj.W),
                                  b=np.zeros_like(model.dec_proj.b)),
        pred_proj=OutputProjection(W=np.zeros_like(model.pred_proj.W),
                                   b=np.zeros_like(model.pred_proj.b)),
    )


def model_param_list(model) -> list[np.ndarray]:
    """Canonical flat view of all parameter arrays; works on Seq2SeqModel,
    ModelGrads, and velocity trees alike."""
    from .lstm import LAYER_FIELDS

    out = []
    for branch in (model.encoder, model.decoder):
        for layer in branch:
            out.extend(getattr(layer, f) for f in LAYER_FIELDS)
    out.extend((model.dec_proj.W, model.dec_proj.b))
    for layer in model.predictor:
        out.extend(getattr(layer, f) for f in LAYER_FIELDS)
    out.extend((model.pred_proj.W, model.pred_proj.b))
    return out


def clone_model(model: Seq2SeqModel) -> Seq2SeqModel:
    return copy.deepcopy(model)


def _lift(frames: np.ndarray) -> tuple[np.ndarray, bool]:
    if frames.ndim == 2:
        return frames[:, None, :], False
    if frames.ndim == 3:
        return frames, True
    raise ValueError(f"frames must be [T, D] or [T, B, D], got shape {frames.shape}")


def _steps(frames_tm: np.ndarray) -> list[np.ndarray]:
    return [frames_tm[t] for t in range(frames_tm.shape[0])]


def encode(model: Seq2SeqModel, input_frames: np.ndarray) -> list[LstmState]:
    """Per-layer final (h, c) after the last input frame (evaluation mode).

    The top layer's h is also the feature the model-selection classifier
    consumes.
    """
    tm, batched = _lift(np.asarray(input_frames))
    _check_prefix(model, tm)
    res = stack_forward(model.encoder, _steps(tm), use_peepholes=model.use_peepholes)
    states = res.final_states
    if not batched:
        states = [LstmState(h=s.h[0], c=s.c[0]) for s in states]
    return states


def _check_prefix(model: Seq2SeqModel, tm: np.ndarray) -> None:
    P = model.spec.prefix_len
    if tm.shape[0] != P:
        raise ValueError(f"input prefix length {tm.shape[0]} != L - n = {P}")
    if tm.shape[-1] != model.spec.frame_dim:
        raise ValueError(
            f"frame dim {tm.shape[-1]} != spec frame_dim {model.spec.frame_dim}")


def _lift_states(states: list[LstmState]) -> tuple[list[LstmState], bool]:
    if states[0].h.ndim == 1:
        return [LstmState(h=s.h[None, :], c=s.c[None, :]) for s in states], False
    return states, True


def _rollout(model: Seq2SeqModel, branch: list[LstmLayerParams], proj: OutputProjection,
             states: list[LstmState], n_steps: int,
             masks=None) -> tuple[np.ndarray, StackResult]:
    res = stack_forward(branch, None, n_steps=n_steps, init_states=states,
                        masks=masks, use_peepholes=model.use_peepholes)
    top = res.h_seqs[-1]
    out = np.stack([h @ proj.W.T + proj.b for h in top], axis=0)  # [T, B, D]
    return out, res


def decode_reconstruct(model: Seq2SeqModel, encoder_states: list[LstmState]) -> np.ndarray:
    """Replay the observed prefix from encoder states (evaluation mode).

    Output is in natural time order whatever the emission order; length is
    always L - n.
    """
    states, batched = _lift_states(encoder_states)
    out, _ = _rollout(model, model.decoder, model.dec_proj, states, model.spec.prefix_len)
    if model.reverse_recon:
        out = out[::-1]
    return out if batched else out[:, 0, :]


def predict_future(model: Seq2SeqModel, encoder_states: list[LstmState]) -> np.ndarray:
    """Roll out the n future frames from encoder states (evaluation mode)."""
    states, batched = _lift_states(encoder_states)
    out, _ = _rollout(model, model.predictor, model.pred_proj, states, model.spec.n)
    return out if batched else out[:, 0, :]


def sequence_loss(model: Seq2SeqModel, frames: np.ndarray,
                  dropout: Optional[DropoutSpec] = None,
                  rng: Optional[Rng] = None) -> tuple:
    """Forward the full window and score it.

    Returns ``(loss, output)``: a scalar for a single ``[L, D]`` sample, a
    per-sample array for a ``[L, B, D]`` batch.  The loss is the mean square
    error over all L frames jointly (reconstruction and prediction equally
    weighted), normalized by ``L * frame_dim``.

    Dropout masks (training mode only) are drawn from ``rng`` per sequence,
    in the fixed order encoder, decoder, predictor.
    """
    spec = model.spec
    tm, batched = _lift(np.asarray(frames))
    if tm.shape[0] != spec.L:
        raise ValueError(f"sample length {tm.shape[0]} != L = {spec.L}")
    if tm.shape[-1] != spec.frame_dim:
        raise ValueError(f"frame dim {tm.shape[-1]} != spec frame_dim {spec.frame_dim}")
    P = spec.prefix_len
    B = tm.shape[1]
    prefix, future = tm[:P], tm[P:]

    enc_masks = dec_masks = pred_masks = None
    if dropout is not None and dropout.active:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        nb = model.n_layers - 1
        dt = model.dtype
        enc_masks = make_dropout_masks(rng, dropout, nb, (B,), model.hidden_dim, dt)
        dec_masks = make_dropout_masks(rng, dropout, nb, (B,), model.hidden_dim, dt)
        pred_masks = make_dropout_masks(rng, dropout, nb, (B,), model.hidden_dim, dt)

    enc_res = stack_forward(model.encoder, _steps(prefix), masks=enc_masks,
                            use_peepholes=model.use_peepholes)
    dec_out, dec_res = _rollout(model, model.decoder, model.dec_proj,
                                enc_res.final_states, P, masks=dec_masks)
    pred_out, pred_res = _rollout(model, model.predictor, model.pred_proj,
                                  enc_res.final_states, spec.n, masks=pred_masks)
    recon_nat = dec_out[::-1] if model.reverse_recon else dec_out

    dr = recon_nat - prefix
    dp = pred_out - future
    per_sample = (dr * dr).sum(axis=(0, 2)) + (dp * dp).sum(axis=(0, 2))
    per_sample = per_sample / np.asarray(spec.L * spec.frame_dim, dtype=model.dtype)

    out = ModelOutput(recon_tm=recon_nat, pred_tm=pred_out, enc_res=enc_res,
                      dec_res=dec_res, pred_res=pred_res, batched=batched,
                      per_sample_loss=per_sample)
    if batched:
        return per_sample, out
    return float(per_sample[0]), out


def model_backward(model: Seq2SeqModel, frames: np.ndarray, output: ModelOutput,
                   want_dx: bool = False):
    """Exact gradients of the summed sequence loss over the given samples.

    ``frames`` and ``output`` must come from the same ``sequence_loss`` call
    (possibly sliced with ``ModelOutput.take``).  Returns ``ModelGrads``; with
    ``want_dx`` also the per-step gradient on the input prefix.
    """
    spec = model.spec
    tm, _ = _lift(np.asarray(frames))
    if tm.shape[1] != output.recon_tm.shape[1]:
        raise ValueError(
            f"batch mismatch: frames have {tm.shape[1]} samples, "
            f"output has {output.recon_tm.shape[1]}")
    P = spec.prefix_len
    prefix, future = tm[:P], tm[P:]
    scale = np.asarray(2.0 / (spec.L * spec.frame_dim), dtype=model.dtype)

    dY_rec_nat = (output.recon_tm - prefix) * scale          # [P, B, D]
    dY_pred = (output.pred_tm - future) * scale              # [n, B, D]
    dY_dec = dY_rec_nat[::-1] if model.reverse_recon else dY_rec_nat

    grads = model_zeros_like(model)

    def branch_back(branch, proj, proj_grads, res, dY):
        top = res.h_seqs[-1]
        dh_top = []
        for t in range(dY.shape[0]):
            proj_grads.W += dY[t].T @ top[t]
            proj_grads.b += dY[t].sum(axis=0)
            dh_top.append(dY[t] @ proj.W)
        layer_grads, _, init_grads = stack_backward(
            branch, res, dh_top, use_peepholes=model.use_peepholes)
        return layer_grads, init_grads

    grads.decoder, dec_init = branch_back(model.decoder, model.dec_proj,
                                          grads.dec_proj, output.dec_res, dY_dec)
    grads.predictor, pred_init = branch_back(model.predictor, model.pred_proj,
                                             grads.pred_proj, output.pred_res, dY_pred)

    # Both branches were seeded from the encoder's final states.
    dfinal = [LstmState(h=d.h + p.h, c=d.c + p.c) for d, p in zip(dec_init, pred_init)]
    grads.encoder, dx_seq, _ = stack_backward(
        model.encoder, output.enc_res, None, dfinal=dfinal,
        use_peepholes=model.use_peepholes, want_dx=want_dx)

    if want_dx:
        return grads, dx_seq
    return grads
