"""LSTM cell with peephole connections, stacked layers, and exact BPTT.

The cell follows the five-line gate recurrence with elementwise (diagonal)
peephole terms; the output gate reads the freshly updated cell state.  All
forward functions accept either a single step vector ``[dim]`` or a batch
``[batch, dim]``; caches keep whatever shape the forward saw, and the
backward pass consumes them unchanged.

Dropout is applied only on non-recurrent connections: the hidden sequence a
layer hands to the layer above is masked, the h->h and c->c paths never are.
Masks are drawn once per sequence and held fixed across time steps, with
inverted scaling so evaluation mode is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import Rng, sigmoid, uniform_init, uniform_init_vector


@dataclass
class LstmLayerParams:
    """All weights of one layer; input-to-hidden W_x* are [hidden x input],
    recurrent W_h* are [hidden x hidden], peepholes and biases are [hidden]."""

    input_dim: int
    hidden_dim: int
    W_xi: np.ndarray
    W_hi: np.ndarray
    W_xf: np.ndarray
    W_hf: np.ndarray
    W_xc: np.ndarray
    W_hc: np.ndarray
    W_xo: np.ndarray
    W_ho: np.ndarray
    W_ci: np.ndarray
    W_cf: np.ndarray
    W_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray


# Canonical traversal order; updates, clipping and persistence all rely on it.
LAYER_FIELDS = (
    "W_xi", "W_hi", "W_xf", "W_hf", "W_xc", "W_hc", "W_xo", "W_ho",
    "W_ci", "W_cf", "W_co", "b_i", "b_f", "b_c", "b_o",
)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class StepCache:
    """Forward intermediates one backward step needs; g_t is the tanh
    pre-cell activation."""

    x_t: Optional[np.ndarray]  # None when the step input is identically zero
    h_prev: np.ndarray
    c_prev: np.ndarray
    i_t: np.ndarray
    f_t: np.ndarray
    o_t: np.ndarray
    g_t: np.ndarray
    c_t: np.ndarray
    h_t: np.ndarray
    tc_t: np.ndarray  # tanh(c_t), reused by backward


@dataclass
class DropoutSpec:
    rate: float = 0.0
    train: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    @property
    def active(self) -> bool:
        return self.train and self.rate > 0.0


def init_lstm_layer(rng: Rng, input_dim: int, hidden_dim: int, scale: float = 0.08,
                    forget_bias: float = 1.0, dtype=np.float32) -> LstmLayerParams:
    """Uniform init in [-scale, scale]; forget-gate bias shifted by +forget_bias."""
    H, I = hidden_dim, input_dim
    b_f = uniform_init_vector(rng.split(13), H, scale, dtype)
    b_f = b_f + np.asarray(forget_bias, dtype=dtype) if forget_bias else b_f
    return LstmLayerParams(
        input_dim=I, hidden_dim=H,
        W_xi=uniform_init(rng.split(0), H, I, scale, dtype),
        W_hi=uniform_init(rng.split(1), H, H, scale, dtype),
        W_xf=uniform_init(rng.split(2), H, I, scale, dtype),
        W_hf=uniform_init(rng.split(3), H, H, scale, dtype),
        W_xc=uniform_init(rng.split(4), H, I, scale, dtype),
        W_hc=uniform_init(rng.split(5), H, H, scale, dtype),
        W_xo=uniform_init(rng.split(6), H, I, scale, dtype),
        W_ho=uniform_init(rng.split(7), H, H, scale, dtype),
        W_ci=uniform_init_vector(rng.split(8), H, scale, dtype),
        W_cf=uniform_init_vector(rng.split(9), H, scale, dtype),
        W_co=uniform_init_vector(rng.split(10), H, scale, dtype),
        b_i=uniform_init_vector(rng.split(11), H, scale, dtype),
        b_f=b_f.astype(dtype),
        b_c=uniform_init_vector(rng.split(14), H, scale, dtype),
        b_o=uniform_init_vector(rng.split(15), H, scale, dtype),
    )


def zeros_like_layer(layer: LstmLayerParams) -> LstmLayerParams:
    return LstmLayerParams(
        input_dim=layer.input_dim, hidden_dim=layer.hidden_dim,
        **{f: np.zeros_like(getattr(layer, f)) for f in LAYER_FIELDS},
    )


def zero_state(hidden_dim: int, batch: Optional[int] = None, dtype=np.float32) -> LstmState:
    shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
    return LstmState(h=np.zeros(shape, dtype=dtype), c=np.zeros(shape, dtype=dtype))


def cell_forward(params: LstmLayerParams, state: LstmState, x: Optional[np.ndarray],
                 use_peepholes: bool = True) -> tuple[LstmState, StepCache]:
    """One gate-recurrence step.

    ``x`` may be None for an unconditioned step (identically-zero input); the
    input projections then drop out of the sums, which equals feeding zeros
    bit-exactly.
    """
    h_prev, c_prev = state.h, state.c
    if x is not None and x.shape[-1] != params.input_dim:
        raise ValueError(
            f"cell_forward input dim {x.shape[-1]} != layer input_dim {params.input_dim}")
    if h_prev.shape[-1] != params.hidden_dim:
        raise ValueError(
            f"cell_forward state dim {h_prev.shape[-1]} != hidden_dim {params.hidden_dim}")

    a_i = h_prev @ params.W_hi.T + params.b_i
    a_f = h_prev @ params.W_hf.T + params.b_f
    a_g = h_prev @ params.W_hc.T + params.b_c
    a_o = h_prev @ params.W_ho.T + params.b_o
    if x is not None:
        a_i = a_i + x @ params.W_xi.T
        a_f = a_f + x @ params.W_xf.T
        a_g = a_g + x @ params.W_xc.T
        a_o = a_o + x @ params.W_xo.T
    if use_peepholes:
        a_i = a_i + params.W_ci * c_prev
        a_f = a_f + params.W_cf * c_prev

    i_t = sigmoid(a_i)
    f_t = sigmoid(a_f)
    g_t = np.tanh(a_g)
    c_t = f_t * c_prev + i_t * g_t
    if use_peepholes:
        a_o = a_o + params.W_co * c_t  # output gate reads the new cell state
    o_t = sigmoid(a_o)
    tc_t = np.tanh(c_t)
    h_t = o_t * tc_t

    cache = StepCache(x_t=x, h_prev=h_prev, c_prev=c_prev, i_t=i_t, f_t=f_t,
                      o_t=o_t, g_t=g_t, c_t=c_t, h_t=h_t, tc_t=tc_t)
    return LstmState(h=h_t, c=c_t), cache


def _weight_grad(da: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.outer(da, v) if da.ndim == 1 else da.T @ v


def _reduce(da: np.ndarray) -> np.ndarray:
    return da if da.ndim == 1 else da.sum(axis=0)


def cell_backward(params: LstmLayerParams, cache: StepCache, dh: np.ndarray,
                  dc: np.ndarray, use_peepholes: bool = True,
                  grads: Optional[LstmLayerParams] = None,
                  ) -> tuple[LstmLayerParams, Optional[np.ndarray], LstmState]:
    """Exact gradients of one forward step.

    ``dh``/``dc`` are the upstream gradients on h_t and c_t.  Parameter
    gradients are accumulated into ``grads`` when given (fresh zeros
    otherwise); returns (grads, dx, d(state_prev)).  ``dx`` is None for an
    unconditioned step.
    """
    if dh.shape != cache.h_t.shape:
        raise ValueError(f"cell_backward dh shape {dh.shape} != h shape {cache.h_t.shape}")
    if grads is None:
        grads = zeros_like_layer(params)

    i_t, f_t, o_t, g_t = cache.i_t, cache.f_t, cache.o_t, cache.g_t
    c_prev, tc_t = cache.c_prev, cache.tc_t

    da_o = (dh * tc_t) * (o_t * (1.0 - o_t))
    dc_tot = dc + dh * o_t * (1.0 - tc_t * tc_t)
    if use_peepholes:
        dc_tot = dc_tot + da_o * params.W_co

    da_i = (dc_tot * g_t) * (i_t * (1.0 - i_t))
    da_f = (dc_tot * c_prev) * (f_t * (1.0 - f_t))
    da_g = (dc_tot * i_t) * (1.0 - g_t * g_t)
    dc_prev = dc_tot * f_t
    if use_peepholes:
        dc_prev = dc_prev + da_i * params.W_ci + da_f * params.W_cf
        grads.W_ci += _reduce(da_i * c_prev)
        grads.W_cf += _reduce(da_f * c_prev)
        grads.W_co += _reduce(da_o * cache.c_t)

    grads.b_i += _reduce(da_i)
    grads.b_f += _reduce(da_f)
    grads.b_c += _reduce(da_g)
    grads.b_o += _reduce(da_o)
    grads.W_hi += _weight_grad(da_i, cache.h_prev)
    grads.W_hf += _weight_grad(da_f, cache.h_prev)
    grads.W_hc += _weight_grad(da_g, cache.h_prev)
    grads.W_ho += _weight_grad(da_o, cache.h_prev)

    dh_prev = da_i @ params.W_hi + da_f @ params.W_hf + da_g @ params.W_hc \
        + da_o @ params.W_ho

    dx = None
    if cache.x_t is not None:
        grads.W_xi += _weight_grad(da_i, cache.x_t)
        grads.W_xf += _weight_grad(da_f, cache.x_t)
        grads.W_xc += _weight_grad(da_g, cache.x_t)
        grads.W_xo += _weight_grad(da_o, cache.x_t)
        dx = da_i @ params.W_xi + da_f @ params.W_xf + da_g @ params.W_xc \
            + da_o @ params.W_xo

    return grads, dx, LstmState(h=dh_prev, c=dc_prev)


def make_dropout_masks(rng: Rng, spec: DropoutSpec, n_boundaries: int,
                       lead_shape: tuple, hidden_dim: int, dtype=np.float32,
                       ) -> Optional[list[np.ndarray]]:
    """Inverted-scale masks for the inter-layer boundaries of one stack.

    One mask per boundary, one row per sequence, constant across time.
    Returns None when dropout is inactive (eval mode or rate 0).
    """
    if not spec.active or n_boundaries == 0:
        return None
    keep = 1.0 - spec.rate
    masks = []
    for _ in range(n_boundaries):
        m = (rng.random(lead_shape + (hidden_dim,)) < keep).astype(dtype)
        masks.append(m / np.asarray(keep, dtype=dtype))
    return masks


@dataclass
class StackResult:
    """Per-layer hidden sequences, final states, and the caches backward needs."""

    h_seqs: list[list[np.ndarray]]       # [layer][t] -> h_t
    final_states: list[LstmState]        # [layer]
    caches: list[list[StepCache]]        # [layer][t]
    masks: Optional[list[np.ndarray]]    # inter-layer masks actually applied


def stack_forward(layers: list[LstmLayerParams], inputs, n_steps: Optional[int] = None,
                  init_states: Optional[list[LstmState]] = None,
                  masks: Optional[list[np.ndarray]] = None,
                  use_peepholes: bool = True) -> StackResult:
    """Run a stack of layers over a sequence.

    ``inputs`` is a sequence of step inputs (each ``[dim]`` or ``[batch, dim]``)
    or None for an unconditioned run of ``n_steps`` zero-input steps.  Layer
    l >= 1 consumes the masked hidden sequence of layer l-1; recurrent paths
    are never masked.  Initial states default to zero.
    """
    if inputs is None:
        if n_steps is None:
            raise ValueError("stack_forward needs inputs or n_steps")
        steps = n_steps
        lead = None
    else:
        steps = len(inputs)
        lead = inputs[0].shape[:-1]
    if masks is not None and len(masks) != len(layers) - 1:
        raise ValueError(f"expected {len(layers) - 1} masks, got {len(masks)}")
    for l in range(1, len(layers)):
        if layers[l].input_dim != layers[l - 1].hidden_dim:
            raise ValueError(
                f"layer {l} input_dim {layers[l].input_dim} != "
                f"layer {l - 1} hidden_dim {layers[l - 1].hidden_dim}")

    h_seqs: list[list[np.ndarray]] = []
    caches: list[list[StepCache]] = []
    finals: list[LstmState] = []
    layer_inputs = inputs
    for l, layer in enumerate(layers):
        if init_states is not None:
            state = init_states[l]
            if lead is None:
                lead = state.h.shape[:-1]
        else:
            if lead is None:
                raise ValueError("unconditioned stack needs init_states to fix the batch shape")
            shape = lead + (layer.hidden_dim,)
            dt = layer.W_hi.dtype
            state = LstmState(h=np.zeros(shape, dt), c=np.zeros(shape, dt))
        hs, cs = [], []
        for t in range(steps):
            x_t = None if layer_inputs is None else layer_inputs[t]
            state, cache = cell_forward(layer, state, x_t, use_peepholes)
            hs.append(state.h)
            cs.append(cache)
        h_seqs.append(hs)
        caches.append(cs)
        finals.append(state)
        if l + 1 < len(layers):
            if masks is not None:
                m = masks[l]
                layer_inputs = [h * m for h in hs]
            else:
                layer_inputs = hs
    return StackResult(h_seqs=h_seqs, final_states=finals, caches=caches, masks=masks)


def stack_backward(layers: list[LstmLayerParams], result: StackResult,
                   dh_top: Optional[list[np.ndarray]],
                   dfinal: Optional[list[LstmState]] = None,
                   use_peepholes: bool = True, want_dx: bool = False,
                   ) -> tuple[list[LstmLayerParams], Optional[list[np.ndarray]],
                              list[LstmState]]:
    """BPTT through a stack.

    ``dh_top`` holds per-step gradients on the top layer's hidden outputs
    (None for all-zero), ``dfinal`` per-layer gradients on the final (h, c)
    states.  Returns (per-layer parameter grads, per-step input grads or
    None, per-layer initial-state grads).
    """
    n_layers = len(layers)
    steps = len(result.caches[0])
    grads = [zeros_like_layer(layer) for layer in layers]
    init_grads: list[LstmState] = [None] * n_layers  # type: ignore[list-item]

    dh_above = dh_top  # per-step gradient flowing onto the current layer's h
    for l in range(n_layers - 1, -1, -1):
        layer, caches = layers[l], result.caches[l]
        template = caches[0].h_t
        dh_acc = np.zeros_like(template)
        dc_acc = np.zeros_like(template)
        if dfinal is not None and dfinal[l] is not None:
            dh_acc = dh_acc + dfinal[l].h
            dc_acc = dc_acc + dfinal[l].c
        dx_seq: list[Optional[np.ndarray]] = [None] * steps
        for t in range(steps - 1, -1, -1):
            dh_t = dh_acc if dh_above is None else dh_acc + dh_above[t]
            grads[l], dx, dprev = cell_backward(
                layer, caches[t], dh_t, dc_acc, use_peepholes, grads=grads[l])
            dx_seq[t] = dx
            dh_acc, dc_acc = dprev.h, dprev.c
        init_grads[l] = LstmState(h=dh_acc, c=dc_acc)
        if l > 0:
            # Gradient onto layer l-1's hidden sequence, through the mask.
            if result.masks is not None:
                m = result.masks[l - 1]
                dh_above = [d * m for d in dx_seq]  # type: ignore[union-attr]
            else:
                dh_above = dx_seq  # type: ignore[assignment]
        else:
            dh_above = dx_seq if want_dx else None  # type: ignore[assignment]

    dx_out = list(dh_above) if (want_dx and dh_above is not None) else None
    return grads, dx_out, init_grads
