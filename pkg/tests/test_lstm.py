import math

import numpy as np
import pytest
from gradcheck import finite_diff, max_rel_err

from mclseq.lstm import (
    DropoutSpec,
    LAYER_FIELDS,
    LstmState,
    cell_backward,
    cell_forward,
    init_lstm_layer,
    make_dropout_masks,
    stack_backward,
    stack_forward,
    zero_state,
    zeros_like_layer,
)
from mclseq.numerics import Rng


def make_layer(rng, input_dim, hidden_dim, dtype=np.float64, scale=0.3):
    return init_lstm_layer(rng, input_dim, hidden_dim, scale=scale,
                           forget_bias=0.0, dtype=dtype)


def zero_layer(input_dim, hidden_dim, dtype=np.float64):
    layer = make_layer(Rng(0), input_dim, hidden_dim, dtype)
    for f in LAYER_FIELDS:
        getattr(layer, f)[...] = 0.0
    return layer


def scalar_gate_trace(c_prev, h_prev, x, w_cf=0.0):
    """Independent scalar evaluation of the five gate lines for a 1-unit cell
    with all weights zero except an optional forget-gate peephole."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    i = sig(0.0 * x + 0.0 * h_prev + 0.0 * c_prev + 0.0)
    f = sig(0.0 * x + 0.0 * h_prev + w_cf * c_prev + 0.0)
    c = f * c_prev + i * math.tanh(0.0)
    o = sig(0.0 * x + 0.0 * h_prev + 0.0 * c + 0.0)
    h = o * math.tanh(c)
    return i, f, o, c, h


class TestCellForward:
    def test_zero_everything_kills_update(self):
        layer = zero_layer(3, 4)
        state, _ = cell_forward(layer, zero_state(4), np.array([1.0, -2.0, 0.5]))
        assert np.array_equal(state.c, np.zeros(4))
        assert np.array_equal(state.h, np.zeros(4))

    def test_scalar_trace(self):
        layer = zero_layer(1, 1)
        prev = LstmState(h=np.array([0.0]), c=np.array([1.0]))
        state, cache = cell_forward(layer, prev, np.array([0.0]))
        i, f, o, c, h = scalar_gate_trace(c_prev=1.0, h_prev=0.0, x=0.0)
        assert (i, f, o) == (0.5, 0.5, 0.5)
        assert np.allclose([cache.i_t[0], cache.f_t[0], cache.o_t[0]], [i, f, o])
        assert np.allclose(state.c, [c]) and c == 0.5
        assert np.allclose(state.h, [h])
        assert abs(h - 0.5 * math.tanh(0.5)) < 1e-15
        assert abs(h - 0.23105857863000487) < 1e-12

    def test_peephole_reads_previous_cell(self):
        layer = zero_layer(1, 1)
        layer.W_cf[0] = 10.0
        prev = LstmState(h=np.array([0.0]), c=np.array([1.0]))
        state, cache = cell_forward(layer, prev, np.array([0.0]))
        _, f, _, c, _ = scalar_gate_trace(c_prev=1.0, h_prev=0.0, x=0.0, w_cf=10.0)
        assert abs(f - 1.0 / (1.0 + math.exp(-10.0))) < 1e-15
        assert np.allclose(cache.f_t, [f]) and f > 0.9999
        assert np.allclose(state.c, [c])

    def test_peepholes_disabled(self):
        layer = zero_layer(1, 1)
        layer.W_cf[0] = 10.0
        prev = LstmState(h=np.array([0.0]), c=np.array([1.0]))
        state, cache = cell_forward(layer, prev, np.array([0.0]), use_peepholes=False)
        assert np.allclose(cache.f_t, [0.5])
        assert np.allclose(state.c, [0.5])

    def test_shape_mismatch(self):
        layer = zero_layer(3, 4)
        with pytest.raises(ValueError, match="input dim"):
            cell_forward(layer, zero_state(4), np.zeros(5))

    def test_h_strictly_inside_unit_interval(self):
        rng = Rng(21)
        layer = make_layer(rng, 6, 5, scale=2.0)
        state = zero_state(5)
        for t in range(20):
            x = rng.uniform(-3, 3, 6)
            state, _ = cell_forward(layer, state, x)
            assert np.all(np.abs(state.h) < 1.0)

    def test_batched_matches_single(self):
        rng = Rng(8)
        layer = make_layer(rng, 3, 4)
        xs = rng.uniform(-1, 1, (5, 3))
        hs = rng.uniform(-0.5, 0.5, (5, 4))
        cs = rng.uniform(-0.5, 0.5, (5, 4))
        batch_state, _ = cell_forward(layer, LstmState(h=hs, c=cs), xs)
        for b in range(5):
            single, _ = cell_forward(layer, LstmState(h=hs[b], c=cs[b]), xs[b])
            assert np.allclose(batch_state.h[b], single.h, atol=1e-15)
            assert np.allclose(batch_state.c[b], single.c, atol=1e-15)


class TestCellBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = Rng(5)
        layer = make_layer(rng, 3, 4)
        state, cache = cell_forward(layer, zero_state(4), rng.uniform(-1, 1, 3))
        grads, dx, dprev = cell_backward(layer, cache, np.zeros(4), np.zeros(4))
        for f in LAYER_FIELDS:
            assert np.array_equal(getattr(grads, f), np.zeros_like(getattr(grads, f)))
        assert np.array_equal(dx, np.zeros(3))
        assert np.array_equal(dprev.h, np.zeros(4))
        assert np.array_equal(dprev.c, np.zeros(4))

    @pytest.mark.parametrize("use_peep", [True, False])
    def test_single_step_finite_difference(self, use_peep):
        rng = Rng(17)
        layer = make_layer(rng, 4, 3)
        x = rng.uniform(-1, 1, 4)
        h0 = rng.uniform(-0.5, 0.5, 3)
        c0 = rng.uniform(-0.5, 0.5, 3)
        u_h = rng.uniform(-1, 1, 3)
        u_c = rng.uniform(-1, 1, 3)

        def loss():
            st, _ = cell_forward(layer, LstmState(h=h0, c=c0), x, use_peep)
            return float(u_h @ st.h + u_c @ st.c)

        st, cache = cell_forward(layer, LstmState(h=h0, c=c0), x, use_peep)
        grads, dx, dprev = cell_backward(layer, cache, u_h.copy(), u_c.copy(), use_peep)

        arrays = [getattr(layer, f) for f in LAYER_FIELDS] + [x, h0, c0]
        analytic = [getattr(grads, f) for f in LAYER_FIELDS] + [dx, dprev.h, dprev.c]
        numeric = finite_diff(loss, arrays, eps=1e-5)
        assert max_rel_err(analytic, numeric) < 1e-6

    def test_six_step_chain_finite_difference(self):
        rng = Rng(23)
        layer = make_layer(rng, 2, 3)
        xs = rng.uniform(-1, 1, (6, 2))
        us = rng.uniform(-1, 1, (6, 3))

        def forward_all():
            state = zero_state(3, dtype=np.float64)
            caches, hs = [], []
            for t in range(6):
                state, cache = cell_forward(layer, state, xs[t])
                caches.append(cache)
                hs.append(state.h)
            return hs, caches

        def loss():
            hs, _ = forward_all()
            return float(sum(us[t] @ hs[t] for t in range(6)))

        _, caches = forward_all()
        grads = zeros_like_layer(layer)
        dh_next = np.zeros(3)
        dc_next = np.zeros(3)
        for t in range(5, -1, -1):
            grads, _, dprev = cell_backward(layer, caches[t], dh_next + us[t],
                                            dc_next, grads=grads)
            dh_next, dc_next = dprev.h, dprev.c

        arrays = [getattr(layer, f) for f in LAYER_FIELDS]
        analytic = [getattr(grads, f) for f in LAYER_FIELDS]
        numeric = finite_diff(loss, arrays, eps=1e-5)
        assert max_rel_err(analytic, numeric) < 1e-5


class TestStack:
    def test_single_layer_matches_repeated_cell(self):
        rng = Rng(31)
        layer = make_layer(rng, 3, 4)
        xs = [rng.uniform(-1, 1, 3) for _ in range(7)]
        res = stack_forward([layer], xs)
        state = zero_state(4, dtype=np.float64)
        for t, x in enumerate(xs):
            state, _ = cell_forward(layer, state, x)
            assert np.array_equal(res.h_seqs[0][t], state.h)
        assert np.array_equal(res.final_states[0].h, state.h)
        assert np.array_equal(res.final_states[0].c, state.c)

    def test_dimension_chain_mismatch(self):
        rng = Rng(1)
        l0 = make_layer(rng.split(0), 3, 4)
        l1 = make_layer(rng.split(1), 5, 4)  # expects 5, gets 4
        with pytest.raises(ValueError, match="layer 1"):
            stack_forward([l0, l1], [np.zeros(3)])

    def test_near_total_dropout_masks_layer2_input_only(self):
        rng = Rng(41)
        layers = [make_layer(rng.split(0), 3, 4), make_layer(rng.split(1), 4, 4)]
        xs = [rng.split(9).uniform(-1, 1, 3) for _ in range(5)]
        spec = DropoutSpec(rate=0.9999, train=True)
        masks = make_dropout_masks(Rng(7), spec, 1, (), 4, dtype=np.float64)
        res = stack_forward(layers, xs, masks=masks)
        base = stack_forward(layers, xs)
        # layer-1 recurrence untouched by the mask
        for t in range(5):
            assert np.array_equal(res.h_seqs[0][t], base.h_seqs[0][t])
        # layer-2 saw (near-certainly) all-zero inputs
        assert np.array_equal(masks[0], np.zeros_like(masks[0]))
        for cache in res.caches[1]:
            assert np.array_equal(cache.x_t, np.zeros(4))

    def test_dropout_deterministic_given_seed(self):
        rng = Rng(51)
        layers = [make_layer(rng.split(0), 3, 4), make_layer(rng.split(1), 4, 4)]
        xs = [rng.split(9).uniform(-1, 1, 3) for _ in range(5)]
        spec = DropoutSpec(rate=0.5, train=True)
        m1 = make_dropout_masks(Rng(33), spec, 1, (), 4, dtype=np.float64)
        m2 = make_dropout_masks(Rng(33), spec, 1, (), 4, dtype=np.float64)
        r1 = stack_forward(layers, xs, masks=m1)
        r2 = stack_forward(layers, xs, masks=m2)
        for t in range(5):
            assert np.array_equal(r1.h_seqs[1][t], r2.h_seqs[1][t])

    def test_eval_mode_draws_no_masks(self):
        assert make_dropout_masks(Rng(1), DropoutSpec(rate=0.5, train=False),
                                  2, (), 4) is None
        assert make_dropout_masks(Rng(1), DropoutSpec(rate=0.0, train=True),
                                  2, (), 4) is None

    def test_mask_scaling_preserves_expectation(self):
        spec = DropoutSpec(rate=0.25, train=True)
        masks = make_dropout_masks(Rng(3), spec, 1, (10000,), 1, dtype=np.float64)
        assert abs(masks[0].mean() - 1.0) < 0.02
        kept = masks[0][masks[0] > 0]
        assert np.allclose(kept, 1.0 / 0.75)

    def test_dropout_rate_validation(self):
        with pytest.raises(ValueError):
            DropoutSpec(rate=1.0)

    def test_stack_finite_difference_with_init_states(self):
        rng = Rng(61)
        layers = [make_layer(rng.split(0), 2, 3), make_layer(rng.split(1), 3, 3),
                  make_layer(rng.split(2), 3, 3)]
        xs_arr = rng.uniform(-1, 1, (4, 2))
        h0 = rng.uniform(-0.5, 0.5, (3, 3))
        c0 = rng.uniform(-0.5, 0.5, (3, 3))
        us = rng.uniform(-1, 1, (4, 3))

        def init_states():
            return [LstmState(h=h0[l].copy(), c=c0[l].copy()) for l in range(3)]

        def loss():
            res = stack_forward(layers, [xs_arr[t] for t in range(4)],
                                init_states=init_states())
            return float(sum(us[t] @ res.h_seqs[-1][t] for t in range(4)))

        res = stack_forward(layers, [xs_arr[t] for t in range(4)],
                            init_states=init_states())
        grads, dxs, dinit = stack_backward(layers, res, [us[t].copy() for t in range(4)],
                                           want_dx=True)
        arrays, analytic = [], []
        for layer, g in zip(layers, grads):
            arrays += [getattr(layer, f) for f in LAYER_FIELDS]
            analytic += [getattr(g, f) for f in LAYER_FIELDS]
        arrays += [xs_arr, h0, c0]
        analytic += [np.stack(dxs), np.stack([d.h for d in dinit]),
                     np.stack([d.c for d in dinit])]
        numeric = finite_diff(loss, arrays, eps=1e-5)
        assert max_rel_err(analytic, numeric) < 1e-5
