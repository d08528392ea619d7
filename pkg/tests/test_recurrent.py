import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leakylstm import recurrent as rec
from leakylstm.recurrent import (LayerState, LeakConfig, ModelConfig, Variant, blstm_forward,
                                 bptt_backward, cell_forward, count_params, init_params,
                                 leak_to_lifetime, lifetime_to_leak, stack_backward, stack_forward)

VARIANTS = list(Variant)
LEAKS = [0.0, 0.5, 1.0]


def make(variant=Variant.BASIC, a=0.5, in_dim=3, h=4, layers=2, bidirectional=True, seed=0):
    cfg = ModelConfig(input_dim=in_dim, layers=layers, units_per_direction=h,
                      bidirectional=bidirectional, variant=variant, leak=LeakConfig(a=a), output_dim=1)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, projection=False)
    for k in params:  # break the symmetric init so every path carries signal
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    return cfg, params


def standard_lstm_step(p, x, h, c):
    """Textbook LSTM (no leak) written independently of the library."""
    sig = lambda z: 1 / (1 + np.exp(-z))
    f = sig(p["W_f"] @ x + p["R_f"] @ h + p["b_f"])
    i = sig(p["W_i"] @ x + p["R_i"] @ h + p["b_i"])
    o = sig(p["W_o"] @ x + p["R_o"] @ h + p["b_o"])
    j = np.tanh(p["W_j"] @ x + p["R_j"] @ h + p["b_j"])
    c = c * f + j * i
    return np.tanh(c) * o, c


def scalar_direction(p, variant, a, xs):
    """Per-timestep, per-unit scalar loops applying the leaky cell equations."""
    H = len(p[[k for k in p if k.startswith("b_")][0]])
    rec_gates = rec._RECURRENT[variant]
    h = [0.0] * H
    c = [0.0] * H
    outs = []
    for x in xs:
        new_h, new_c = [], []
        for u in range(H):
            acts = {}
            for g in "fioj":
                if g == "f" and a == 0:
                    continue
                z = p[f"b_{g}"][u] + sum(p[f"W_{g}"][u][k] * x[k] for k in range(len(x)))
                if g in rec_gates:
                    z += sum(p[f"R_{g}"][u][k] * h[k] for k in range(H))
                acts[g] = math.tanh(z) if g == "j" else 1 / (1 + math.exp(-z))
            cu = acts["i"] * acts["j"] + (c[u] * acts["f"] * a if a > 0 else 0.0)
            new_c.append(cu)
            new_h.append(math.tanh(cu) * acts["o"])
        h, c = new_h, new_c
        outs.append(h)
    return np.array(outs)


def test_a1_basic_matches_standard_lstm():
    cfg, params = make(Variant.BASIC, a=1.0, layers=1, bidirectional=False)
    p = rec.direction_params(params, 0, "fw")
    rng = np.random.default_rng(1)
    state = LayerState.zeros(4)
    h, c = np.zeros(4), np.zeros(4)
    for _ in range(6):
        x = rng.normal(size=3)
        state, _ = cell_forward(p, Variant.BASIC, 1.0, x, state)
        h, c = standard_lstm_step(p, x, h, c)
        np.testing.assert_allclose(state.h, h, rtol=0, atol=1e-15)
        np.testing.assert_allclose(state.c, c, rtol=0, atol=1e-15)


def test_a1_sequence_path_matches_cell_path():
    cfg, params = make(Variant.BASIC, a=1.0, layers=1, bidirectional=False)
    p = rec.direction_params(params, 0, "fw")
    X = np.random.default_rng(2).normal(size=(9, 1, 3))
    H, _ = rec.direction_forward(p, Variant.BASIC, 1.0, X)
    state = LayerState.zeros(4)
    for t in range(9):
        state, _ = cell_forward(p, Variant.BASIC, 1.0, X[t, 0], state)
        np.testing.assert_allclose(H[t, 0], state.h, atol=1e-15)


@pytest.mark.parametrize("a", [0.25, 0.5, 0.9])
def test_decay_law_with_gate_override(a):
    cfg, params = make(Variant.BASIC, a=a, layers=1, bidirectional=False)
    p = rec.direction_params(params, 0, "fw")
    state = LayerState(np.zeros(4), np.ones(4))
    for T in range(1, 51):
        state, _ = cell_forward(p, Variant.BASIC, a, np.ones(3), state, override={"f": 1.0, "i": 0.0})
        assert np.all(state.c == np.float64(a) ** T) or np.allclose(state.c, a ** T, rtol=1e-14, atol=0)


def test_decay_example_three_steps():
    cfg, params = make(Variant.RED_CUT, a=0.5, layers=1, bidirectional=False)
    p = rec.direction_params(params, 0, "fw")
    state = LayerState(np.zeros(4), np.ones(4))
    for _ in range(3):
        state, _ = cell_forward(p, Variant.RED_CUT, 0.5, np.zeros(3), state, override={"f": 1, "i": 0})
    assert np.all(state.c == 0.125)


def _perturbation_influence(cfg, params, T=8):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(T, 1, cfg.input_dim))
    base, _ = stack_forward(cfg, params, X)
    influence = np.zeros((T, T))
    for tp in range(T):
        Xp = X.copy()
        Xp[tp] += rng.normal(size=cfg.input_dim)
        out, _ = stack_forward(cfg, params, Xp)
        influence[:, tp] = np.abs(out - base)[:, 0].max(axis=1)
    return influence


@pytest.mark.parametrize("bidirectional", [False, True])
def test_blue_cut_a0_is_memoryless(bidirectional):
    cfg, params = make(Variant.BLUE_CUT, a=0.0, bidirectional=bidirectional)
    inf = _perturbation_influence(cfg, params)
    off = inf[~np.eye(len(inf), dtype=bool)]
    assert np.all(off == 0.0)
    assert np.all(np.diag(inf) > 0)


@pytest.mark.parametrize("variant,a", [(Variant.BLUE_CUT, 0.5), (Variant.RED_CUT, 0.0),
                                       (Variant.BASIC, 0.0)])
def test_other_settings_carry_memory(variant, a):
    cfg, params = make(variant, a=a, bidirectional=False)
    inf = _perturbation_influence(cfg, params)
    assert inf[5, 2] > 0


def test_red_cut_input_and_candidate_ignore_previous_output():
    cfg, params = make(Variant.RED_CUT, a=0.7, layers=1, bidirectional=False)
    p = rec.direction_params(params, 0, "fw")
    x = np.random.default_rng(0).normal(size=3)
    s1 = LayerState(np.random.default_rng(1).normal(size=4), np.zeros(4))
    s2 = LayerState(np.random.default_rng(2).normal(size=4), np.zeros(4))
    _, c1 = cell_forward(p, Variant.RED_CUT, 0.7, x, s1)
    _, c2 = cell_forward(p, Variant.RED_CUT, 0.7, x, s2)
    assert np.array_equal(c1["i"], c2["i"]) and np.array_equal(c1["j"], c2["j"])
    assert not np.array_equal(c1["f"], c2["f"])


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("a", LEAKS)
def test_stack_matches_scalar_oracle(variant, a):
    cfg, params = make(variant, a=a, in_dim=3, h=3, layers=2, bidirectional=True, seed=7)
    X = np.random.default_rng(8).normal(size=(5, 3))
    out, _ = blstm_forward(cfg, params, X)
    inp = X
    for layer in range(2):
        fw = scalar_direction(rec.direction_params(params, layer, "fw"), variant, a, inp)
        bw = scalar_direction(rec.direction_params(params, layer, "bw"), variant, a, inp[::-1])[::-1]
        inp = np.hstack([fw, bw])
    np.testing.assert_allclose(out, inp, rtol=1e-12, atol=1e-12)


def test_single_frame_directions_agree_and_reversal_symmetry():
    cfg, params = make(Variant.BASIC, a=0.8, layers=1)
    x1 = np.random.default_rng(0).normal(size=(1, 3))
    o1, _ = blstm_forward(cfg, params, x1)
    o2, _ = blstm_forward(cfg, params, x1)
    assert np.array_equal(o1, o2)
    swapped = dict(params)
    for k in params:
        if ".fw." in k:
            swapped[k.replace(".fw.", ".bw.")] = params[k]
            swapped[k.replace(".fw.", ".fw.")] = params[k.replace(".fw.", ".bw.")]
    X = np.random.default_rng(1).normal(size=(6, 3))
    out, _ = blstm_forward(cfg, params, X)
    rev, _ = blstm_forward(cfg, swapped, X[::-1])
    np.testing.assert_allclose(rev[::-1, :4], out[:, 4:], atol=1e-15)
    np.testing.assert_allclose(rev[::-1, 4:], out[:, :4], atol=1e-15)


def test_padding_does_not_change_valid_outputs():
    cfg, params = make(Variant.BASIC, a=0.6)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    alone, _ = blstm_forward(cfg, params, x)
    X = np.zeros((9, 2, 3))
    X[:5, 0] = x
    X[:, 1] = rng.normal(size=(9, 3))
    out, _ = stack_forward(cfg, params, X, lengths=np.array([5, 9]))
    np.testing.assert_allclose(out[:5, 0], alone, atol=1e-14)


def test_empty_sequence_rejected():
    cfg, params = make()
    with pytest.raises(ValueError):
        blstm_forward(cfg, params, np.zeros((0, 3)))


def finite_difference_check(variant, a, seed, T=7, H=4):
    cfg, params = make(variant, a=a, in_dim=3, h=H, layers=2, bidirectional=True, seed=seed)
    rng = np.random.default_rng(100 + seed)
    X = rng.normal(size=(T, 3))
    G = rng.normal(size=(T, 2 * H))

    def loss(p):
        return float(np.sum(blstm_forward(cfg, p, X)[0] * G))

    _, cache = blstm_forward(cfg, params, X)
    grads, dX = bptt_backward(cfg, params, cache, G)
    assert set(grads) == set(params)
    worst = 0.0
    step = 1e-5
    for k, p in params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            lp = loss(params)
            p[idx] = old - step
            lm = loss(params)
            p[idx] = old
            num = (lp - lm) / (2 * step)
            err = abs(num - grads[k][idx]) / max(abs(num), abs(grads[k][idx]), 1e-6)
            worst = max(worst, err)
    for idx in np.ndindex(X.shape):
        old = X[idx]
        X[idx] = old + step
        lp = loss(params)
        X[idx] = old - step
        lm = loss(params)
        X[idx] = old
        num = (lp - lm) / (2 * step)
        worst = max(worst, abs(num - dX[idx]) / max(abs(num), abs(dX[idx]), 1e-6))
    return worst


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("a", LEAKS)
def test_bptt_matches_finite_differences(variant, a):
    assert finite_difference_check(variant, a, seed=0) < 1e-4


def test_zero_upstream_gradient_gives_zero_grads():
    cfg, params = make(Variant.BASIC, a=0.5)
    X = np.random.default_rng(0).normal(size=(5, 3))
    _, cache = blstm_forward(cfg, params, X)
    grads, dX = bptt_backward(cfg, params, cache, np.zeros((5, 8)))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dX == 0)


def test_a0_cuts_cell_state_gradient():
    cfg, params = make(Variant.BASIC, a=0.0, layers=1, bidirectional=False)
    p = rec.direction_params(params, 0, "fw")
    X = np.random.default_rng(0).normal(size=(4, 1, 3))
    H, cache = rec.direction_forward(p, Variant.BASIC, 0.0, X)
    # gradient only at the last step, with the h -> R path removed by zeroing R
    p0 = {k: (np.zeros_like(v) if k.startswith("R_") else v) for k, v in p.items()}
    H0, cache0 = rec.direction_forward(p0, Variant.BASIC, 0.0, X)
    dH = np.zeros_like(H0)
    dH[-1] = 1.0
    _, dX = rec.direction_backward(p0, cache0, dH)
    assert np.all(dX[:-1] == 0)
    assert "f" not in cache.acts


def test_gradient_shape_mismatch():
    cfg, params = make()
    _, cache = blstm_forward(cfg, params, np.zeros((5, 3)))
    with pytest.raises(ValueError):
        bptt_backward(cfg, params, cache, np.zeros((4, 8)))


def test_count_params_tiny_cell():
    cfg = ModelConfig(input_dim=2, layers=1, units_per_direction=3, bidirectional=False,
                      variant=Variant.BASIC, leak=LeakConfig(a=0.5), output_dim=1)
    assert count_params(cfg, projection=False) == 72
    params = init_params(cfg, np.random.default_rng(0), projection=False)
    assert sum(p.size for p in params.values()) == 72


@pytest.mark.parametrize("layers,h,bidir", [(1, 3, False), (2, 5, True), (3, 4, True)])
def test_count_param_deltas_closed_form(layers, h, bidir):
    dirs = 2 if bidir else 1

    def n(v, a):
        return count_params(ModelConfig(input_dim=7, layers=layers, units_per_direction=h,
                                        bidirectional=bidir, variant=v, leak=LeakConfig(a=a),
                                        output_dim=11))

    assert n(Variant.BASIC, .5) - n(Variant.RED_CUT, .5) == 2 * h * h * dirs * layers
    assert n(Variant.RED_CUT, .5) - n(Variant.BLUE_CUT, .5) == 2 * h * h * dirs * layers


def test_paper_preset_counts():
    counts = {(v, a): count_params(rec.paper_preset(v, a)) for v in Variant for a in (0.5, 0.0)}
    assert counts[(Variant.BASIC, .5)] - counts[(Variant.RED_CUT, .5)] == 2_880_000
    assert counts[(Variant.RED_CUT, .5)] - counts[(Variant.BLUE_CUT, .5)] == 2_880_000
    assert counts[(Variant.BASIC, .5)] - counts[(Variant.BASIC, 0.0)] == 3_037_200
    assert counts[(Variant.RED_CUT, .5)] - counts[(Variant.RED_CUT, 0.0)] == 3_037_200
    assert counts[(Variant.BLUE_CUT, .5)] - counts[(Variant.BLUE_CUT, 0.0)] == 1_597_200


def test_lifetime_conversions():
    assert lifetime_to_leak(0.0, 0.008) == 0.0
    assert lifetime_to_leak(math.inf, 0.008) == 1.0
    assert leak_to_lifetime(1.0, 0.008) == math.inf
    assert leak_to_lifetime(0.0, 0.008) == 0.0
    a = lifetime_to_leak(0.008, 0.008)
    assert a == pytest.approx(math.exp(-1))
    assert 1 - a == pytest.approx(0.632, abs=1e-3)
    assert lifetime_to_leak(0.1, 0.008) == pytest.approx(0.9231163, rel=1e-7)


@given(st.floats(1e-4, 1e3))
def test_lifetime_round_trip(tau):
    assert leak_to_lifetime(lifetime_to_leak(tau, 0.008), 0.008) == pytest.approx(tau, rel=1e-9)


def test_leak_config_validation():
    with pytest.raises(ValueError):
        LeakConfig(a=1.5)


def test_non_finite_activation_raises():
    cfg, params = make(Variant.BASIC, a=1.0, layers=1, bidirectional=False)
    p = rec.direction_params(params, 0, "fw")
    with pytest.raises(rec.DivergenceError):
        cell_forward(p, Variant.BASIC, 1.0, np.array([np.nan, 0, 0]), LayerState.zeros(4))


def test_checkpoint_round_trip(tmp_path):
    cfg, params = make(Variant.RED_CUT, a=0.3)
    rec.save_checkpoint(tmp_path / "m.npz", {"kind": "test", "model": cfg.to_dict()}, params)
    meta, loaded = rec.load_checkpoint(tmp_path / "m.npz")
    assert meta["format_version"] == rec.CHECKPOINT_VERSION
    assert rec.model_config_from_dict(meta["model"]) == cfg
    assert all(np.array_equal(loaded[k], params[k]) for k in params)


def test_forget_bias_initialized_to_one():
    cfg = ModelConfig(input_dim=3, layers=1, units_per_direction=4, leak=LeakConfig(a=0.5), output_dim=2)
    p = init_params(cfg, np.random.default_rng(0))
    assert np.all(p["l0.fw.b_f"] == 1.0) and np.all(p["l0.fw.b_i"] == 0.0)
    assert np.all(np.abs(p["l0.fw.W_i"]) <= 1 / math.sqrt(3))
