import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from igolab import nn
from igolab.exceptions import OddDim, ShapeMismatch, StaleTape
from igolab.nn import (Adam, Dense, MlpSpec, Param, backward, forward, init_mlp, load_params,
                       save_params, sinusoidal_embed)


def fd_grads(params, f, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of every param."""
    out = []
    for p in params:
        g = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + h
            up = f()
            p.value[idx] = orig - h
            down = f()
            p.value[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_error(a, b, floor=1e-8):
    a, b = np.ravel(a), np.ravel(b)
    scale = np.maximum(np.abs(a), np.abs(b))
    small = scale < floor
    err = np.where(small, np.abs(a - b), np.abs(a - b) / np.where(small, 1.0, scale))
    return float(err.max())


def random_case(rng):
    widths = list(rng.integers(1, 6, size=rng.integers(2, 5)))
    spec = MlpSpec(widths, activation=str(rng.choice(["tanh", "relu", "silu"])),
                   time_embed_dim=int(rng.choice([2, 4, 6])))
    params = init_mlp(spec, rng)
    for p in params:
        p.value[...] = rng.standard_normal(p.shape)
    x = rng.standard_normal((int(rng.integers(1, 4)), widths[0]))
    t = rng.uniform(0, 1, size=len(x))
    return spec, params, x, t


def check_gradients(seed):
    rng = np.random.default_rng(seed)
    spec, params, x, t = random_case(rng)
    out, tape = forward(params, spec, x, t)
    g = rng.standard_normal(out.shape)
    nn.zero_grads(params)
    backward(tape, g)
    analytic = [p.grad.copy() for p in params]
    numeric = fd_grads(params, lambda: float(np.sum(forward(params, spec, x, t)[0] * g)))
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))


def test_identity_network():
    spec = MlpSpec([2, 2], time_embed_dim=4)
    W = Param("w", np.vstack([np.eye(2), np.zeros((4, 2))]))
    b = Param("b", np.zeros(2))
    out, _ = forward([W, b], spec, np.array([1.0, 2.0]), 0.7)
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_wrong_width_raises_shape_mismatch():
    spec = MlpSpec([3, 4, 2])
    params = init_mlp(spec, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch) as err:
        forward(params, spec, np.ones(5), 0.1)
    assert "3" in str(err.value) and "5" in str(err.value)


def test_zero_weights_give_constant_output():
    spec = MlpSpec([3, 4, 2])
    params = init_mlp(spec, np.random.default_rng(0))
    for p in params:
        p.value[...] = 0.0
    params[-1].value[...] = [0.5, -1.5]
    for x in (np.zeros(3), np.array([5.0, -2.0, 1.0])):
        np.testing.assert_array_equal(forward(params, spec, x, 0.4)[0], [0.5, -1.5])


def test_linear_derivative():
    layer = Dense(Param("w", [[0.0]]), Param("b", [0.0]))
    layer.weight.value[...] = 2.0
    out, tape = nn.run_layers([layer], np.array([3.0]))
    backward(tape, np.array([1.0]))
    assert layer.weight.grad[0, 0] == 3.0


def test_tanh_derivative_at_zero():
    # f(w) = tanh(w * 1)
    layer = Dense(Param("w", [[0.0]]), Param("b", [0.0]), activation="tanh")
    out, tape = nn.run_layers([layer], np.array([1.0]))
    backward(tape, np.array([1.0]))
    assert layer.weight.grad[0, 0] == 1.0


def test_backward_twice_doubles_accumulation():
    rng = np.random.default_rng(3)
    spec, params, x, t = random_case(rng)
    out, tape = forward(params, spec, x, t)
    g = rng.standard_normal(out.shape)
    backward(tape, g)
    once = [p.grad.copy() for p in params]
    backward(tape, g)
    for p, o in zip(params, once):
        np.testing.assert_allclose(p.grad, 2 * o, rtol=1e-14, atol=1e-14)


def test_random_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(11)
    spec = MlpSpec([2, 2, 1], activation="silu", time_embed_dim=2)
    params = init_mlp(spec, rng)  # 4*2+2 + 4*1+1 = 15 entries
    x, t = rng.standard_normal(2), 0.3
    out, tape = forward(params, spec, x, t)
    backward(tape, np.ones_like(out))
    numeric = fd_grads(params, lambda: float(forward(params, spec, x, t)[0].sum()))
    assert max(max_rel_error(p.grad, n) for p, n in zip(params, numeric)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_gradient_fidelity(seed):
    assert check_gradients(seed) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_accumulation_is_linear(seed):
    rng = np.random.default_rng(seed)
    spec, params, x, t = random_case(rng)
    out, tape = forward(params, spec, x, t)
    g1, g2 = rng.standard_normal(out.shape), rng.standard_normal(out.shape)
    nn.zero_grads(params)
    backward(tape, g1)
    backward(tape, g2)
    split = [p.grad.copy() for p in params]
    nn.zero_grads(params)
    backward(tape, g1 + g2)
    for p, s in zip(params, split):
        np.testing.assert_allclose(p.grad, s, rtol=0, atol=1e-12)


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    spec, params, x, t = random_case(rng)
    out, tape = forward(params, spec, x, t)
    g = rng.standard_normal(out.shape)
    gx = backward(tape, g, accumulate=False)
    assert all(not p.grad.any() for p in params)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (np.sum(forward(params, spec, xp, t)[0] * g)
                    - np.sum(forward(params, spec, xm, t)[0] * g)) / (2 * h)
    np.testing.assert_allclose(gx, num, rtol=1e-6, atol=1e-8)


def test_stale_tape_detected():
    spec = MlpSpec([2, 3, 1])
    params = init_mlp(spec, np.random.default_rng(0))
    out, tape = forward(params, spec, np.ones(2), 0.2)
    params[0].assign(params[0].value * 2)
    with pytest.raises(StaleTape):
        backward(tape, np.ones_like(out))


def test_sinusoidal_embedding():
    np.testing.assert_array_equal(sinusoidal_embed(0.0, 4), [0.0, 1.0, 0.0, 1.0])
    first = sinusoidal_embed(np.pi / 2000, 2)
    np.testing.assert_allclose(first, [1.0, 0.0], atol=1e-12)
    with pytest.raises(OddDim):
        sinusoidal_embed(0.1, 3)
    batch = sinusoidal_embed(np.array([0.0, 0.5]), 6)
    assert batch.shape == (2, 6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.sampled_from([2, 4, 8, 16, 32]))
def test_embedding_range(t, dim):
    e = sinusoidal_embed(t, dim)
    assert np.all(np.abs(e) <= 1.0)


def test_adam_zero_grad_leaves_values():
    p = Param("p", [1.0, -2.0])
    opt = Adam([p], lr=0.1)
    opt.step()
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_first_step():
    p = Param("p", [0.0])
    p.grad[...] = 1.0
    opt = Adam([p], lr=1e-3)
    opt.step()
    assert opt.n_steps == 1
    np.testing.assert_allclose(p.value, [-1e-3 / (1 + 1e-8)], rtol=1e-12)
    before = p.value.copy()
    nn.adam_step(opt)
    assert p.value[0] < before[0]


def test_checkpoint_round_trip(tmp_path):
    spec = MlpSpec([3, 5, 2])
    params = init_mlp(spec, np.random.default_rng(1))
    save_params(tmp_path / "c.ckpt", params, meta={"note": "x"})
    loaded, meta = load_params(tmp_path / "c.ckpt")
    assert meta == {"note": "x"}
    assert [p.name for p in loaded] == [p.name for p in params]
    for a, b in zip(params, loaded):
        assert a.value.tobytes() == b.value.tobytes()
    header = (tmp_path / "c.ckpt").read_bytes().split(b"end\n")[0].decode()
    assert "param mlp.0.weight 19x5" in header
