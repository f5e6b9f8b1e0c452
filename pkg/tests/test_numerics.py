import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docmia import numerics as nx
from docmia.numerics import Tensor


def _fd_check(build, params: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences."""
    leaves = {k: Tensor(v.copy(), True) for k, v in params.items()}
    grads = nx.backward(build(leaves), leaves)
    worst = 0.0
    for k, v in params.items():
        fd = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            plus = {n: p.copy() for n, p in params.items()}
            minus = {n: p.copy() for n, p in params.items()}
            plus[k][i] += h
            minus[k][i] -= h
            fp = build({n: Tensor(p) for n, p in plus.items()}).item()
            fm = build({n: Tensor(p) for n, p in minus.items()}).item()
            fd[i] = (fp - fm) / (2 * h)
        scale = max(np.abs(fd).max(), np.abs(grads[k]).max(), 1e-3)
        worst = max(worst, float(np.abs(grads[k] - fd).max() / scale))
    return worst


def test_square_gradient():
    w = Tensor(3.0, True)
    assert nx.backward(w * w, {"w": w})["w"] == pytest.approx(6.0)


def test_constant_has_zero_gradient():
    w = Tensor(3.0, True)
    out = nx.add(nx.mul(w, 0.0), 5.0)
    assert nx.backward(out, {"w": w})["w"] == 0.0


def test_three_layer_network_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    params = {f"W{i}": rng.normal(size=(5, 5)) * 0.5 for i in range(3)}
    params.update({f"b{i}": rng.normal(size=5) * 0.1 for i in range(3)})
    targets = rng.integers(0, 5, size=4)

    def build(P):
        h = Tensor(x)
        for i in range(3):
            h = h @ P[f"W{i}"] + P[f"b{i}"]
            if i < 2:
                h = nx.relu(h)
        return nx.cross_entropy(h, targets, np.ones(4))

    assert _fd_check(build, params) < 1e-4


UNARY = ("relu", "softmax", "logsoftmax", "layer_norm", "matmul", "mul", "add", "transpose2", "reshape")


def _random_graph(seed: int):
    rng = np.random.default_rng(seed)
    rows, d = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    x = rng.normal(size=(rows, d))
    ops = [UNARY[i] for i in rng.integers(0, len(UNARY), size=int(rng.integers(2, 6)))]
    params: dict[str, np.ndarray] = {"x": x}
    for i, op in enumerate(ops):
        if op == "matmul":
            params[f"p{i}"] = rng.normal(size=(d, d)) * 0.7
        elif op in ("mul", "add"):
            params[f"p{i}"] = rng.normal(size=(d,))
        elif op == "layer_norm":
            params[f"g{i}"] = rng.normal(size=(d,))
            params[f"p{i}"] = rng.normal(size=(d,))
    readout = rng.normal(size=(rows, d))
    use_ce = bool(rng.integers(0, 2))
    targets = rng.integers(0, d, size=rows)

    def build(P):
        h = P["x"]
        for i, op in enumerate(ops):
            if op == "relu":
                h = nx.relu(h)
            elif op == "softmax":
                h = nx.softmax(h)
            elif op == "logsoftmax":
                h = nx.log(nx.softmax(h))
            elif op == "layer_norm":
                h = nx.layer_norm(h, P[f"g{i}"], P[f"p{i}"])
            elif op == "matmul":
                h = h @ P[f"p{i}"]
            elif op == "mul":
                h = h * P[f"p{i}"]
            elif op == "add":
                h = h + P[f"p{i}"]
            elif op == "transpose2":
                h = nx.transpose(nx.transpose(h))
            elif op == "reshape":
                h = nx.reshape(nx.reshape(h, (rows * d,)), (rows, d))
        if use_ce:
            return nx.cross_entropy(h, targets, np.ones(rows))
        return nx.total(h * Tensor(readout))

    return build, params


def test_random_graphs_match_finite_differences():
    errors = [_fd_check(*_random_graph(seed)) for seed in range(120)]
    assert max(errors) < 1e-4


def test_per_example_copies_give_per_example_gradients():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3, 2))
    xs = rng.normal(size=(4, 1, 3))
    stacked = Tensor(np.repeat(W[None], 4, axis=0), True)
    out = nx.total(nx.mul(Tensor(xs) @ stacked, Tensor(xs @ W)))
    g = nx.backward(out, {"W": stacked})["W"]
    for i in range(4):
        Wi = Tensor(W, True)
        gi = nx.backward(nx.total(nx.mul(Tensor(xs[i]) @ Wi, Tensor(xs[i] @ W))), {"W": Wi})["W"]
        np.testing.assert_allclose(g[i], gi, rtol=1e-12)


def test_log_of_nonpositive_raises():
    with pytest.raises(nx.NumericError):
        nx.log(Tensor([1.0, 0.0], True))


# ---------------------------------------------------------------------------
# Adam


def _adam_oracle(w, grads, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_first_step_hand_value():
    p = {"w": np.array([1.0])}
    st_ = nx.AdamState(lr=0.1)
    nx.adam_step(p, {"w": 2.0 * p["w"]}, st_)
    assert p["w"][0] == pytest.approx(0.9000, abs=1e-6)
    assert st_.t == 1


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = nx.AdamState(lr=0.1)
    nx.adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert st_.t == 1


def test_adam_two_steps_constant_gradient():
    p = {"w": np.array([1.0])}
    st_ = nx.AdamState(lr=0.1)
    trace = []
    for _ in range(2):
        nx.adam_step(p, {"w": np.array([2.0])}, st_)
        trace.append(p["w"][0])
    assert trace[0] > trace[1]
    assert trace[1] == pytest.approx(_adam_oracle(1.0, [2.0, 2.0]), abs=1e-12)
    assert trace[1] == pytest.approx(0.8000000, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_adam_matches_scalar_oracle(grads):
    p = {"w": np.array([0.3])}
    st_ = nx.AdamState(lr=0.1)
    for g in grads:
        nx.adam_step(p, {"w": np.array([g])}, st_)
    assert p["w"][0] == pytest.approx(_adam_oracle(0.3, grads), abs=1e-9)


def test_adam_active_mask_freezes_slices():
    p = {"w": np.ones((3, 2))}
    st_ = nx.AdamState(lr=0.1)
    nx.adam_step(p, {"w": np.ones((3, 2))}, st_, active=np.array([True, False, True]))
    np.testing.assert_array_equal(p["w"][1], [1.0, 1.0])
    np.testing.assert_allclose(p["w"][[0, 2]], 0.9, atol=1e-6)
    assert np.all(st_.m["w"][1] == 0)


# ---------------------------------------------------------------------------
# initialization, norms, clipping, random streams


def test_kaiming_variance():
    w = nx.kaiming_init(50, (10000,), nx.rng_stream(0, "k"))
    assert abs(w.var() - 0.04) / 0.04 < 0.10


def test_kaiming_deterministic_and_fan_in_two():
    a = nx.kaiming_init(2, (5, 3), nx.rng_stream(3, "k"))
    b = nx.kaiming_init(2, (5, 3), nx.rng_stream(3, "k"))
    np.testing.assert_array_equal(a, b)
    big = nx.kaiming_init(2, (20000,), nx.rng_stream(3, "k"))
    assert big.var() == pytest.approx(1.0, rel=0.05)


def test_l2_norm_cases():
    assert nx.l2_norm(np.zeros(4)) == 0.0
    assert nx.l2_norm(np.array([3.0, 4.0])) == 5.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_l2_norm_of_mapping_is_concatenation(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(3, 2)), rng.normal(size=5)
    assert nx.l2_norm({"a": A, "b": B}) ** 2 == pytest.approx(nx.l2_norm(A) ** 2 + nx.l2_norm(B) ** 2, rel=1e-12)


def test_clip_by_norm_cases():
    g = np.array([6.0, 8.0])
    out = nx.clip_by_norm(g, 1.0)
    assert nx.l2_norm(out) == pytest.approx(1.0)
    np.testing.assert_allclose(out / nx.l2_norm(out), g / 10.0)
    small = np.array([0.3, 0.4])
    np.testing.assert_array_equal(nx.clip_by_norm(small, 1.0), small)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_clip_by_norm_property(seed, scale):
    g = np.random.default_rng(seed).normal(size=7) * scale
    assert nx.l2_norm(nx.clip_by_norm(g, 2.0)) == pytest.approx(min(nx.l2_norm(g), 2.0), abs=1e-12)


def test_rng_streams_are_named_and_reproducible():
    a = nx.rng_stream(1, "x").random(4)
    np.testing.assert_array_equal(a, nx.rng_stream(1, "x").random(4))
    assert not np.array_equal(a, nx.rng_stream(1, "y").random(4))
    assert not np.array_equal(a, nx.rng_stream(2, "x").random(4))
