import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgacl import diffcore as dc
from mgacl.errors import ConfigError, NumericError, ShapeError

from oracles import numeric_grad, rel_err


def check_grads(build, inputs, tol=1e-4):
    """``build(*tensors) -> scalar tensor``; compare tape gradients with finite differences."""
    tape = dc.Tape()
    params = [tape.param(x, name=str(i)) for i, x in enumerate(inputs)]
    grads = dc.backward(tape, build(*params))
    for i, x in enumerate(inputs):

        def f(xi, i=i):
            args = [np.array(v) for v in inputs]
            args[i] = xi
            return float(build(*args).data)

        num = numeric_grad(f, x)
        assert rel_err(grads[str(i)], num) < tol, (i, grads[str(i)], num)


class TestForward:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(dc.softmax(np.zeros(3)).data, [1 / 3] * 3)

    def test_dot(self):
        assert dc.dot(np.array([1.0, 2.0]), np.array([3.0, 4.0])).item() == 11.0

    def test_softmax_no_overflow(self):
        s = dc.softmax(np.array([1000.0, 0.0])).data
        # exact value: 1 / (1 + e^-1000) differs from 1 by ~1e-435
        assert abs(s[0] - 1.0) < 1e-12 and abs(s[1]) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            dc.dot(np.ones(2), np.ones(3))
        with pytest.raises(ShapeError):
            dc.add(np.ones((2, 3)), np.ones((4, 3)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_trips(self):
        with pytest.raises(NumericError):
            dc.scale(np.array([1e308]), 10.0)

    def test_log_clamps(self):
        assert dc.log(np.array([0.0])).data[0] == pytest.approx(np.log(1e-12))

    def test_logsumexp_mask(self):
        x = np.array([[1.0, 2.0, 50.0]])
        out = dc.logsumexp(x, mask=np.array([[True, True, False]])).data
        np.testing.assert_allclose(out, [np.log(np.e + np.e**2)])
        with pytest.raises(ShapeError):
            dc.logsumexp(x, mask=np.zeros((1, 3), bool))


class TestBackward:
    def test_quadratic(self):
        tape = dc.Tape()
        x = tape.param([1.0, 2.0], "x")
        grads = dc.backward(tape, dc.dot(x, x))
        np.testing.assert_array_equal(grads["x"], [2.0, 4.0])

    def test_log_sigmoid_matches_fd(self):
        w = np.array([0.3, -0.7, 0.2])
        x = np.array([1.5, 0.4, -2.0])
        check_grads(lambda w: dc.log(dc.sigmoid(dc.dot(w, x))), [w], tol=1e-5)

    def test_unused_param_zero(self):
        tape = dc.Tape()
        a = tape.param([1.0, 2.0], "a")
        b = tape.param([3.0, 4.0], "b")
        grads = dc.backward(tape, dc.l2_norm_sq(a))
        np.testing.assert_array_equal(grads["b"], [0.0, 0.0])

    def test_non_scalar_loss(self):
        tape = dc.Tape()
        a = tape.param([1.0, 2.0], "a")
        with pytest.raises(ShapeError):
            dc.backward(tape, dc.scale(a, 2.0))

    def test_visits_each_node_once(self):
        tape = dc.Tape()
        a = tape.param(np.ones(3), "a")
        out = a
        for _ in range(50):
            out = dc.add(out, dc.scale(a, 0.5))
        loss = dc.sum_(out)
        dc.backward(tape, loss)
        assert tape.backward_visits == len(tape.nodes) == 1 + 50 * 2 + 1

    def test_op_count_linear(self):
        counts = []
        for n in (10, 20, 40):
            tape = dc.Tape()
            a = tape.param(np.ones(2), "a")
            out = a
            for _ in range(n):
                out = dc.elementwise_mul(out, a)
            dc.backward(tape, dc.sum_(out))
            counts.append(tape.backward_visits)
        # one leaf, n products, one sum
        assert counts == [n + 2 for n in (10, 20, 40)]


def _primitive_cases(rng, d):
    """(name, builder, inputs) for every differentiable primitive."""
    n = int(rng.integers(1, 5))
    A = rng.normal(size=(n, d))
    B = rng.normal(size=(n, d))
    v = rng.normal(size=d)
    w = rng.normal(size=n)
    pos = rng.uniform(0.5, 2.0, size=d)
    table = rng.normal(size=(4, d))
    idx = rng.integers(0, 4, size=(n, 2))
    proj = rng.normal(size=(n, d))
    return [
        ("gather_rows", lambda t: dc.sum_(dc.elementwise_mul(dc.gather_rows(t, idx), np.stack([proj, proj], 1))), [table]),
        ("add", lambda a, b: dc.l2_norm_sq(dc.add(a, b)), [A, B]),
        ("add_broadcast", lambda a, b: dc.l2_norm_sq(dc.add(a, b)), [A, v]),
        ("sub", lambda a, b: dc.l2_norm_sq(dc.sub(a, b)), [A, B]),
        ("scale", lambda a: dc.l2_norm_sq(dc.scale(a, -1.7)), [A]),
        ("elementwise_mul", lambda a, b: dc.sum_(dc.elementwise_mul(a, b)), [A, B]),
        ("dot", lambda a, b: dc.l2_norm_sq(dc.dot(a, b)), [A, B]),
        ("matvec", lambda m, x: dc.l2_norm_sq(dc.matvec(m, x)), [A, v]),
        ("pairwise_dot", lambda a, b: dc.l2_norm_sq(dc.pairwise_dot(a, b)), [A, B]),
        ("softmax", lambda x: dc.dot(dc.softmax(x), w), [rng.normal(size=n)]),
        ("weighted_sum", lambda a, b: dc.dot(dc.weighted_sum(a, b), v), [w, A]),
        ("sigmoid", lambda x: dc.dot(dc.sigmoid(x), v), [rng.normal(size=d)]),
        ("log", lambda x: dc.dot(dc.log(x), v), [pos]),
        ("logsumexp", lambda x: dc.sum_(dc.logsumexp(x)), [A]),
        ("l2_norm_sq", lambda x: dc.l2_norm_sq(x), [A]),
        ("mean", lambda x: dc.mean(dc.elementwise_mul(x, B)), [A]),
        ("sum_axis", lambda x: dc.dot(dc.sum_(x, axis=0), v), [A]),
        ("concat", lambda a, b: dc.l2_norm_sq(dc.concat([a, b], axis=0)), [A, B]),
        ("reshape", lambda a: dc.dot(dc.reshape(a, (-1,)), B.reshape(-1)), [A]),
    ]


def test_every_primitive_matches_finite_differences():
    rng = np.random.default_rng(0)
    for trial in range(100):
        d = int(rng.integers(1, 9))
        for name, build, inputs in _primitive_cases(rng, d):
            tape = dc.Tape()
            params = [tape.param(x, name=str(i)) for i, x in enumerate(inputs)]
            grads = dc.backward(tape, build(*params))
            for i, x in enumerate(inputs):

                def f(xi, i=i):
                    args = list(inputs)
                    args[i] = xi
                    return float(build(*args).data)

                assert rel_err(grads[str(i)], numeric_grad(f, x)) < 1e-4, (trial, name, i)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-1e3, 1e3),
)
def test_softmax_normalized_and_shift_invariant(logits, shift):
    x = np.array(logits)
    s = dc.softmax(x).data
    assert abs(s.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(dc.softmax(x + shift).data, s, atol=1e-9, rtol=0)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        store = dc.ParameterStore.init(2, 3, 1, 4, np.random.default_rng(0))
        before = store.copy()
        opt = dc.Adam(lr=0.1)
        opt.step(store, {k: np.zeros_like(v) for k, v in store.items()})
        for (k, a), (_, b) in zip(store.items(), before.items()):
            np.testing.assert_array_equal(a, b)
        assert opt.t == 1 and "user" in opt.m

    def test_first_step_matches_hand_rolled(self):
        # hand-rolled Adam for one scalar with constant gradient 1
        m = v = 0.0
        x = 0.0
        for t in range(1, 4):
            m = 0.9 * m + 0.1 * 1.0
            v = 0.999 * v + 0.001 * 1.0
            x -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            if t == 1:
                first = x
        store = dc.ParameterStore(
            user=np.zeros((1, 1)), entity=np.zeros((1, 1)), relation=np.zeros((1, 1)),
            gcn_w=np.zeros(1), gcn_b=np.zeros(()),
        )
        opt = dc.Adam(lr=0.1)
        opt.step(store, {"gcn_b": np.ones(())})
        assert float(store.gcn_b) == pytest.approx(first, abs=1e-12)
        assert first == pytest.approx(-0.1, rel=1e-6)
        opt.step(store, {"gcn_b": np.ones(())})
        opt.step(store, {"gcn_b": np.ones(())})
        assert float(store.gcn_b) == pytest.approx(x, abs=1e-12)

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            dc.Adam(lr=0.0)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            store = dc.ParameterStore.init(3, 4, 2, 4, rng)
            opt = dc.Adam(lr=0.05)
            for _ in range(5):
                opt.step(store, {k: np.sin(v) for k, v in store.items()})
            return store

        a, b = run(), run()
        for (_, x), (_, y) in zip(a.items(), b.items()):
            assert x.tobytes() == y.tobytes()


class TestParameterStore:
    def test_init_bounds(self):
        store = dc.ParameterStore.init(5, 7, 3, 16, np.random.default_rng(1))
        assert store.relation.shape == (4, 16)
        assert store.click_relation == 3
        for name in ("user", "entity", "relation", "gcn_w"):
            assert np.all(np.abs(getattr(store, name)) <= 0.25)
        assert store.gcn_b == 0.0

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        store = dc.ParameterStore.init(5, 7, 3, 8, np.random.default_rng(2))
        store.gcn_b = np.array(np.pi / 7)
        path = tmp_path / "ckpt.npz"
        dc.save_checkpoint(path, store, {"dim": 8})
        loaded, meta = dc.load_checkpoint(path)
        assert meta == {"dim": 8}
        for (_, a), (_, b) in zip(store.items(), loaded.items()):
            assert a.tobytes() == b.tobytes() and a.shape == b.shape

    def test_json_roundtrip(self):
        store = dc.ParameterStore.init(2, 3, 1, 4, np.random.default_rng(3))
        back = dc.store_from_json(dc.store_to_json(store))
        for (_, a), (_, b) in zip(store.items(), back.items()):
            np.testing.assert_array_equal(a, b)
