import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pullsdf import diffcore as dc

# e/(e+1) and 1/(e+1), evaluated with mpmath at 25 digits
SOFTMAX_1_0 = (0.7310585786300048792511592, 0.2689414213699951207488408)


def run(node, **bindings):
    return dc.Evaluation({k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}).value(node)


def grad_of(y, wrt, **bindings):
    return run(dc.gradients(y, [wrt])[0], **bindings)


class TestForward:
    def test_sin_zero(self):
        x = dc.leaf("x")
        assert run(dc.sin(x), x=0.0) == 0.0

    def test_hadamard(self):
        a, b = dc.leaf("a"), dc.leaf("b")
        np.testing.assert_array_equal(run(dc.hadamard(a, b), a=[1.0, 2.0], b=[3.0, 4.0]), [3.0, 8.0])

    def test_softmax2(self):
        p, q = dc.softmax2(dc.const(1.0), dc.const(0.0))
        ev = dc.Evaluation()
        assert ev.value(p) == pytest.approx(SOFTMAX_1_0[0], abs=1e-15)
        assert ev.value(q) == pytest.approx(SOFTMAX_1_0[1], abs=1e-15)

    def test_softmax2_large_inputs_stable(self):
        a, b = dc.leaf("a"), dc.leaf("b")
        p, q = dc.softmax2(a, b)
        ev = dc.Evaluation({"a": np.array([1000.0, -1000.0]), "b": np.array([0.0, 0.0])})
        np.testing.assert_allclose(ev.value(p), [1.0, 0.0])
        np.testing.assert_allclose(ev.value(q), [0.0, 1.0])

    def test_sin_quarter_shifts(self, rng):
        x = dc.leaf("x")
        v = rng.uniform(-5, 5, 50)
        for k in range(-3, 5):
            shift = k * np.pi / 2
            np.testing.assert_allclose(run(dc.sin(x, shift), x=v), np.sin(v + shift), atol=1e-15)

    def test_affine_matches_numpy(self, rng):
        x, w, b = dc.leaf("x"), dc.parameter("w"), dc.parameter("b")
        xv, wv, bv = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
        np.testing.assert_allclose(run(dc.affine(x, w, b), x=xv, w=wv, b=bv), xv @ wv.T + bv)

    def test_norms_and_cosine(self):
        a, b = dc.leaf("a"), dc.leaf("b")
        av, bv = np.array([[3.0, 4.0, 0.0]]), np.array([[0.0, 2.0, 0.0]])
        assert run(dc.euclidean_norm(a), a=av)[0] == pytest.approx(5.0)
        assert run(dc.squared_norm(a), a=av)[0] == pytest.approx(25.0)
        assert run(dc.cosine_similarity(a, b), a=av, b=bv)[0] == pytest.approx(0.8)

    def test_cosine_zero_vector_guarded(self):
        a, b = dc.leaf("a"), dc.leaf("b")
        assert run(dc.cosine_similarity(a, b), a=np.zeros((1, 3)), b=np.ones((1, 3)))[0] == 0.0

    def test_reductions(self):
        x = dc.leaf("x")
        v = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(run(dc.sum(x, axis=0), x=v), v.sum(0))
        np.testing.assert_array_equal(run(dc.mean(x, axis=1, keepdims=True), x=v), v.mean(1, keepdims=True))
        np.testing.assert_array_equal(run(dc.concatenate([x, x], axis=1), x=v), np.hstack([v, v]))

    def test_elementwise(self):
        a, b = dc.leaf("a"), dc.leaf("b")
        av, bv = np.array([-1.0, 2.0, -3.0]), np.array([0.5, 0.5, 0.5])
        np.testing.assert_array_equal(run(dc.relu(a), a=av), [0.0, 2.0, 0.0])
        np.testing.assert_array_equal(run(dc.absolute(a), a=av), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(run(dc.minimum(a, b), a=av, b=bv), [-1.0, 0.5, -3.0])
        np.testing.assert_array_equal(run(dc.power(a, 2), a=av), av**2)


class TestErrors:
    def test_unbound_leaf(self):
        g = dc.ExprGraph({"y": dc.sin(dc.leaf("x"))})
        with pytest.raises(dc.UnboundLeafError):
            dc.evaluate(g, {})

    def test_shape_mismatch_reports_node(self):
        a, b = dc.leaf("a"), dc.leaf("b")
        with pytest.raises(dc.ShapeMismatchError):
            run(dc.hadamard(a, b), a=np.ones(3), b=np.ones(4))

    def test_non_finite_reports_node(self):
        x = dc.leaf("x")
        g = dc.ExprGraph({"y": dc.divide(dc.const(1.0), x)})
        with pytest.raises(dc.NonFiniteError, match="non-finite value produced at <power"):
            dc.evaluate(g, {"x": np.array([0.0])})

    def test_point_gradient_needs_scalar_per_point(self):
        p = dc.points("p")
        g = dc.ExprGraph({"y": p * 2.0})
        with pytest.raises(dc.GraphError):
            dc.point_gradient(g, {"p": np.ones((4, 3))})

    def test_parameter_gradient_needs_scalar(self):
        w = dc.parameter("w")
        g = dc.ExprGraph({"y": w * 2.0})
        with pytest.raises(dc.GraphError):
            dc.parameter_gradient(g, {"w": np.ones(3)})

    def test_probe_rejects_nonpositive_step(self):
        x = dc.leaf("x")
        g = dc.ExprGraph({"y": x * x})
        with pytest.raises(ValueError):
            dc.finite_difference_probe(g, {"x": np.ones(2)}, "x", step=0.0)

    def test_custom_order_must_be_topological(self):
        x = dc.leaf("x")
        y = dc.sin(x) * 2.0
        g = dc.ExprGraph({"y": y})
        with pytest.raises(dc.GraphError):
            dc.evaluate(g, {"x": np.ones(2)}, order=list(reversed(g.order)))


class TestGradients:
    def test_power_rule(self):
        x = dc.leaf("x")
        assert grad_of(x * x, x, x=3.0) == pytest.approx(6.0)

    def test_sin_at_zero(self):
        x = dc.leaf("x")
        assert grad_of(dc.sin(x), x, x=0.0) == pytest.approx(1.0)

    def test_norm_gradient_is_radial(self):
        p = dc.points("p")
        g = dc.ExprGraph({"f": dc.euclidean_norm(p)})
        bundle = dc.point_gradient(g, {"p": np.ones((1, 3))})
        np.testing.assert_allclose(bundle.point_jacobian, np.full((1, 3), 1 / np.sqrt(3)), rtol=1e-15)
        assert bundle.value.shape == (1,)

    def test_point_gradient_accepts_column_output(self):
        p = dc.points("p")
        g = dc.ExprGraph({"f": dc.squared_norm(p, keepdims=True)})
        bundle = dc.point_gradient(g, {"p": np.array([[1.0, 2.0, 3.0]])})
        np.testing.assert_allclose(bundle.point_jacobian, [[2.0, 4.0, 6.0]])

    def test_chain_rule(self):
        w = dc.parameter("w")
        x = dc.leaf("x")
        loss = dc.power(w * x, 2)
        bundle = dc.parameter_gradient(dc.ExprGraph({"loss": loss}), {"w": np.array(2.0), "x": np.array(3.0)})
        assert bundle.parameter_gradients["w"] == pytest.approx(36.0)

    def test_double_backprop(self):
        # loss = (d/dx sin(w x))^2 = (w cos(wx))^2; at w=1, x=0 dloss/dw = 2
        w, x = dc.parameter("w"), dc.leaf("x")
        inner = dc.gradients(dc.sin(w * x), [x])[0]
        loss = dc.power(inner, 2)
        bundle = dc.parameter_gradient(dc.ExprGraph({"loss": loss}), {"w": np.array(1.0), "x": np.array(0.0)})
        assert bundle.parameter_gradients["w"] == pytest.approx(2.0, abs=1e-14)
        # cross-check with central differences
        fd = [
            float(dc.Evaluation({"w": np.array(1.0 + s), "x": np.array(0.0)}).value(loss))
            for s in (1e-5, -1e-5)
        ]
        assert (fd[0] - fd[1]) / 2e-5 == pytest.approx(2.0, abs=1e-8)

    def test_stop_gradient_blocks(self):
        q = dc.parameter("q")
        loss = dc.sum(dc.power(dc.stop_gradient(q), 2))
        bundle = dc.parameter_gradient(dc.ExprGraph({"loss": loss}), {"q": np.array([1.0, -2.0])})
        np.testing.assert_array_equal(bundle.parameter_gradients["q"], [0.0, 0.0])

    def test_stop_gradient_perturbation_changes_value_not_gradient(self, rng):
        w, q = dc.parameter("w"), dc.leaf("q")
        loss = dc.sum(dc.power(w - dc.stop_gradient(q), 2))
        g = dc.ExprGraph({"loss": loss})
        wv = rng.normal(size=3)
        qv = rng.normal(size=3)
        a = dc.parameter_gradient(g, {"w": wv, "q": qv})
        b = dc.parameter_gradient(g, {"w": wv, "q": qv + 0.1})
        assert a.value != b.value
        # gradient w.r.t. w does move (it depends on q's value); gradient w.r.t. q never exists
        assert dc.gradients(loss, [q])[0] is not None
        np.testing.assert_array_equal(run(dc.gradients(loss, [q])[0], w=wv, q=qv), np.zeros(3))

    def test_unreachable_leaf_gets_zero(self):
        x, y = dc.leaf("x"), dc.leaf("y")
        np.testing.assert_array_equal(run(dc.gradients(dc.sum(x * 2.0), [y])[0], x=np.ones(2), y=np.ones(4)), np.zeros(4))

    def test_probe_polynomial(self, rng):
        x = dc.leaf("x")
        g = dc.ExprGraph({"y": x * x * x + 2.0 * x * x})
        assert dc.finite_difference_probe(g, {"x": rng.uniform(0.5, 2, 10)}, "x") <= 1e-7

    def test_probe_constant(self):
        x = dc.leaf("x")
        g = dc.ExprGraph({"y": dc.zeros_like(x) + 3.0})
        assert dc.finite_difference_probe(g, {"x": np.ones(5)}, "x") == 0.0

    def test_probe_sin(self, rng):
        x = dc.leaf("x")
        g = dc.ExprGraph({"y": dc.sin(x)})
        assert dc.finite_difference_probe(g, {"x": rng.uniform(-1.4, 1.4, 50)}, "x") <= 1e-6

    @pytest.mark.parametrize(
        "build",
        [
            lambda p, w: dc.sum(dc.sin(dc.affine(p, w)), axis=-1),
            lambda p, w: dc.euclidean_norm(dc.sin(dc.affine(p, w)) * dc.affine(p, w)),
            lambda p, w: dc.sum(dc.relu(dc.affine(p, w)), axis=-1),
            lambda p, w: dc.cosine_similarity(dc.affine(p, w), dc.sin(dc.affine(p, w))),
            lambda p, w: dc.sum(dc.absolute(dc.affine(p, w)) + dc.minimum(dc.matmul(p, dc.transpose(w)), 0.3), axis=-1),
        ],
    )
    def test_point_gradient_matches_fd(self, build, rng):
        p, w = dc.points("p"), dc.parameter("w")
        f = build(p, w)
        g = dc.ExprGraph({"f": f})
        b = {"p": rng.uniform(-1, 1, (100, 3)), "w": rng.normal(size=(4, 3))}
        jac = dc.point_gradient(g, b).point_jacobian
        fd = np.zeros_like(jac)
        h = 1e-5
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd[:, k] = (run(f, p=b["p"] + e, w=b["w"]) - run(f, p=b["p"] - e, w=b["w"])) / (2 * h)
        assert np.max(np.abs(jac - fd) / (np.abs(jac) + 1e-6)) <= 1e-6

    def test_second_order_through_spatial_gradient(self, rng):
        p, w, v = dc.points("p"), dc.parameter("w"), dc.parameter("v")
        f = dc.affine(dc.sin(dc.affine(p, w)), v)
        gp = dc.spatial_gradient(f, p)
        loss = dc.mean(dc.power(dc.euclidean_norm(gp) - 1.0, 2)) + dc.mean(1.0 - dc.cosine_similarity(gp, p))
        g = dc.ExprGraph({"loss": loss})
        b = {"p": rng.uniform(-1, 1, (20, 3)), "w": rng.normal(size=(6, 3)), "v": rng.normal(size=(1, 6))}
        for name in ("w", "v"):
            assert dc.finite_difference_probe(g, b, name, step=1e-6, eps=1e-8) <= 1e-4


class TestEngine:
    def test_deterministic_across_orders(self, rng):
        x = dc.points("x")
        a = dc.sin(x) * 2.0
        b = dc.absolute(x) + 1.0
        y = dc.sum(a * b + a, axis=-1)
        g = dc.ExprGraph({"y": y})
        bind = {"x": rng.normal(size=(7, 3))}
        order = list(g.order)
        # move an independent branch ahead: b's nodes first where legal
        alt = dc.topological_order([b]) + [n for n in order if n not in dc.topological_order([b])]
        y1 = dc.evaluate(g, bind)["y"]
        y2 = dc.evaluate(g, bind, order=alt)["y"]
        assert y1.tobytes() == y2.tobytes()

    def test_nodes_are_shared(self):
        x = dc.leaf("x")
        assert dc.sin(x) is dc.sin(x)
        assert dc.const(2.0) is dc.const(2.0)

    def test_graph_partitions_leaves(self):
        f = dc.affine(dc.points("p"), dc.parameter("w"))
        g = dc.ExprGraph({"f": f})
        assert set(g.parameters) == {"w"}
        assert set(g.points) == {"p"}

    def test_incremental_binding(self):
        x, t = dc.leaf("x"), dc.leaf("t")
        y = dc.sin(x)
        z = y + t
        ev = dc.Evaluation({"x": np.array(0.5)})
        assert ev.value(y) == pytest.approx(np.sin(0.5))
        ev.bind({"t": np.array(1.0)})
        assert ev.value(z) == pytest.approx(np.sin(0.5) + 1.0)


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(-50, 50, allow_nan=False),
    b=st.floats(-50, 50, allow_nan=False),
)
def test_hadamard_identity_property(a, b):
    x, y = dc.leaf("a"), dc.leaf("b")
    lhs = dc.sin(x) * dc.sin(y)
    rhs = 0.5 * (dc.sin(x + y, -np.pi / 2) + dc.sin(x - y, np.pi / 2))
    ev = dc.Evaluation({"a": np.array(a), "b": np.array(b)})
    assert abs(ev.value(lhs) - ev.value(rhs)) <= 1e-12
