import math

import numpy as np
import pytest

from fpverify.bounds import (BoundTensor, FpModel, co_execute, gamma, gamma_tilde,
                             matmul_bound, op_bound, softmax_bound)
from fpverify.engine import apply_op, default_profiles, execute
from fpverify.graph import build_graph, input_ref, make_node, node_ref
from fpverify.models import build_mlp
from fpverify.tensor import Rng, tensor_new

U32 = 2.0 ** -24

# frozen from an exact rational/extended-precision oracle (see test docstrings)
GAMMA_1_ORACLE = 5.960464832810452e-08
GAMMA_10_ORACLE = 5.960468030254859e-07
GAMMA_TILDE_1E6_ORACLE = 2.38450556631e-4
CONFIDENCE_LAMBDA4 = 0.9993290741


class TestGamma:
    def test_zero(self):
        assert gamma(0) == 0.0

    def test_k1_matches_rational_oracle(self):
        """Oracle: Fraction(1, 2**24) / (1 - Fraction(1, 2**24))."""
        assert gamma(1, U32) == pytest.approx(GAMMA_1_ORACLE, rel=1e-12)

    def test_k10_matches_rational_oracle(self):
        assert gamma(10, U32) == pytest.approx(GAMMA_10_ORACLE, rel=1e-12)

    def test_domain_boundary(self):
        with pytest.raises(ValueError):
            gamma(2 ** 24, U32)

    def test_strictly_increasing(self):
        ks = [1, 2, 10, 100, 10_000, 1_000_000]
        vals = [gamma(k, U32) for k in ks]
        assert all(a < b for a, b in zip(vals, vals[1:]))


class TestGammaTilde:
    def test_zero(self):
        assert gamma_tilde(0) == 0.0

    def test_k1e6_matches_mpmath_oracle(self):
        """Oracle: mpmath expm1(4*sqrt(k)*u + k*u^2/(1-u)) at 60 digits."""
        assert gamma_tilde(10 ** 6, 4.0, U32) == pytest.approx(
            GAMMA_TILDE_1E6_ORACLE, rel=1e-9
        )

    def test_close_to_asymptotic_form(self):
        for k in (10 ** 2, 10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6):
            approx = 4.0 * U32 * math.sqrt(k)
            assert abs(gamma_tilde(k, 4.0, U32) - approx) / approx <= 0.01

    def test_confidence_level(self):
        assert FpModel(lam=4.0).confidence() == pytest.approx(CONFIDENCE_LAMBDA4, rel=1e-8)
        assert FpModel(lam=4.0).confidence() >= 0.9993

    def test_strictly_increasing(self):
        ks = [1, 2, 10, 100, 10_000]
        vals = [gamma_tilde(k, 4.0, U32) for k in ks]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_tighter_than_deterministic_for_k_ge_32(self):
        for k in (32, 64, 128, 1024, 10 ** 5, 10 ** 6):
            assert gamma_tilde(k, 4.0, U32) <= gamma(k, U32)


class TestFpModel:
    def test_mode_validation(self):
        with pytest.raises(ValueError):
            FpModel(mode="exact")
        with pytest.raises(ValueError):
            FpModel(u=0.0)
        with pytest.raises(ValueError):
            FpModel(lam=-1.0)

    def test_reduction_const_dispatch(self):
        det = FpModel(mode="deterministic")
        prob = FpModel(mode="probabilistic")
        assert det.reduction_const(100) == gamma(100)
        assert prob.reduction_const(100) == gamma_tilde(100, 4.0)


class TestSoftmaxBound:
    def test_length_one_matches_hand_derivation(self):
        """n=1: y=1 exactly; eps <= 2*eps_e + u with eps_e = 2u|x| + 2u."""
        x = np.array([0.75], dtype=np.float32)
        model = FpModel(mode="deterministic")
        bt = softmax_bound(x, axis=-1, model=model, profile=default_profiles()[0])
        eps_e = 2 * U32 * 0.75 + 2 * U32
        expected = 2 * eps_e + U32
        assert bt.array[0] == pytest.approx(expected, rel=1e-6)

    def test_constant_vector_positive_finite(self):
        x = np.full((16,), 1.5, dtype=np.float32)
        bt = softmax_bound(x, axis=-1, model=FpModel(), profile=default_profiles()[1])
        assert np.all(bt.array > 0)
        assert np.all(np.isfinite(bt.array))

    def test_deterministic_soundness_sweep(self):
        model = FpModel(mode="deterministic")
        rng = Rng(21)
        n = make_node("sm", "softmax", [input_ref("x")], {"axis": -1})
        g = build_graph([n], [("x", (200, 16))], {}, [node_ref(0)])
        for prof in default_profiles():
            x = rng.uniform((200, 16), -4, 4)
            out32, eps = op_bound(g.nodes[0], [x.array], model, prof)
            out64 = apply_op(g.nodes[0], [x.astype64()], None, fp64=True)
            diff = np.abs(out32.astype(np.float64) - out64)
            assert np.all(diff <= eps)

    def test_probabilistic_violation_rate(self):
        model = FpModel(mode="probabilistic")
        rng = Rng(22)
        n = make_node("sm", "softmax", [input_ref("x")], {"axis": -1})
        g = build_graph([n], [("x", (2500, 16))], {}, [node_ref(0)])
        violations = 0
        total = 0
        for prof in default_profiles()[:2]:
            x = rng.uniform((2500, 16), -4, 4)
            out32, eps = op_bound(g.nodes[0], [x.array], model, prof)
            out64 = apply_op(g.nodes[0], [x.astype64()], None, fp64=True)
            rows_violating = np.any(
                np.abs(out32.astype(np.float64) - out64) > eps, axis=-1
            )
            violations += int(np.sum(rows_violating))
            total += rows_violating.size
        assert violations / total <= 0.005


class TestMatmulBound:
    def test_k1_single_product(self):
        a = np.array([[2.0]], dtype=np.float32)
        b = np.array([[3.0]], dtype=np.float32)
        bt = matmul_bound(a, b, FpModel(mode="deterministic"))
        assert bt.array[0, 0] == pytest.approx(gamma(1) * 6.0, rel=1e-9)

    def test_identity_still_positive(self):
        eye = np.eye(4, dtype=np.float32)
        x = Rng(1).uniform((4, 4), 0.5, 1.5).array
        bt = matmul_bound(eye, x, FpModel(mode="deterministic"))
        assert np.all(bt.array > 0)

    def test_fma_uses_fewer_roundings(self):
        a = Rng(2).uniform((3, 32), -1, 1).array
        b = Rng(3).uniform((32, 3), -1, 1).array
        model = FpModel(mode="deterministic")
        loose = matmul_bound(a, b, model, fma=False)
        tight = matmul_bound(a, b, model, fma=True)
        assert np.all(tight.array < loose.array)
        ratio = gamma(32) / gamma(63)
        assert np.allclose(tight.array / loose.array, ratio, rtol=1e-6)

    def test_random_32x32_sound_all_profiles(self):
        rng = Rng(4)
        model = FpModel(mode="deterministic")
        n = make_node("mm", "matmul", [input_ref("a"), input_ref("b")])
        g = build_graph([n], [("a", (32, 32)), ("b", (32, 32))], {}, [node_ref(0)])
        for prof in default_profiles():
            a = rng.uniform((32, 32), -2, 2)
            b = rng.uniform((32, 32), -2, 2)
            out32, eps = op_bound(g.nodes[0], [a.array, b.array], model, prof)
            out64 = a.astype64() @ b.astype64()
            assert np.all(np.abs(out32.astype(np.float64) - out64) <= eps)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            matmul_bound(np.ones((2, 3), np.float32), np.ones((4, 2), np.float32),
                         FpModel())


class TestCoExecute:
    def test_values_bitwise_match_execute(self):
        spec = build_mlp(batch=4, hidden=32, in_dim=16)
        x = spec.make_inputs(Rng(6))
        for prof in default_profiles():
            o1, t1 = execute(spec.graph, x, prof)
            o2, bounds, t2 = co_execute(spec.graph, x, prof, FpModel(), with_trace=True)
            for a, b in zip(t1.tensors, t2.tensors):
                assert np.array_equal(a.data, b.data)
            assert len(bounds) == spec.graph.n_nodes

    def test_reshape_zero_bound(self):
        n = make_node("r", "reshape", [input_ref("x")], {"shape": "4"})
        g = build_graph([n], [("x", (2, 2))], {}, [node_ref(0)])
        x = Rng(7).uniform((2, 2), -1, 1)
        _, bounds = co_execute(g, {"x": x}, default_profiles()[0], FpModel())
        assert np.all(bounds[0].array == 0.0)

    def test_sequential_sum_bound_formula(self):
        n = make_node("s", "sum", [input_ref("x")], {"axis": 0})
        g = build_graph([n], [("x", (50,))], {}, [node_ref(0)])
        x = Rng(8).uniform((50,), -1, 1)
        model = FpModel(mode="deterministic")
        _, bounds = co_execute(g, {"x": x}, default_profiles()[0], model)
        expected = gamma(49) * float(np.sum(np.abs(x.astype64())))
        assert bounds[0].array == pytest.approx(expected, rel=1e-12)

    def test_data_movement_all_zero(self):
        nodes = [
            make_node("c", "concat", [input_ref("x"), input_ref("y")], {"axis": 0}),
            make_node("s", "slice", [node_ref(0)], {"axis": 0, "start": 1, "stop": 3}),
            make_node("r", "reshape", [node_ref(1)], {"shape": "2"}),
        ]
        g = build_graph(nodes, [("x", (2,)), ("y", (2,))], {}, [node_ref(2)])
        feed = {"x": tensor_new([2], [1, 2]), "y": tensor_new([2], [3, 4])}
        _, bounds = co_execute(g, feed, default_profiles()[1], FpModel())
        for bt in bounds:
            assert np.all(bt.array == 0.0)

    def test_relu_and_extrema_zero_bound(self):
        nodes = [
            make_node("rl", "relu", [input_ref("x")]),
            make_node("mx", "max", [node_ref(0)], {"axis": 0}),
        ]
        g = build_graph(nodes, [("x", (8,))], {}, [node_ref(1)])
        x = Rng(9).uniform((8,), -1, 1)
        _, bounds = co_execute(g, {"x": x}, default_profiles()[0], FpModel())
        assert np.all(bounds[0].array == 0.0)
        assert np.all(bounds[1].array == 0.0)

    def test_bound_tensor_rejects_negative(self):
        with pytest.raises(ValueError):
            BoundTensor.from_array(np.array([-1.0]))


def test_bound_dump_round_trip(tmp_path):
    from fpverify.bounds import save_bounds
    from fpverify.tensor import read_tensor_file
    import json as _json

    spec = build_mlp(batch=4, hidden=32, in_dim=16)
    x = spec.make_inputs(Rng(30))
    prof = default_profiles()[0]
    model = FpModel(mode="probabilistic")
    _, bounds = co_execute(spec.graph, x, prof, model)
    save_bounds(tmp_path / "bounds", bounds, model, prof.id)
    manifest = _json.load(open(tmp_path / "bounds" / "manifest.json"))
    assert manifest["fp_model"] == {"u": model.u, "lambda": model.lam,
                                    "mode": "probabilistic"}
    assert manifest["n_nodes"] == len(bounds)
    back = read_tensor_file(tmp_path / "bounds" / "000000.naot")
    assert back.dtype == np.float64
    assert np.array_equal(back, bounds[0].array)
