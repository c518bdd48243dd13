import numpy as np
import pytest

from flowsurrogate import tensor as T
from flowsurrogate.checks import gradcheck_suite, primitive_cases
from flowsurrogate.errors import ConfigError, ContractError, DimensionError
from flowsurrogate.gradcheck import grad_check, relative_error
from flowsurrogate.optim import Adam, AdamState, adam_step
from flowsurrogate.tensor import Tensor, inject_backward_fault

from oracles import adam_scalar


class TestAdam:
    def test_state_starts_at_zero(self):
        params = [Tensor(np.ones((2, 3)), True), Tensor(np.ones(4), True)]
        state = AdamState.for_params(params)
        assert state.step == 0
        assert [m.shape for m in state.m] == [(2, 3), (4,)]
        assert all(not m.any() for m in state.m + state.v)

    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([0.5, -1.0]), True)
        state = AdamState.for_params([p])
        for _ in range(5):
            adam_step([p], [np.zeros(2)], state, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [0.5, -1.0])

    def test_constant_gradient_step_tends_to_lr_sign(self):
        p = Tensor(np.array([0.0, 0.0]), True)
        state = AdamState.for_params([p])
        g = np.array([0.3, -2.0])
        for _ in range(2000):
            before = p.data.copy()
            adam_step([p], [g], state, lr=1e-3)
        np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(g), rtol=1e-6)

    def test_single_step_hand_value(self):
        p = Tensor(np.array([1.0]), True)
        adam_step([p], [np.array([1.0])], AdamState.for_params([p]), lr=0.1)
        # m_hat = 1, v_hat = 1, update = 0.1 / (1 + 1e-8)
        assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)

    def test_matches_scalar_oracle_with_decay(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=25)
        p = Tensor(np.array([0.7]), True)
        state = AdamState.for_params([p])
        for g in grads:
            adam_step([p], [np.array([g])], state, lr=0.05, weight_decay=1e-2)
        assert p.data[0] == pytest.approx(adam_scalar(0.7, grads, 0.05, wd=1e-2), abs=1e-14)

    def test_errors(self):
        p = Tensor(np.ones(2), True)
        with pytest.raises(DimensionError):
            adam_step([p], [np.ones(3)], AdamState.for_params([p]), lr=0.1)
        with pytest.raises(ConfigError):
            adam_step([p], [np.ones(2)], AdamState.for_params([p]), lr=0.0)

    def test_wrapper_with_zero_lr_is_a_null_update(self):
        p = Tensor(np.ones(3), True)
        opt = Adam([p], lr=0.0)
        T.tsum(T.square(p)).backward()
        opt.step()
        np.testing.assert_array_equal(p.data, 1.0)
        assert opt.state.step == 1


class TestGradCheck:
    def test_relative_error_floor(self):
        np.testing.assert_allclose(relative_error(np.array([1.0, 0.0]), np.array([1.1, 0.0])),
                                   [0.1 / 1.1, 0.0])

    def test_linear_model_is_exact(self):
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(size=5), True)
        x = rng.normal(size=5)
        report = grad_check(lambda: T.tsum(T.mul(w, x)), {"w": w})
        assert report.worst < 1e-9

    def test_nondeterministic_closure_is_rejected(self):
        w = Tensor(np.ones(4), True)
        rng = np.random.default_rng(2)
        with pytest.raises(ContractError):
            grad_check(lambda: T.tsum(T.dropout(w, 0.5, rng, True)), {"w": w})

    def test_convlstm_cell_passes(self):
        name, closure, params = [c for c in primitive_cases(0) if c[0] == "convlstm_step"][0]
        report = grad_check(closure, params, 1e-4)
        assert report.passed, report.summary()
        assert {k for k in params if k.startswith("lstm.W")} <= set(report.max_rel_error)

    def test_fault_injection_flags_corrupted_tensor(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.uniform(-1, 1, (3, 3)), True)
        b = Tensor(rng.uniform(-1, 1, (3, 3)), True)
        closure = lambda: T.tsum(T.add(T.sigmoid(a), T.square(b)))  # noqa: E731
        with inject_backward_fault("sigmoid"):
            report = grad_check(closure, {"a": a, "b": b})
        assert report.failures == ["a"]
        assert grad_check(closure, {"a": a, "b": b}).passed

    def test_primitive_suite_passes(self):
        reports = gradcheck_suite(1e-4, seed=0, models=False)
        assert all(r.passed for r in reports.values()), {k: r.worst for k, r in reports.items()}

    @pytest.mark.parametrize("op", ["conv2d", "unpool", "maxpool", "tanh", "mul", "getitem"])
    def test_primitive_suite_catches_faults(self, op):
        with inject_backward_fault(op):
            reports = gradcheck_suite(1e-4, seed=0, models=False)
        assert any(not r.passed for r in reports.values())
