import copy
import math

import numpy as np
import pytest

from onebit_fl.client import ClientState, client_update, task_only_update
from onebit_fl.data import Dataset, generate_synthetic
from onebit_fl.errors import ConfigError, NumericError
from onebit_fl.objective import (HyperParams, ModelSpec, client_objective,
                                 task_loss_and_grad)
from onebit_fl.sketch import ConsensusVector, create_operator, forward, quantize
from onebit_fl import rng as rngs


def _toy_problem(seed=0, clients=1, samples=120, dim=6):
    synth = generate_synthetic("logistic", clients, samples, dim, 0.5, seed)
    spec = ModelSpec("logistic-regression", (dim, 2))
    op = create_operator(seed, spec.n, 4)
    return synth.dataset, synth.partitions, spec, op


def _state(partition, dim_params, seed=0, client_id=0):
    return ClientState(id=client_id, w=np.zeros(dim_params), p=1.0,
                       train_idx=partition, test_idx=np.array([], dtype=np.int64),
                       rng=rngs.stream(seed, rngs.CLIENT, client_id))


class TestClientUpdate:
    def test_zero_steps_returns_unchanged_model(self):
        data, parts, spec, op = _toy_problem()
        hp = HyperParams(eta=0.1, local_steps=0, batch_size=16)
        state = _state(parts[0], spec.n)
        sketch, new_state = client_update(state, ConsensusVector.zeros(op.m), op, spec, hp, data)
        np.testing.assert_array_equal(new_state.w, state.w)
        np.testing.assert_array_equal(sketch.values(), quantize(forward(op, state.w)).values())

    def test_matches_reference_sgd_when_unregularized(self):
        # reference oracle: a plain SGD loop sharing the same RNG stream
        data, parts, spec, op = _toy_problem(seed=3)
        hp = HyperParams(eta=0.05, lam=0.0, mu=0.0, local_steps=12, batch_size=16)
        state = _state(parts[0], spec.n, seed=3)

        ref_rng = copy.deepcopy(state.rng)
        w_ref = state.w.copy()
        order = ref_rng.permutation(state.train_idx)
        pos = 0
        for _ in range(hp.local_steps):
            if pos + hp.batch_size > order.size:
                order = ref_rng.permutation(state.train_idx)
                pos = 0
            take = order[pos: pos + hp.batch_size]
            pos += hp.batch_size
            _, g = task_loss_and_grad(spec, w_ref, (data.x[take], data.y[take]))
            w_ref = w_ref - hp.eta * g

        _, new_state = client_update(state, ConsensusVector.zeros(op.m), op, spec, hp, data)
        np.testing.assert_array_equal(new_state.w, w_ref)

    def test_full_batch_descent_on_convex_objective(self):
        data, parts, spec, op = _toy_problem(seed=4)
        hp = HyperParams(eta=0.05, lam=1e-3, mu=1e-3, gamma=10.0,
                         local_steps=5, batch_size=parts[0].size)
        state = _state(parts[0], spec.n, seed=4)
        v = ConsensusVector.zeros(op.m)
        batch = (data.x[state.train_idx], data.y[state.train_idx])
        before = client_objective(spec, op, state.w, v.as_float(), hp, batch)
        _, new_state = client_update(state, v, op, spec, hp, data)
        after = client_objective(spec, op, new_state.w, v.as_float(), hp, batch)
        assert after < before

    def test_deterministic_replay(self):
        data, parts, spec, op = _toy_problem(seed=5)
        hp = HyperParams(eta=0.05, local_steps=7, batch_size=16)
        state = _state(parts[0], spec.n, seed=5)
        v = ConsensusVector.zeros(op.m)
        s1, n1 = client_update(state, v, op, spec, hp, data)
        s2, n2 = client_update(state, v, op, spec, hp, data)
        assert s1.bits == s2.bits
        np.testing.assert_array_equal(n1.w, n2.w)

    def test_input_state_not_mutated(self):
        data, parts, spec, op = _toy_problem(seed=6)
        hp = HyperParams(eta=0.05, local_steps=4, batch_size=16)
        state = _state(parts[0], spec.n, seed=6)
        w_before = state.w.copy()
        rng_state_before = state.rng.bit_generator.state
        client_update(state, ConsensusVector.zeros(op.m), op, spec, hp, data)
        np.testing.assert_array_equal(state.w, w_before)
        np.testing.assert_equal(state.rng.bit_generator.state, rng_state_before)

    def test_batch_size_precondition(self):
        data, parts, spec, op = _toy_problem(seed=7, samples=20)
        hp = HyperParams(eta=0.05, local_steps=1, batch_size=64)
        state = _state(parts[0], spec.n, seed=7)
        with pytest.raises(ConfigError):
            client_update(state, ConsensusVector.zeros(op.m), op, spec, hp, data)

    def test_numeric_error_reports_client_id(self):
        data, parts, spec, op = _toy_problem(seed=8)
        poisoned = Dataset(x=data.x.copy(), y=data.y)
        poisoned.x[parts[0][0]] = float("nan")
        hp = HyperParams(eta=0.05, local_steps=3, batch_size=parts[0].size)
        state = _state(parts[0], spec.n, seed=8, client_id=13)
        with pytest.raises(NumericError, match="client 13"):
            client_update(state, ConsensusVector.zeros(op.m), op, spec, hp, poisoned)

    def test_consensus_dimension_checked(self):
        data, parts, spec, op = _toy_problem(seed=9)
        hp = HyperParams(eta=0.05, local_steps=1, batch_size=16)
        state = _state(parts[0], spec.n, seed=9)
        with pytest.raises(ValueError):
            client_update(state, ConsensusVector.zeros(op.m + 1), op, spec, hp, data)

    def test_expected_descent_over_reseeded_runs(self):
        # stochastic version of the one-round descent bound, averaged over
        # independent batch streams
        data, parts, spec, op = _toy_problem(seed=10, samples=240)
        hp = HyperParams(eta=0.02, lam=1e-3, mu=1e-3, gamma=10.0,
                         local_steps=4, batch_size=16)
        v = ConsensusVector.zeros(op.m)
        full = (data.x[parts[0]], data.y[parts[0]])
        w0 = np.zeros(spec.n)
        before = client_objective(spec, op, w0, v.as_float(), hp, full)

        # estimate sigma^2 and L_F for the slack term
        from onebit_fl.diagnostics import estimate_sigma_sq, estimate_task_smoothness, smoothness_constant
        probe = np.random.default_rng(0)
        sigma_sq = estimate_sigma_sq(spec, w0, data, parts[0], hp.batch_size, probe)
        l_f = smoothness_constant(estimate_task_smoothness(spec, w0, full, probe), hp, op)
        assert hp.eta <= 1.0 / l_f

        deltas = []
        for rep in range(50):
            state = ClientState(id=0, w=w0.copy(), p=1.0, train_idx=parts[0],
                                test_idx=np.array([], dtype=np.int64),
                                rng=np.random.default_rng(1000 + rep))
            _, new_state = client_update(state, v, op, spec, hp, data)
            deltas.append(client_objective(spec, op, new_state.w, v.as_float(), hp, full) - before)
        slack = hp.eta**2 * hp.local_steps * l_f * sigma_sq / 2.0
        assert np.mean(deltas) <= slack


class TestTaskOnlyUpdate:
    def test_reduces_task_loss(self):
        data, parts, spec, op = _toy_problem(seed=11)
        hp = HyperParams(eta=0.05, local_steps=10, batch_size=parts[0].size)
        state = _state(parts[0], spec.n, seed=11)
        full = (data.x[parts[0]], data.y[parts[0]])
        before, _ = task_loss_and_grad(spec, state.w, full)
        new_state = task_only_update(state, spec, hp, data)
        after, _ = task_loss_and_grad(spec, new_state.w, full)
        assert after < before
