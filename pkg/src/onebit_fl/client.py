"""Client-side local training step of the federated round."""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericError
from .objective import HyperParams, ModelSpec, client_grad, task_loss_and_grad
from .sketch import ConsensusVector, OneBitSketch, SketchOperator, forward, quantize


@dataclass(frozen=True)
class ClientState:
    """One client's personalized model plus its private data slice.

    ``train_idx`` and ``test_idx`` are disjoint index sets into the shared
    feature/label arrays. ``rng`` drives this client's mini-batch order and
    nothing else; every other random choice in the simulator lives in its
    own stream.
    """

    id: int
    w: np.ndarray
    p: float
    train_idx: np.ndarray
    test_idx: np.ndarray
    rng: np.random.Generator


def _run_sgd(w0, rng, hp: HyperParams, data, train_idx, client_id, grad_fn):
    """SGD loop with shuffle-once-per-epoch batch cycling.

    Batches walk a fresh permutation of the client's training indices and
    reshuffle whenever fewer than a full batch remains.
    """
    if hp.batch_size > train_idx.size:
        raise ConfigError(
            f"client {client_id}: batch_size {hp.batch_size} exceeds train partition size {train_idx.size}"
        )
    w = np.array(w0, dtype=np.float64)
    order = rng.permutation(train_idx)
    pos = 0
    for _ in range(hp.local_steps):
        if pos + hp.batch_size > order.size:
            order = rng.permutation(train_idx)
            pos = 0
        take = order[pos: pos + hp.batch_size]
        pos += hp.batch_size
        try:
            grad = grad_fn(w, (data.x[take], data.y[take]))
        except NumericError as exc:
            raise NumericError(f"client {client_id}: {exc}") from exc
        w -= hp.eta * grad
    if not np.isfinite(w).all():
        raise NumericError(f"client {client_id}: non-finite parameters after update")
    return w


def client_update(state: ClientState, v: ConsensusVector, op: SketchOperator,
                  spec: ModelSpec, hp: HyperParams, data):
    """Run R local SGD steps on the smoothed objective and sketch the result.

    Returns the one-bit sketch of the updated model together with the new
    client state. The input state is never mutated; the returned state
    carries the advanced batch stream, so replaying identical inputs
    reproduces the output bit for bit.
    """
    if v.m != op.m:
        raise ValueError(f"consensus dimension {v.m} does not match operator sketch dimension {op.m}")
    rng = copy.deepcopy(state.rng)
    vv = v.as_float()
    w = _run_sgd(
        state.w, rng, hp, data, state.train_idx, state.id,
        lambda w_cur, batch: client_grad(spec, op, w_cur, vv, hp, batch),
    )
    sketch = quantize(forward(op, w))
    return sketch, replace(state, w=w, rng=rng)


def task_only_update(state: ClientState, spec: ModelSpec, hp: HyperParams, data) -> ClientState:
    """Plain-SGD local step on the bare task loss (FedAvg / local baselines)."""
    rng = copy.deepcopy(state.rng)
    w = _run_sgd(
        state.w, rng, hp, data, state.train_idx, state.id,
        lambda w_cur, batch: task_loss_and_grad(spec, w_cur, batch)[1],
    )
    return replace(state, w=w, rng=rng)
