"""Round orchestration: the sketched federation loop plus FedAvg and
local-only baselines, with exact communication accounting.

One round broadcasts the consensus vector, runs the participating clients'
local updates (concurrently when ONEBIT_FL_THREADS allows), aggregates the
sampled one-bit sketches into the next consensus, and appends a metrics
row. Everything is deterministic given the master seed, independent of the
thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import data as datamod
from . import diagnostics
from . import rng as rngs
from . import server as servermod
from .client import ClientState, client_update, task_only_update
from .errors import ConfigError, NumericError
from .objective import (HyperParams, ModelSpec, client_grad, client_objective,
                        predict, task_loss)
from .sketch import ConsensusVector, SketchOperator, create_operator, forward, quantize

POTENTIAL_SAMPLE = 256   # per-client eval subset size in sampled mode
MODEL_BITS = 32          # full-precision bits per parameter for the baselines

CSV_HEADER = ("round,mean_train_loss,mean_test_accuracy,uplink_bits,downlink_bits,"
              "potential_estimate,delta_max,sampling_error_term,grad_norm_avg")

ALGORITHMS = ("pfed1bs", "fedavg", "local")
DATASETS = ("synthetic", "idx", "csv")
POTENTIAL_MODES = ("exact", "sampled")
ERROR_POLICIES = ("abort-run", "skip-client")


@dataclass(frozen=True)
class RoundMetrics:
    """One ledger row.

    Loss, accuracy, and the potential reflect the state after the round's
    updates and aggregation; ``grad_norm_avg`` is the weighted squared
    client-gradient norm measured at the state the round started from.
    Bit counts are exact integers from the serialized payload sizes (data
    bits only, padding excluded).
    """

    round: int
    mean_train_loss: float
    mean_test_accuracy: float
    uplink_bits: int
    downlink_bits: int
    potential_estimate: float
    delta_max: float
    sampling_error_term: float
    grad_norm_avg: float

    def csv_row(self) -> str:
        cells = [str(self.round)]
        for value in (self.mean_train_loss, self.mean_test_accuracy):
            cells.append(repr(float(value)))
        cells.append(str(self.uplink_bits))
        cells.append(str(self.downlink_bits))
        for value in (self.potential_estimate, self.delta_max,
                      self.sampling_error_term, self.grad_norm_avg):
            cells.append(repr(float(value)))
        return ",".join(cells)


@dataclass(frozen=True)
class FederationConfig:
    """Validated experiment configuration; see the CLI module for file keys."""

    algorithm: str = "pfed1bs"
    model: str = "logistic-regression"
    dataset: str = "synthetic"
    K: int = 20
    S: int = 10
    T: int = 100
    R: int = 5
    eta: float = 0.05
    lam: float = 5e-4
    mu: float = 1e-5
    gamma: float = 1e4
    m_ratio: float = 0.1
    batch_size: int = 32
    seed: int = 1
    output_dir: str = "runs"
    dim: int = 50
    samples_per_client: int = 500
    heterogeneity: float = 1.0
    hidden: int = 256
    input_dim: int = 784
    classes: int = 10
    data_path: str = ""
    shards_per_client: int = 2
    holdout_frac: float = 0.1
    train_all_clients: bool = False
    strict_onebit_downlink: bool = False
    broadcast_once: bool = False
    potential: str = "sampled"
    error_policy: str = "abort-run"

    def validate(self) -> "FederationConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.potential not in POTENTIAL_MODES:
            raise ConfigError(f"potential must be one of {POTENTIAL_MODES}, got {self.potential!r}")
        if self.error_policy not in ERROR_POLICIES:
            raise ConfigError(f"error_policy must be one of {ERROR_POLICIES}, got {self.error_policy!r}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not 1 <= self.S <= self.K:
            raise ConfigError(f"S must satisfy 1 <= S <= K={self.K}, got {self.S}")
        if self.T < 0 or self.R < 0:
            raise ConfigError("T and R must be >= 0")
        if self.m_ratio <= 0:
            raise ConfigError(f"m_ratio must be positive, got {self.m_ratio}")
        if not 0 < self.holdout_frac < 1:
            raise ConfigError(f"holdout_frac must be in (0, 1), got {self.holdout_frac}")
        if self.dataset != "synthetic" and not self.data_path:
            raise ConfigError(f"dataset={self.dataset!r} requires data_path")
        resolve_spec(self)  # raises on inconsistent model dims
        self.hyperparams()  # raises on bad optimizer settings
        return self

    def hyperparams(self) -> HyperParams:
        return HyperParams(eta=self.eta, lam=self.lam, mu=self.mu, gamma=self.gamma,
                           local_steps=self.R, rounds=self.T, participants=self.S,
                           batch_size=self.batch_size)


def resolve_spec(config: FederationConfig) -> ModelSpec:
    """Model architecture implied by the config, before any data is read."""
    if config.dataset == "synthetic":
        in_dim, classes = config.dim, 2
    else:
        in_dim, classes = config.input_dim, config.classes
    if config.model == "linear-regression":
        if config.dataset != "synthetic":
            raise ConfigError("linear-regression is only wired to the synthetic dataset")
        dims = (in_dim, 1)
    elif config.model == "logistic-regression":
        dims = (in_dim, classes)
    elif config.model == "mlp":
        dims = (in_dim, config.hidden, classes)
    else:
        raise ConfigError(f"unknown model {config.model!r}")
    return ModelSpec(kind=config.model, layer_dims=dims)


def sketch_dim(n: int, m_ratio: float) -> int:
    return max(1, int(round(m_ratio * n)))


@dataclass
class Problem:
    dataset: datamod.Dataset
    partitions: list
    spec: ModelSpec
    op: SketchOperator
    hp: HyperParams


def build_problem(config: FederationConfig) -> Problem:
    spec = resolve_spec(config)
    if config.dataset == "synthetic":
        kind = "linear" if config.model == "linear-regression" else "logistic"
        synth = datamod.generate_synthetic(kind, config.K, config.samples_per_client,
                                           config.dim, config.heterogeneity, config.seed)
        dataset, partitions = synth.dataset, synth.partitions
    else:
        x, y = datamod.load_dataset(config.data_path, config.dataset)
        if x.shape[1] != spec.layer_dims[0]:
            raise ConfigError(
                f"dataset feature dimension {x.shape[1]} does not match configured input_dim "
                f"{spec.layer_dims[0]}")
        if spec.is_classifier and int(y.max()) + 1 > spec.layer_dims[-1]:
            raise ConfigError(
                f"dataset has labels up to {int(y.max())} but the model only has "
                f"{spec.layer_dims[-1]} classes")
        dataset = datamod.Dataset(x=x, y=y)
        partitions = datamod.partition_by_label(y, config.K, config.shards_per_client,
                                                config.seed)
    op = create_operator(config.seed, spec.n, sketch_dim(spec.n, config.m_ratio))
    hp = config.hyperparams()
    return Problem(dataset=dataset, partitions=partitions, spec=spec, op=op, hp=hp)


def build_clients(config: FederationConfig, dataset: datamod.Dataset, partitions,
                  spec: ModelSpec) -> list:
    """Per-client states: shared initial model, size-proportional weights,
    seeded holdout splits, and one batch stream per client."""
    w0 = spec.init_params(rngs.stream(config.seed, rngs.INIT))
    splits = [datamod.split_train_test(part, config.holdout_frac,
                                       rngs.stream(config.seed, rngs.SPLIT, k))
              for k, part in enumerate(partitions)]
    sizes = np.array([train.size for train, _ in splits], dtype=np.float64)
    weights = sizes / sizes.sum()
    clients = []
    for k, (train_idx, test_idx) in enumerate(splits):
        clients.append(ClientState(
            id=k, w=w0.copy(), p=float(weights[k]),
            train_idx=train_idx, test_idx=test_idx,
            rng=rngs.stream(config.seed, rngs.CLIENT, k),
        ))
    return clients


@dataclass
class RunResult:
    metrics: list
    initial_potential: float
    max_weight_sq: float
    clients: list
    v: ConsensusVector
    spec: ModelSpec
    op: SketchOperator
    hp: HyperParams
    config: FederationConfig
    dataset: datamod.Dataset


def _thread_cap() -> int:
    raw = os.environ.get("ONEBIT_FL_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"ONEBIT_FL_THREADS must be an integer, got {raw!r}") from None
    return max(1, cap)


def _eval_idx(state: ClientState, mode: str) -> np.ndarray:
    # sampled mode uses the fixed leading slice of the (shuffled) train split
    if mode == "exact":
        return state.train_idx
    return state.train_idx[:POTENTIAL_SAMPLE]


def potential_value(clients, v: ConsensusVector, op: SketchOperator, spec: ModelSpec,
                    hp: HyperParams, dataset: datamod.Dataset, mode: str = "sampled") -> float:
    """Weighted sum of client objectives over all clients.

    ``exact`` evaluates each client's full train partition; ``sampled``
    uses the client's fixed leading 256 training samples as the estimator.
    Invariant to client ordering.
    """
    vv = v.as_float()
    total = 0.0
    for state in clients:
        idx = _eval_idx(state, mode)
        total += state.p * client_objective(spec, op, state.w, vv, hp,
                                            (dataset.x[idx], dataset.y[idx]))
    return total


def _weighted_train_loss(clients, spec, dataset, mode) -> float:
    total = 0.0
    for state in clients:
        idx = _eval_idx(state, mode)
        total += state.p * task_loss(spec, state.w, (dataset.x[idx], dataset.y[idx]))
    return total


def _mean_test_accuracy(clients, spec, dataset) -> float:
    """Unweighted mean Top-1 of each personalized model on its own test split.

    Not defined for regression models; those report NaN.
    """
    if not spec.is_classifier:
        return float("nan")
    accs = []
    for state in clients:
        labels = predict(spec, state.w, dataset.x[state.test_idx])
        accs.append(float(np.mean(labels == dataset.y[state.test_idx])))
    return float(np.mean(accs))


def _grad_norm_avg(clients, v, op, spec, hp, dataset, mode) -> float:
    """Weighted squared norm of the full client-objective gradients."""
    vv = v.as_float()
    total = 0.0
    for state in clients:
        idx = _eval_idx(state, mode)
        g = client_grad(spec, op, state.w, vv, hp, (dataset.x[idx], dataset.y[idx]))
        total += state.p * float(g @ g)
    return total


def client_sketch(op: SketchOperator, state: ClientState):
    """Sketch of a client's current model (diagnostics view, not a transmission)."""
    return quantize(forward(op, state.w))


def _update_participants(clients, trainees, update_fn, error_policy):
    """Run per-client updates, serially or on the thread pool; returns
    {client_id: update result} with failures dropped under skip-client."""
    cap = min(_thread_cap(), len(trainees))
    results = {}

    def attempt(k):
        try:
            return k, update_fn(int(k)), None
        except NumericError as exc:
            return k, None, exc

    if cap > 1:
        with ThreadPoolExecutor(max_workers=cap) as pool:
            outcomes = list(pool.map(attempt, trainees))
    else:
        outcomes = [attempt(k) for k in trainees]
    for k, value, exc in outcomes:
        if exc is not None:
            if error_policy == "abort-run":
                raise exc
            continue  # skip-client: keep the stale state, drop the upload
        results[int(k)] = value
    return results


def _run_pfed1bs(config: FederationConfig) -> RunResult:
    problem = build_problem(config)
    dataset, spec, op, hp = problem.dataset, problem.spec, problem.op, problem.hp
    clients = build_clients(config, dataset, problem.partitions, spec)
    v = ConsensusVector.zeros(op.m)
    sampling_rng = rngs.stream(config.seed, rngs.SAMPLING)
    initial_potential = potential_value(clients, v, op, spec, hp, dataset, config.potential)
    max_weight_sq = max(float(c.w @ c.w) for c in clients)
    downlink_per_recipient = servermod.consensus_payload_bits(op.m, config.strict_onebit_downlink)
    metrics = []

    for t in range(config.T):
        grad_norm = _grad_norm_avg(clients, v, op, spec, hp, dataset, config.potential)

        if config.train_all_clients:
            trainees = np.arange(config.K, dtype=np.int64)
        else:
            trainees = servermod.sample_clients(config.K, config.S, sampling_rng)
        downlink_bits = downlink_per_recipient * (1 if config.broadcast_once else len(trainees))

        v_broadcast = v
        results = _update_participants(
            clients, trainees,
            lambda k: client_update(clients[k], v_broadcast, op, spec, hp, dataset),
            config.error_policy,
        )
        for k in sorted(results):
            clients[k] = results[k][1]

        if config.train_all_clients:
            sampled = servermod.sample_clients(config.K, config.S, sampling_rng)
        else:
            sampled = trainees
        transmitters = [int(k) for k in sampled if int(k) in results]
        uplink_bits = sum(results[k][0].payload_bits for k in transmitters)

        if transmitters:
            tally_pairs = [(results[k][0], clients[k].p) for k in transmitters]
            v_next = servermod.aggregate(tally_pairs)
            # the vote maximizes alignment with the weighted sign tally by construction
            zhat = np.zeros(op.m)
            for sketch, weight in tally_pairs:
                zhat += weight * sketch.values()
            assert float(v_next.as_float() @ zhat) >= float(v.as_float() @ zhat) - 1e-9
            if config.strict_onebit_downlink:
                v_next = servermod.force_ties_positive(v_next)
        else:
            v_next = v
        v = v_next

        max_weight_sq = max(max_weight_sq, max(float(c.w @ c.w) for c in clients))
        all_values = np.stack([client_sketch(op, c).values().astype(np.float64)
                               for c in clients])
        delta_max, sampling_term = diagnostics.theorem_error_terms(
            hp, op, math.sqrt(max_weight_sq), [all_values])

        metrics.append(RoundMetrics(
            round=t,
            mean_train_loss=_weighted_train_loss(clients, spec, dataset, config.potential),
            mean_test_accuracy=_mean_test_accuracy(clients, spec, dataset),
            uplink_bits=int(uplink_bits),
            downlink_bits=int(downlink_bits),
            potential_estimate=potential_value(clients, v, op, spec, hp, dataset,
                                               config.potential),
            delta_max=delta_max,
            sampling_error_term=sampling_term,
            grad_norm_avg=grad_norm,
        ))

    return RunResult(metrics=metrics, initial_potential=initial_potential,
                     max_weight_sq=max_weight_sq, clients=clients, v=v, spec=spec,
                     op=op, hp=hp, config=config, dataset=dataset)


def _run_fedavg(config: FederationConfig) -> RunResult:
    """Weighted full-precision averaging that overwrites local models (no
    personalization); the cost/accuracy comparison anchor."""
    problem = build_problem(config)
    dataset, spec, op, hp = problem.dataset, problem.spec, problem.op, problem.hp
    clients = build_clients(config, dataset, problem.partitions, spec)
    hp_task = replace(hp, lam=0.0, mu=0.0)
    w_global = clients[0].w.copy()
    sampling_rng = rngs.stream(config.seed, rngs.SAMPLING)
    v0 = ConsensusVector.zeros(op.m)
    initial_potential = potential_value(clients, v0, op, spec, hp_task, dataset,
                                        config.potential)
    max_weight_sq = float(w_global @ w_global)
    bits_per_model = spec.n * MODEL_BITS
    metrics = []

    for t in range(config.T):
        grad_norm = _grad_norm_avg(clients, v0, op, spec, hp_task, dataset, config.potential)
        sampled = servermod.sample_clients(config.K, config.S, sampling_rng)
        downlink_bits = bits_per_model * (1 if config.broadcast_once else len(sampled))

        for k in sampled:
            clients[k] = replace(clients[k], w=w_global.copy())
        results = _update_participants(
            clients, sampled,
            lambda k: task_only_update(clients[k], spec, hp_task, dataset),
            config.error_policy,
        )
        for k in sorted(results):
            clients[k] = results[k]
        uplink_bits = bits_per_model * len(results)

        if results:
            total = sum(clients[k].p for k in results)
            w_global = np.zeros_like(w_global)
            for k in sorted(results):
                w_global += (clients[k].p / total) * clients[k].w
        for k in range(config.K):
            clients[k] = replace(clients[k], w=w_global.copy())

        max_weight_sq = max(max_weight_sq, float(w_global @ w_global))
        metrics.append(RoundMetrics(
            round=t,
            mean_train_loss=_weighted_train_loss(clients, spec, dataset, config.potential),
            mean_test_accuracy=_mean_test_accuracy(clients, spec, dataset),
            uplink_bits=int(uplink_bits),
            downlink_bits=int(downlink_bits),
            potential_estimate=potential_value(clients, v0, op, spec, hp_task, dataset,
                                               config.potential),
            delta_max=0.0,
            sampling_error_term=0.0,
            grad_norm_avg=grad_norm,
        ))

    return RunResult(metrics=metrics, initial_potential=initial_potential,
                     max_weight_sq=max_weight_sq, clients=clients, v=v0, spec=spec,
                     op=op, hp=hp, config=config, dataset=dataset)


def _run_local(config: FederationConfig) -> RunResult:
    """Every client trains alone each round; nothing is transmitted."""
    problem = build_problem(config)
    dataset, spec, op, hp = problem.dataset, problem.spec, problem.op, problem.hp
    clients = build_clients(config, dataset, problem.partitions, spec)
    hp_task = replace(hp, lam=0.0, mu=0.0)
    v0 = ConsensusVector.zeros(op.m)
    initial_potential = potential_value(clients, v0, op, spec, hp_task, dataset,
                                        config.potential)
    max_weight_sq = max(float(c.w @ c.w) for c in clients)
    metrics = []

    for t in range(config.T):
        grad_norm = _grad_norm_avg(clients, v0, op, spec, hp_task, dataset, config.potential)
        everyone = np.arange(config.K, dtype=np.int64)
        results = _update_participants(
            clients, everyone,
            lambda k: task_only_update(clients[k], spec, hp_task, dataset),
            config.error_policy,
        )
        for k in sorted(results):
            clients[k] = results[k]
        max_weight_sq = max(max_weight_sq, max(float(c.w @ c.w) for c in clients))
        metrics.append(RoundMetrics(
            round=t,
            mean_train_loss=_weighted_train_loss(clients, spec, dataset, config.potential),
            mean_test_accuracy=_mean_test_accuracy(clients, spec, dataset),
            uplink_bits=0,
            downlink_bits=0,
            potential_estimate=potential_value(clients, v0, op, spec, hp_task, dataset,
                                               config.potential),
            delta_max=0.0,
            sampling_error_term=0.0,
            grad_norm_avg=grad_norm,
        ))

    return RunResult(metrics=metrics, initial_potential=initial_potential,
                     max_weight_sq=max_weight_sq, clients=clients, v=v0, spec=spec,
                     op=op, hp=hp, config=config, dataset=dataset)


def run(config: FederationConfig) -> RunResult:
    """Execute T communication rounds of the configured algorithm.

    Fully deterministic given the master seed: identical configs produce
    identical metrics regardless of the thread cap.
    """
    config.validate()
    if config.algorithm == "pfed1bs":
        return _run_pfed1bs(config)
    if config.algorithm == "fedavg":
        return _run_fedavg(config)
    return _run_local(config)


def comm_cost_reduction(model_bits_per_param: int, n: int, m: int) -> float:
    """Fractional uplink saving of an m-coordinate one-bit sketch versus n
    parameters at the given precision: 1 - m / (n * bits)."""
    if model_bits_per_param < 1 or n < 1 or m < 1:
        raise ValueError("all cost inputs must be positive")
    return 1.0 - m / (n * model_bits_per_param)


def _mb(bits: int) -> float:
    return bits / 8.0 / 2.0**20


def cost_report(n: int, m: int, participants: int,
                bits_per_param: int = MODEL_BITS) -> dict:
    """Bidirectional per-round ledger for the sketched channel versus a
    full-precision FedAvg round, in bits and MB, under both downlink
    accountings (one bit per coordinate, or two-bit trits) and both
    unicast / broadcast-once models."""
    up_sketch = participants * m
    fedavg_up = participants * n * bits_per_param
    fedavg_down = participants * n * bits_per_param
    report = {
        "n": n, "m": m, "participants": participants, "bits_per_param": bits_per_param,
        "uplink_reduction": comm_cost_reduction(bits_per_param, n, m),
        "sketch_uplink_bits": up_sketch,
        "sketch_downlink_bits_onebit": participants * m,
        "sketch_downlink_bits_trit": participants * 2 * m,
        "sketch_downlink_bits_onebit_broadcast": m,
        "sketch_downlink_bits_trit_broadcast": 2 * m,
        "fedavg_uplink_bits": fedavg_up,
        "fedavg_downlink_bits": fedavg_down,
    }
    report["sketch_round_mb_onebit"] = _mb(up_sketch + report["sketch_downlink_bits_onebit"])
    report["sketch_round_mb_trit"] = _mb(up_sketch + report["sketch_downlink_bits_trit"])
    report["fedavg_round_mb"] = _mb(fedavg_up + fedavg_down)
    report["round_reduction_onebit"] = 1.0 - ((up_sketch + report["sketch_downlink_bits_onebit"])
                                              / (fedavg_up + fedavg_down))
    return report
