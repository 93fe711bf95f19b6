"""Personalized federated learning with bidirectional one-bit random sketching.

Clients upload bit-packed signs of a seeded structured projection of their
personalized models; the server answers with a majority-vote consensus
vector that a smoothed sign-alignment penalty pulls the local models
toward. The package bundles the projection kernels, the client/server
round logic, baselines, a diagnostics suite for the analysis constants,
and a CLI.
"""

__version__ = "0.1.0"

from .client import ClientState, client_update, task_only_update
from .data import (Dataset, generate_synthetic, load_dataset, partition_by_label,
                   scale_unit_interval, split_train_test)
from .errors import ConfigError, DataFormatError, NumericError, PayloadError
from .federation import (FederationConfig, RoundMetrics, RunResult,
                         comm_cost_reduction, cost_report, potential_value, run)
from .objective import (HyperParams, ModelSpec, client_grad, client_objective,
                        logcosh_surrogate, predict, regularizer_grad, task_loss,
                        task_loss_and_grad)
from .server import (aggregate, decode_consensus, encode_consensus,
                     force_ties_positive, sample_clients)
from .sketch import (ConsensusVector, OneBitSketch, SketchOperator, adjoint,
                     create_operator, decode_sketch_message, deserialize_sketch,
                     encode_sketch_message, forward, fwht_in_place, quantize,
                     serialize_sketch)

__all__ = [
    "ClientState", "ConfigError", "ConsensusVector", "DataFormatError", "Dataset",
    "FederationConfig", "HyperParams", "ModelSpec", "NumericError", "OneBitSketch",
    "PayloadError", "RoundMetrics", "RunResult", "SketchOperator", "adjoint",
    "aggregate", "client_grad", "client_objective", "client_update",
    "comm_cost_reduction", "cost_report", "create_operator", "decode_consensus",
    "decode_sketch_message", "deserialize_sketch", "encode_consensus",
    "encode_sketch_message", "force_ties_positive", "forward", "fwht_in_place",
    "generate_synthetic", "load_dataset", "logcosh_surrogate", "partition_by_label",
    "potential_value", "predict", "quantize", "regularizer_grad", "run",
    "sample_clients", "scale_unit_interval", "serialize_sketch", "split_train_test",
    "task_loss", "task_loss_and_grad", "task_only_update",
]
