#!/usr/bin/env python3

from ._alignment import RelationMatrix
from ._alignment import SharedStack
from ._alignment import generalized_gradient
from ._alignment import init_relation
from ._alignment import to_global
from ._alignment import to_local
from ._client import ClientRecord
from ._client import ClientState
from ._client import PhaseReport
from ._client import check_gradients
from ._client import evaluate
from ._client import joint_step
from ._client import local_round
from ._client import phase_share_step
from ._client import phase_specific_step
from ._client import proximal_share_step
from ._config import ClientConfig
from ._config import FederationConfig
from ._exceptions import H2TuneConfigError
from ._exceptions import H2TuneException
from ._exceptions import H2TuneFormatError
from ._exceptions import H2TuneInputError
from ._exceptions import H2TuneInvariantViolation
from ._exceptions import H2TuneNumericDivergence
from ._exceptions import H2TuneProtocolError
from ._exceptions import H2TuneShapeError
from ._exceptions import H2TuneSolverFailure
from ._experiment import ARMS
from ._experiment import Experiment
from ._experiment import ExperimentManifest
from ._experiment import apply_arm
from ._experiment import compare_arms
from ._experiment import list_runs
from ._federation import Federation
from ._federation import RoundRecord
from ._federation import aggregate
from ._federation import convergence_ratio
from ._federation import run_federation
from ._model import ArchSpec
from ._model import ClientModel
from ._objectives import Hyperparameters
from ._objectives import LossBreakdown
from ._objectives import cross_entropy
from ._objectives import loss_share
from ._objectives import loss_specific
from ._objectives import matrix_kl
from ._objectives import prediction_kl
from ._taskgen import Dataset
from ._taskgen import SyntheticTaskSpec
from ._taskgen import build_toy_model
from ._taskgen import gen_task
from ._trilora import ResourceDescriptor
from ._trilora import TriLoraLayer
from ._trilora import apply_delta
from ._trilora import delta_matrix
from ._trilora import init_trilora
from ._wire import deserialize_stack
from ._wire import serialize_stack

__title__ = "h2tune"
__version__ = "0.1.0"
__author__ = "Fridolin Pokorny <fridolin.pokorny@gmail.com>"

__all__ = [
    ArchSpec.__name__,
    ClientConfig.__name__,
    ClientModel.__name__,
    ClientRecord.__name__,
    ClientState.__name__,
    Dataset.__name__,
    Experiment.__name__,
    ExperimentManifest.__name__,
    Federation.__name__,
    FederationConfig.__name__,
    H2TuneConfigError.__name__,
    H2TuneException.__name__,
    H2TuneFormatError.__name__,
    H2TuneInputError.__name__,
    H2TuneInvariantViolation.__name__,
    H2TuneNumericDivergence.__name__,
    H2TuneProtocolError.__name__,
    H2TuneShapeError.__name__,
    H2TuneSolverFailure.__name__,
    Hyperparameters.__name__,
    LossBreakdown.__name__,
    PhaseReport.__name__,
    RelationMatrix.__name__,
    ResourceDescriptor.__name__,
    RoundRecord.__name__,
    SharedStack.__name__,
    SyntheticTaskSpec.__name__,
    TriLoraLayer.__name__,
    "ARMS",
    aggregate.__name__,
    apply_arm.__name__,
    apply_delta.__name__,
    build_toy_model.__name__,
    check_gradients.__name__,
    compare_arms.__name__,
    convergence_ratio.__name__,
    cross_entropy.__name__,
    delta_matrix.__name__,
    deserialize_stack.__name__,
    evaluate.__name__,
    gen_task.__name__,
    generalized_gradient.__name__,
    init_relation.__name__,
    init_trilora.__name__,
    joint_step.__name__,
    list_runs.__name__,
    local_round.__name__,
    loss_share.__name__,
    loss_specific.__name__,
    matrix_kl.__name__,
    phase_share_step.__name__,
    phase_specific_step.__name__,
    prediction_kl.__name__,
    proximal_share_step.__name__,
    run_federation.__name__,
    serialize_stack.__name__,
    to_global.__name__,
    to_local.__name__,
]
