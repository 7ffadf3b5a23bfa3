#!/usr/bin/env python3

import logging
import math
from typing import Sequence
from typing import Tuple
from typing import Union

import attr
import numpy as np
from scipy.special import log_softmax
from scipy.special import logsumexp
from scipy.special import softmax

from ._alignment import SharedStack
from ._exceptions import H2TuneConfigError
from ._exceptions import H2TuneInputError
from ._exceptions import H2TuneShapeError

_LOGGER = logging.getLogger(__name__)

Labels = Union[int, Sequence[int], np.ndarray]


@attr.s(slots=True)
class LossBreakdown:
    """A scalar loss together with the terms it was combined from."""

    total = attr.ib(type=float, kw_only=True)
    ce = attr.ib(type=float, kw_only=True)
    kl_term = attr.ib(type=float, default=0.0, kw_only=True)
    reg = attr.ib(type=float, default=0.0, kw_only=True)

    def non_finite_term(self) -> str:
        """Get the name of the first non-finite term, an empty string if all are finite."""
        for name in ("ce", "kl_term", "reg", "total"):
            if not math.isfinite(getattr(self, name)):
                return name
        return ""


@attr.s(slots=True)
class Hyperparameters:
    """Step sizes, schedule lengths and loss weights of one client."""

    eta = attr.ib(type=float, default=0.05, kw_only=True)
    eta_share = attr.ib(type=float, default=0.05, kw_only=True)
    epochs = attr.ib(type=int, default=1, kw_only=True)
    rounds = attr.ib(type=int, default=1, kw_only=True)
    weight_decay = attr.ib(type=float, default=0.0, kw_only=True)
    kl_weight = attr.ib(type=float, default=1.0, kw_only=True)
    pred_kl_weight = attr.ib(type=float, default=1.0, kw_only=True)
    kl_clamp = attr.ib(type=float, default=10.0, kw_only=True)
    batch_size = attr.ib(type=int, default=16, kw_only=True)
    proximal_steps = attr.ib(type=int, default=0, kw_only=True)

    def __attrs_post_init__(self) -> None:
        # Zero step sizes are accepted to freeze a phase in experiments.
        if self.eta < 0 or self.eta_share < 0:
            raise H2TuneConfigError(
                f"Learning rates must not be negative, got eta={self.eta!r} "
                f"and eta_share={self.eta_share!r}"
            )
        if self.epochs < 1:
            raise H2TuneConfigError(f"Number of local epochs {self.epochs!r} must be >= 1")
        if self.rounds < 0:
            raise H2TuneConfigError(f"Number of rounds {self.rounds!r} must be >= 0")
        for name in ("weight_decay", "kl_weight", "pred_kl_weight", "kl_clamp"):
            if getattr(self, name) < 0:
                raise H2TuneConfigError(
                    f"Hyperparameter {name} must not be negative, got {getattr(self, name)!r}"
                )
        if self.batch_size < 1:
            raise H2TuneConfigError(f"Batch size {self.batch_size!r} must be >= 1")
        if self.proximal_steps < 0:
            raise H2TuneConfigError(
                f"Number of proximal steps {self.proximal_steps!r} must not be negative"
            )


def _check_logits(logits: np.ndarray, labels: Labels) -> Tuple[np.ndarray, np.ndarray]:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if logits.shape[1] < 2:
        raise H2TuneInputError(f"At least two classes are needed, got {logits.shape[1]}")
    if labels.shape != (logits.shape[0],):
        raise H2TuneInputError(
            f"Got {labels.shape[0]} labels for {logits.shape[0]} rows of logits"
        )
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise H2TuneInputError(
            f"Labels {labels.tolist()!r} out of range for {logits.shape[1]} classes"
        )
    if not np.all(np.isfinite(logits)):
        raise H2TuneInputError("Logits contain non-finite values")
    return logits, labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: Labels) -> float:
    """Compute the cross-entropy of softmax(logits), averaged over rows."""
    logits, labels = _check_logits(logits, labels)
    picked = logits[np.arange(len(labels)), labels]
    return float(np.mean(logsumexp(logits, axis=1) - picked))


def cross_entropy_grad(logits: np.ndarray, labels: Labels) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. the logits."""
    logits, labels = _check_logits(logits, labels)
    grad = softmax(logits, axis=1)
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


def _row_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    log_p = log_softmax(p_logits, axis=-1)
    log_q = log_softmax(q_logits, axis=-1)
    kl = np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)
    return np.maximum(kl, 0.0), log_p, log_q


def prediction_kl(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Compute KL(softmax(p) || softmax(q)), averaged over rows."""
    p_logits = np.atleast_2d(np.asarray(p_logits, dtype=np.float64))
    q_logits = np.atleast_2d(np.asarray(q_logits, dtype=np.float64))
    if p_logits.shape != q_logits.shape:
        raise H2TuneShapeError(
            f"Logits of shapes {p_logits.shape} and {q_logits.shape} cannot be compared"
        )

    kl, _, _ = _row_kl(p_logits, q_logits)
    return float(np.mean(kl))


def prediction_kl_grad(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """Gradient of :func:`prediction_kl` w.r.t. ``p_logits``, ``q_logits`` held constant."""
    p_logits = np.atleast_2d(np.asarray(p_logits, dtype=np.float64))
    q_logits = np.atleast_2d(np.asarray(q_logits, dtype=np.float64))
    kl, log_p, log_q = _row_kl(p_logits, q_logits)
    grad = np.exp(log_p) * (log_p - log_q - kl[:, None])
    return grad / p_logits.shape[0]


def _flat_pair(local: SharedStack, reference: SharedStack) -> Tuple[np.ndarray, np.ndarray]:
    if local.depth != reference.depth or local.rank != reference.rank:
        raise H2TuneShapeError(
            f"Stacks of depth/rank {local.depth}/{local.rank} and "
            f"{reference.depth}/{reference.rank} cannot be compared"
        )
    return local.layers.reshape(local.depth, -1), reference.layers.reshape(reference.depth, -1)


def matrix_kl(local: SharedStack, reference: SharedStack) -> float:
    """Mean over layers of the KL divergence between softmax-normalized flattened matrices."""
    p, q = _flat_pair(local, reference)
    kl, _, _ = _row_kl(p, q)
    return float(np.mean(kl))


def matrix_kl_grads(local: SharedStack, reference: SharedStack) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`matrix_kl` w.r.t. the local and the reference stack."""
    p, q = _flat_pair(local, reference)
    kl, log_p, log_q = _row_kl(p, q)
    probs_p = np.exp(log_p)
    grad_local = probs_p * (log_p - log_q - kl[:, None]) / local.depth
    grad_reference = (np.exp(log_q) - probs_p) / local.depth
    return grad_local.reshape(local.layers.shape), grad_reference.reshape(local.layers.shape)


def loss_share(
    logits: np.ndarray,
    labels: Labels,
    local_R: SharedStack,
    ref_R: SharedStack,
    hyper: Hyperparameters,
) -> LossBreakdown:
    """Loss minimized while the task-specific matrices are frozen."""
    ce = cross_entropy(logits, labels)
    kl = matrix_kl(local_R, ref_R)
    return LossBreakdown(total=ce + hyper.kl_weight * kl, ce=ce, kl_term=kl, reg=0.0)


def squared_norm(matrices: Sequence[np.ndarray]) -> float:
    """Sum of squared Frobenius norms."""
    return float(sum(np.sum(m * m) for m in matrices))


def clamped_prediction_kl(logits: np.ndarray, phase1_logits: np.ndarray, clamp: float) -> Tuple[float, bool]:
    """Get the prediction KL capped at ``clamp`` and whether the cap was hit."""
    kl = prediction_kl(logits, phase1_logits)
    if kl > clamp:
        _LOGGER.debug("Prediction KL %g clamped to %g", kl, clamp)
        return clamp, True
    return kl, False


def loss_specific(
    logits: np.ndarray,
    labels: Labels,
    phase1_logits: np.ndarray,
    A_all: Sequence[np.ndarray],
    B_all: Sequence[np.ndarray],
    hyper: Hyperparameters,
) -> LossBreakdown:
    """Loss minimized while the task-shared and relation matrices are frozen."""
    ce = cross_entropy(logits, labels)
    kl, _ = clamped_prediction_kl(logits, phase1_logits, hyper.kl_clamp)
    reg = 0.5 * hyper.weight_decay * (squared_norm(A_all) + squared_norm(B_all))
    return LossBreakdown(
        total=ce - hyper.pred_kl_weight * kl + reg, ce=ce, kl_term=kl, reg=reg
    )
