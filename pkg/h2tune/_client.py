#!/usr/bin/env python3

import copy
import logging
import math
from typing import Callable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import attr
import numpy as np

from ._alignment import RelationMatrix
from ._alignment import SharedStack
from ._alignment import generalized_gradient
from ._alignment import relation_gradient
from ._alignment import to_global
from ._alignment import to_local
from ._exceptions import H2TuneConfigError
from ._exceptions import H2TuneInvariantViolation
from ._exceptions import H2TuneNumericDivergence
from ._exceptions import H2TuneSolverFailure
from ._model import ClientModel
from ._model import ForwardCache
from ._model import LayerGrads
from ._objectives import Hyperparameters
from ._objectives import LossBreakdown
from ._objectives import clamped_prediction_kl
from ._objectives import cross_entropy_grad
from ._objectives import loss_share
from ._objectives import loss_specific
from ._objectives import matrix_kl
from ._objectives import matrix_kl_grads
from ._objectives import prediction_kl_grad
from ._taskgen import Dataset
from ._trilora import ResourceDescriptor

_LOGGER = logging.getLogger(__name__)

SCHEDULES = ("alternating", "joint")

Batch = Tuple[np.ndarray, np.ndarray]


@attr.s(slots=True)
class ClientState:
    """Everything one client keeps between rounds."""

    client_id = attr.ib(type=int, kw_only=True)
    model = attr.ib(type=ClientModel, kw_only=True)
    relation = attr.ib(type=RelationMatrix, kw_only=True)
    resource = attr.ib(type=ResourceDescriptor, kw_only=True)
    hyper = attr.ib(type=Hyperparameters, kw_only=True)
    dataset = attr.ib(type=Dataset, kw_only=True)
    seed = attr.ib(type=int, default=0, kw_only=True)
    schedule = attr.ib(type=str, default="alternating", kw_only=True)
    strict = attr.ib(type=bool, default=True, kw_only=True)

    def __attrs_post_init__(self) -> None:
        if self.model.depth != self.relation.local_depth:
            raise H2TuneConfigError(
                f"Client {self.client_id} has {self.model.depth} layers "
                f"but its relation matrix has {self.relation.local_depth} rows"
            )
        if len({layer.rank for layer in self.model.layers}) != 1:
            raise H2TuneConfigError(f"Layers of client {self.client_id} do not share a rank")
        if self.schedule not in SCHEDULES:
            raise H2TuneConfigError(
                f"Unknown schedule {self.schedule!r}, expected one of {SCHEDULES}"
            )


@attr.s(slots=True)
class PhaseReport:
    """Outcome of one optimization phase on one batch."""

    phase = attr.ib(type=str, kw_only=True)
    loss = attr.ib(type=LossBreakdown, kw_only=True)
    shared_change = attr.ib(type=float, default=0.0, kw_only=True)
    specific_change = attr.ib(type=float, default=0.0, kw_only=True)
    samples = attr.ib(type=int, default=0, kw_only=True)
    logits = attr.ib(type=Optional[np.ndarray], default=None, kw_only=True)
    objective_start = attr.ib(type=Optional[float], default=None, kw_only=True)
    objective_end = attr.ib(type=Optional[float], default=None, kw_only=True)


@attr.s(slots=True)
class ClientRecord:
    """Metrics of one client in one round."""

    client_id = attr.ib(type=int, kw_only=True)
    share_loss = attr.ib(type=float, kw_only=True)
    specific_loss = attr.ib(type=float, kw_only=True)
    eval_accuracy = attr.ib(type=float, kw_only=True)
    gg_sq = attr.ib(type=float, kw_only=True)

    @property
    def gg_norm(self) -> float:
        """Root mean squared generalized-gradient norm over the local epochs."""
        return math.sqrt(self.gg_sq)


@attr.s(slots=True)
class _ShareGradients:
    breakdown = attr.ib(type=LossBreakdown)
    layer_grads = attr.ib(type=List[LayerGrads])
    ce_R = attr.ib(type=List[np.ndarray])
    R = attr.ib(type=List[np.ndarray])
    omega = attr.ib(type=np.ndarray)
    reference = attr.ib(type=SharedStack)


def _diverged(state: ClientState, term: str) -> H2TuneNumericDivergence:
    return H2TuneNumericDivergence(
        f"Non-finite {term} on client {state.client_id}",
        term=term,
        client_id=state.client_id,
    )


def _check_finite(state: ClientState, term: str, arrays: Sequence[np.ndarray]) -> None:
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise _diverged(state, term)


def _forward(state: ClientState, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    logits, cache = state.model.forward(x)
    _check_finite(state, "logits", [logits])
    return logits, cache


def _share_gradients(state: ClientState, R_ref: SharedStack, x: np.ndarray, y: np.ndarray) -> _ShareGradients:
    logits, cache = _forward(state, x)
    local = state.model.shared_stack()
    reference = to_local(R_ref, state.relation)

    breakdown = loss_share(logits, y, local, reference, state.hyper)
    term = breakdown.non_finite_term()
    if term:
        raise _diverged(state, f"share loss {term}")

    layer_grads = state.model.backward(cache, cross_entropy_grad(logits, y))
    grad_local, grad_reference = matrix_kl_grads(local, reference)
    kl_weight = state.hyper.kl_weight

    ce_R = [
        np.where(layer.mask, grads.middle, 0.0)
        for layer, grads in zip(state.model.layers, layer_grads)
    ]
    grad_R = [g + kl_weight * grad_local[idx] for idx, g in enumerate(ce_R)]
    grad_omega = kl_weight * relation_gradient(SharedStack(grad_reference), R_ref)

    _check_finite(state, "gradient of R", grad_R)
    _check_finite(state, "gradient of omega", [grad_omega])
    return _ShareGradients(breakdown, layer_grads, ce_R, grad_R, grad_omega, reference)


def _specific_gradients(
    state: ClientState, phase1_logits: np.ndarray, x: np.ndarray, y: np.ndarray
) -> Tuple[LossBreakdown, List[np.ndarray], List[np.ndarray]]:
    logits, cache = _forward(state, x)
    hyper = state.hyper
    layers = state.model.layers

    breakdown = loss_specific(
        logits, y, phase1_logits, [l.A for l in layers], [l.B for l in layers], hyper
    )
    term = breakdown.non_finite_term()
    if term:
        raise _diverged(state, f"specific loss {term}")

    grad_logits = cross_entropy_grad(logits, y)
    _, clamped = clamped_prediction_kl(logits, phase1_logits, hyper.kl_clamp)
    if not clamped and hyper.pred_kl_weight:
        grad_logits = grad_logits - hyper.pred_kl_weight * prediction_kl_grad(logits, phase1_logits)

    layer_grads = state.model.backward(cache, grad_logits)
    grad_A = [g.A + hyper.weight_decay * l.A for g, l in zip(layer_grads, layers)]
    grad_B = [g.B + hyper.weight_decay * l.B for g, l in zip(layer_grads, layers)]

    _check_finite(state, "gradient of A", grad_A)
    _check_finite(state, "gradient of B", grad_B)
    return breakdown, grad_A, grad_B


def _step_shared(state: ClientState, grad_R: Sequence[np.ndarray], grad_omega: np.ndarray) -> float:
    """Apply masked descent on R and plain descent on omega, return the change norm."""
    eta = state.hyper.eta_share
    if eta == 0.0:
        return 0.0

    change_sq = 0.0
    for layer, grad in zip(state.model.layers, grad_R):
        step = eta * grad[layer.mask]
        layer.R[layer.mask] -= step
        change_sq += float(np.sum(step * step))

    step = eta * grad_omega
    state.relation.omega -= step
    return math.sqrt(change_sq + float(np.sum(step * step)))


def _step_specific(state: ClientState, grad_A: Sequence[np.ndarray], grad_B: Sequence[np.ndarray]) -> float:
    eta = state.hyper.eta
    if eta == 0.0:
        return 0.0

    change_sq = 0.0
    for layer, g_a, g_b in zip(state.model.layers, grad_A, grad_B):
        layer.A -= eta * g_a
        layer.B -= eta * g_b
        change_sq += float(np.sum(g_a * g_a) + np.sum(g_b * g_b)) * eta * eta
    return math.sqrt(change_sq)


def _verify_unchanged(state: ClientState, what: str, before: bytes, after: bytes) -> None:
    if before != after:
        raise H2TuneInvariantViolation(
            f"Frozen {what} of client {state.client_id} changed during an update"
        )


def _shared_snapshot(state: ClientState) -> bytes:
    return state.model.shared_bytes() + state.relation.omega.tobytes()


def phase_share_step(state: ClientState, R_ref: SharedStack, batch: Batch) -> PhaseReport:
    """Update R (masked) and omega on the share loss while A and B stay frozen.

    The returned report carries the logits recomputed after the update, used as the
    constant reference of the following specific phase.
    """
    x, y = batch
    before = state.model.specific_bytes() if state.strict else b""

    grads = _share_gradients(state, R_ref, x, y)
    change = _step_shared(state, grads.R, grads.omega)
    logits, _ = _forward(state, x)

    if state.strict:
        _verify_unchanged(state, "task-specific matrices", before, state.model.specific_bytes())

    _LOGGER.debug(
        "Client %d share phase: loss %.6g (ce %.6g, kl %.6g), change %.3g",
        state.client_id,
        grads.breakdown.total,
        grads.breakdown.ce,
        grads.breakdown.kl_term,
        change,
    )
    return PhaseReport(
        phase="share",
        loss=grads.breakdown,
        shared_change=change,
        samples=len(y),
        logits=logits,
    )


def phase_specific_step(state: ClientState, phase1_logits: np.ndarray, batch: Batch) -> PhaseReport:
    """Update A and B on the specific loss while R, omega and the masks stay frozen."""
    x, y = batch
    before = _shared_snapshot(state) if state.strict else b""

    breakdown, grad_A, grad_B = _specific_gradients(state, phase1_logits, x, y)
    change = _step_specific(state, grad_A, grad_B)

    if state.strict:
        _verify_unchanged(state, "task-shared matrices", before, _shared_snapshot(state))

    _LOGGER.debug(
        "Client %d specific phase: loss %.6g (ce %.6g, kl %.6g, reg %.6g), change %.3g",
        state.client_id,
        breakdown.total,
        breakdown.ce,
        breakdown.kl_term,
        breakdown.reg,
        change,
    )
    return PhaseReport(phase="specific", loss=breakdown, specific_change=change, samples=len(y))


def joint_step(state: ClientState, R_ref: SharedStack, batch: Batch) -> PhaseReport:
    """Update all adapter parameters at once on the share loss.

    A and B follow the cross-entropy gradient of the same forward pass, the
    specific loss with its weight decay and prediction KL is not used.
    """
    x, y = batch

    grads = _share_gradients(state, R_ref, x, y)
    grad_A = [g.A for g in grads.layer_grads]
    grad_B = [g.B for g in grads.layer_grads]

    shared_change = _step_shared(state, grads.R, grads.omega)
    specific_change = _step_specific(state, grad_A, grad_B)
    return PhaseReport(
        phase="joint",
        loss=grads.breakdown,
        shared_change=shared_change,
        specific_change=specific_change,
        samples=len(y),
    )


def proximal_objective(
    linear: np.ndarray,
    R: np.ndarray,
    R_prev: np.ndarray,
    reference: SharedStack,
    kl_weight: float,
    eta_share: float,
) -> float:
    """Evaluate ``<linear, R> + kl_weight * matrix_kl(R, reference) + |R - R_prev|^2 / eta_share``."""
    diff = R - R_prev
    return float(
        np.sum(linear * R)
        + kl_weight * matrix_kl(SharedStack(R), reference)
        + np.sum(diff * diff) / eta_share
    )


def proximal_share_step(
    state: ClientState, R_ref: SharedStack, batch: Batch, inner_steps: int
) -> PhaseReport:
    """Replace a share-phase gradient step on R by an approximate proximal step.

    The linear term is the masked cross-entropy gradient at the current R; the
    matrix KL towards the projected global stack is kept as it is. The inner
    problem is solved by gradient descent with backtracking, omega takes a plain
    gradient step.
    """
    if inner_steps < 1:
        raise H2TuneConfigError(f"Number of inner proximal steps {inner_steps!r} must be >= 1")

    x, y = batch
    hyper = state.hyper
    before = state.model.specific_bytes() if state.strict else b""

    grads = _share_gradients(state, R_ref, x, y)
    masks = state.model.mask_stack()
    linear = np.stack(grads.ce_R)
    R_prev = state.model.shared_stack().layers
    eta = hyper.eta_share

    if eta == 0.0:
        # Infinite proximal weight, R_prev is the only minimizer.
        logits, _ = _forward(state, x)
        return PhaseReport(phase="proximal", loss=grads.breakdown, samples=len(y), logits=logits)

    def objective(R: np.ndarray) -> float:
        return proximal_objective(linear, R, R_prev, grads.reference, hyper.kl_weight, eta)

    def gradient(R: np.ndarray) -> np.ndarray:
        grad_kl, _ = matrix_kl_grads(SharedStack(R), grads.reference)
        return linear + hyper.kl_weight * grad_kl + 2.0 * (R - R_prev) / eta

    start = objective(R_prev)
    R = R_prev.copy()
    value = start
    for _ in range(inner_steps):
        grad = gradient(R)
        step = 1.0 / (2.0 / eta + hyper.kl_weight)
        while step > 1e-12:
            candidate = R.copy()
            candidate[masks] -= step * grad[masks]
            candidate_value = objective(candidate)
            if candidate_value <= value:
                R, value = candidate, candidate_value
                break
            step /= 2.0
        else:
            break

    if not math.isfinite(value) or value > start:
        raise H2TuneSolverFailure(
            f"Proximal objective of client {state.client_id} increased from {start!r} to {value!r}"
        )

    for layer, updated in zip(state.model.layers, R):
        layer.R[layer.mask] = updated[layer.mask]
    omega_step = eta * grads.omega
    state.relation.omega -= omega_step
    logits, _ = _forward(state, x)

    if state.strict:
        _verify_unchanged(state, "task-specific matrices", before, state.model.specific_bytes())

    _LOGGER.debug(
        "Client %d proximal step: objective %.6g -> %.6g", state.client_id, start, value
    )
    return PhaseReport(
        phase="proximal",
        loss=grads.breakdown,
        shared_change=math.sqrt(float(np.sum((R - R_prev) ** 2) + np.sum(omega_step**2))),
        samples=len(y),
        logits=logits,
        objective_start=start,
        objective_end=value,
    )


def evaluate(state: ClientState) -> float:
    """Get the accuracy of the client model on its test split."""
    logits = state.model.logits(state.dataset.x_test)
    return float(np.mean(np.argmax(logits, axis=1) == state.dataset.y_test))


def local_round(
    state: ClientState,
    R_global: SharedStack,
    epochs: Optional[int] = None,
    *,
    round_index: int = 0,
) -> Tuple[ClientState, SharedStack, ClientRecord]:
    """Run one round of local training and return the aligned upload."""
    epochs = state.hyper.epochs if epochs is None else epochs
    if epochs < 1:
        raise H2TuneConfigError(f"Number of local epochs {epochs!r} must be >= 1")

    hyper = state.hyper
    n = len(state.dataset.y_train)
    share_losses: List[float] = []
    specific_losses: List[float] = []
    gg_sq: List[float] = []

    for epoch in range(epochs):
        order = np.random.default_rng([state.seed, round_index, epoch]).permutation(n)
        batches = list(state.dataset.batches(hyper.batch_size, order))
        R_before = state.model.shared_stack()

        for idx, batch in enumerate(batches):
            if state.schedule == "joint":
                report = joint_step(state, R_global, batch)
                share_losses.append(report.loss.total)
                specific_losses.append(report.loss.total)
                continue

            last = epoch == epochs - 1 and idx == len(batches) - 1
            if last and hyper.proximal_steps:
                share = proximal_share_step(state, R_global, batch, hyper.proximal_steps)
            else:
                share = phase_share_step(state, R_global, batch)
            specific = phase_specific_step(state, share.logits, batch)
            share_losses.append(share.loss.total)
            specific_losses.append(specific.loss.total)

        if hyper.eta_share > 0.0:
            gg_sq.append(
                generalized_gradient(R_before, state.model.shared_stack(), hyper.eta_share) ** 2
            )
        else:
            gg_sq.append(0.0)

    upload = to_global(state.model.shared_stack(), state.relation)
    record = ClientRecord(
        client_id=state.client_id,
        share_loss=float(np.mean(share_losses)),
        specific_loss=float(np.mean(specific_losses)),
        eval_accuracy=evaluate(state),
        gg_sq=float(np.mean(gg_sq)),
    )
    _LOGGER.debug(
        "Client %d finished round %d: share %.6g, specific %.6g, accuracy %.4f",
        state.client_id,
        round_index,
        record.share_loss,
        record.specific_loss,
        record.eval_accuracy,
    )
    return state, upload, record


def _finite_difference(
    params: Sequence[np.ndarray], objective: Callable[[], float], step: float
) -> List[np.ndarray]:
    result = []
    for param in params:
        grad = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + step
            plus = objective()
            param[idx] = original - step
            minus = objective()
            param[idx] = original
            grad[idx] = (plus - minus) / (2.0 * step)
        result.append(grad)
    return result


def _relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    a = np.concatenate([g.ravel() for g in analytic])
    f = np.concatenate([g.ravel() for g in numeric])
    error = float(np.linalg.norm(a - f))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(f)))
    return error / scale if scale > 1e-10 else error


def check_gradients(
    state: ClientState,
    batch: Batch,
    *,
    R_ref: Optional[SharedStack] = None,
    reference_logits: Optional[np.ndarray] = None,
    step: float = 1e-6,
) -> float:
    """Compare analytic gradients of both losses against central finite differences.

    Gradients of the share loss are checked w.r.t. R and omega, gradients of the
    specific loss w.r.t. A and B. The state itself is not modified.
    """
    work = copy.deepcopy(state)
    work.strict = False
    x, y = batch
    model = work.model
    ref_stack = R_ref if R_ref is not None else SharedStack.zeros(work.relation.global_depth, model.rank)
    fixed_logits = reference_logits if reference_logits is not None else model.logits(x)

    def share_objective() -> float:
        reference = to_local(ref_stack, work.relation)
        return loss_share(model.logits(x), y, model.shared_stack(), reference, work.hyper).total

    def specific_objective() -> float:
        return loss_specific(
            model.logits(x),
            y,
            fixed_logits,
            [l.A for l in model.layers],
            [l.B for l in model.layers],
            work.hyper,
        ).total

    share = _share_gradients(work, ref_stack, x, y)
    _, grad_A, grad_B = _specific_gradients(work, fixed_logits, x, y)

    errors = {
        "R": _relative_error(
            share.R, _finite_difference([l.R for l in model.layers], share_objective, step)
        ),
        "omega": _relative_error(
            [share.omega], _finite_difference([work.relation.omega], share_objective, step)
        ),
        "A": _relative_error(
            grad_A, _finite_difference([l.A for l in model.layers], specific_objective, step)
        ),
        "B": _relative_error(
            grad_B, _finite_difference([l.B for l in model.layers], specific_objective, step)
        ),
    }
    _LOGGER.debug("Gradient check of client %d: %s", state.client_id, errors)
    return max(errors.values())
