#!/usr/bin/env python3

from typing import Optional


class H2TuneException(Exception):
    """A base class in the exceptions hierarchy for implementing exceptions."""


class H2TuneConfigError(H2TuneException):
    """An exception raised on an invalid configuration or hyperparameter."""


class H2TuneShapeError(H2TuneException):
    """An exception raised when stacks, relation matrices or layers do not line up."""


class H2TuneInputError(H2TuneException):
    """An exception raised on invalid numeric input, such as labels out of range."""


class H2TuneNumericDivergence(H2TuneException):
    """An exception raised when a loss or a gradient stops being finite."""

    def __init__(
        self,
        message: str,
        *,
        term: str,
        client_id: Optional[int] = None,
        round_index: Optional[int] = None,
    ) -> None:
        super().__init__(message)
        self.term = term
        self.client_id = client_id
        self.round_index = round_index

    def __str__(self) -> str:
        where = []
        if self.round_index is not None:
            where.append(f"round {self.round_index}")
        if self.client_id is not None:
            where.append(f"client {self.client_id}")

        message = super().__str__()
        return f"{message} ({', '.join(where)})" if where else message


class H2TuneSolverFailure(H2TuneException):
    """An exception raised when the proximal inner solve increases its objective."""


class H2TuneProtocolError(H2TuneException):
    """An exception raised when a client upload does not match the federation shape."""

    def __init__(self, message: str, *, client_id: int) -> None:
        super().__init__(message)
        self.client_id = client_id


class H2TuneFormatError(H2TuneException):
    """An exception raised on malformed serialized stacks."""

    def __init__(self, message: str, *, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class H2TuneInvariantViolation(H2TuneException):
    """An exception raised when a training invariant does not hold."""
