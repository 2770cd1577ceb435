"""Exception hierarchy shared across the broker components."""


class BrokerError(Exception):
    """Base class for every error raised by this package."""

    code = "broker_error"


class TypeMismatch(BrokerError, TypeError):
    code = "type_mismatch"


class NotFound(BrokerError, KeyError):
    code = "not_found"

    def __str__(self) -> str:
        return Exception.__str__(self)


class BudgetRejected(BrokerError):
    code = "budget_rejected"


class UnknownSubscriber(BrokerError):
    code = "unknown_subscriber"


class DuplicateName(BrokerError):
    code = "duplicate_name"


class ThrottledError(BrokerError):
    """An invocation was refused because a runtime limit is saturated."""

    code = "throttled"

    def __init__(self, action: str, limit: str):
        super().__init__(f"{action}: {limit} limit reached")
        self.action = action
        self.limit = limit


class InvocationTimeout(BrokerError, TimeoutError):
    code = "timeout"


class HandlerError(BrokerError):
    """Wraps an exception raised inside an action handler."""

    code = "handler_error"

    def __init__(self, action: str, cause: BaseException, trace: str = ""):
        super().__init__(f"{action}: {type(cause).__name__}: {cause}")
        self.action = action
        self.cause = cause
        self.trace = trace


class AlreadyRegistered(BrokerError):
    code = "already_registered"


class ExceedsProfile(BrokerError):
    code = "exceeds_profile"


class ConservationError(BrokerError):
    code = "conservation_violated"
