"""Exception hierarchy shared by every fedsilo module."""


class FedSiloError(Exception):
    """Base class for all errors raised by fedsilo."""


class RejectedInput(FedSiloError, ValueError):
    """An argument violates an operation's precondition."""


class NumericError(FedSiloError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class ParseError(FedSiloError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(FedSiloError, ValueError):
    pass


class ConfigError(FedSiloError, ValueError):
    pass


class ProtocolError(FedSiloError):
    """A participant broke the synchronous round protocol."""


class SyncTimeoutError(ProtocolError, TimeoutError):
    """The server gave up waiting for a round's local updates."""


class ClientFailure(ProtocolError):
    def __init__(self, client_id, cause):
        super().__init__(f"client {client_id} failed: {cause!r}")
        self.client_id = client_id
        self.cause = cause


class WireFormatError(FedSiloError, ValueError):
    pass


class BadMagicError(WireFormatError):
    pass


class UnsupportedVersionError(WireFormatError):
    pass


class CrcMismatchError(WireFormatError):
    pass


class TruncatedMessageError(WireFormatError):
    pass
