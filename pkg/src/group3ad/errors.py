"""Exception hierarchy.

Everything raised on purpose derives from ``Group3ADError``. ``DataError``
marks problems with input data or model state (the CLI maps those to exit
status 2); ``UsageError`` marks bad invocations (exit status 1).
"""


class Group3ADError(Exception):
    pass


class UsageError(Group3ADError):
    pass


class DataError(Group3ADError):
    pass


class PlyError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class MalformedHeader(PlyError):
    pass


class UnsupportedFormat(PlyError):
    pass


class TruncatedBody(PlyError):
    pass


class PreconditionError(DataError, ValueError):
    pass


class DegenerateCloud(DataError):
    pass


class MissingNormals(DataError):
    pass


class NotNormalized(DataError):
    pass


class ZeroVector(DataError):
    pass


class TooFewRows(DataError):
    pass


class DegenerateCenters(DataError):
    pass


class DivergedLoss(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyBank(DataError):
    pass


class OneClassOnly(DataError):
    pass


class NoPositives(DataError):
    pass


class UnknownVerb(UsageError):
    pass


class MissingFlag(UsageError):
    def __init__(self, flag):
        super().__init__(f"missing required flag {flag}")
        self.flag = flag
