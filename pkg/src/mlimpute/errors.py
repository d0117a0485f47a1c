"""Exception hierarchy.

Every error carries a stable ``code`` string so the command-line layer can
report failures as machine-readable JSON.
"""


class MLImputeError(Exception):
    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


# -- linear algebra ---------------------------------------------------------

class ZeroMatrix(MLImputeError):
    code = "zero_matrix"


class NonConvergence(MLImputeError):
    """Power iteration hit ``max_iter`` before the residual test passed."""

    code = "non_convergence"

    def __init__(self, message, index=None, iterate=None):
        super().__init__(message)
        self.index = index
        self.iterate = iterate


class InvalidRank(MLImputeError, ValueError):
    code = "invalid_rank"


class RankTooLarge(InvalidRank):
    code = "rank_too_large"


# -- encoding ---------------------------------------------------------------

class UnknownCategory(MLImputeError, ValueError):
    code = "unknown_category"

    def __init__(self, label, column):
        super().__init__(f"unknown category {label!r} in column {column!r}")
        self.label = label
        self.column = column


class EmptyCategory(MLImputeError):
    code = "empty_category"


class SingularWeight(MLImputeError):
    code = "singular_weight"


class ZeroVariance(MLImputeError):
    code = "zero_variance"

    def __init__(self, column):
        super().__init__(f"column {column!r} has zero variance")
        self.column = column


class ConstantComponent(MLImputeError, ValueError):
    code = "constant_component"


# -- data / imputation ------------------------------------------------------

class InvalidSchema(MLImputeError, ValueError):
    code = "invalid_schema"


class SchemaMismatch(MLImputeError):
    code = "schema_mismatch"


class ParseError(MLImputeError):
    code = "parse_error"

    def __init__(self, line, column, reason):
        super().__init__(f"line {line}, column {column!r}: {reason}")
        self.line = line
        self.column = column
        self.reason = reason


class EmptyColumn(MLImputeError):
    code = "empty_column"


class EmptyGroup(MLImputeError):
    code = "empty_group"


class InvalidConfig(MLImputeError, ValueError):
    code = "invalid_config"


class MaskInfeasible(MLImputeError):
    code = "mask_infeasible"


class EmptyEvaluationSet(MLImputeError):
    code = "empty_evaluation_set"


# -- distributed ------------------------------------------------------------

class ProtocolError(MLImputeError):
    code = "protocol_error"


class ProtocolViolation(ProtocolError):
    code = "protocol_violation"

    def __init__(self, kind, round, reason=""):
        msg = f"protocol violation on {kind} (round {round})"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.kind = kind
        self.round = round


class WorkerDropped(ProtocolError):
    code = "worker_dropped"

    def __init__(self, site):
        super().__init__(f"worker {site} dropped")
        self.site = site


class ConnectionLost(ProtocolError):
    code = "connection_lost"


class MalformedMessage(ProtocolError):
    code = "malformed_message"

    def __init__(self, reason, offset=0):
        super().__init__(f"{reason} (byte offset {offset})")
        self.offset = offset


class SessionAborted(ProtocolError):
    """Raised on a worker when the master ends the session with an error."""

    code = "session_aborted"
