"""Exception hierarchy shared across the package."""


class RobustSynthError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RobustSynthError):
    pass


class TaskSetupError(RobustSynthError):
    pass


class ProtocolError(RobustSynthError):
    """An episode was driven outside its legal lifecycle."""


class IntegrityError(RobustSynthError):
    """Stored data failed a checksum or referential check."""


class ExpansionRefused(RobustSynthError):
    pass


class IncompleteJudgment(RobustSynthError):
    pass


class PreconditionViolation(RobustSynthError):
    pass


class ContractViolation(RobustSynthError):
    pass


class JudgeUnavailable(RobustSynthError):
    """A remote oracle could not produce a verdict."""


class MixtureInfeasible(RobustSynthError):
    def __init__(self, side: str, need: int, have: int):
        super().__init__(f"mixture needs {need} {side} instances, pool has {have}")
        self.side = side
        self.need = need
        self.have = have


class CaseRejected(RobustSynthError):
    pass


class CaseInvalid(RobustSynthError):
    """Replay of a test case did not reproduce its recorded hashes."""


class IncompleteResults(RobustSynthError):
    pass


class NotFound(RobustSynthError):
    pass
