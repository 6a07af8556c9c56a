"""Exception hierarchy shared by all protocol layers."""


class OrionError(Exception):
    pass


class InsufficientQuorum(OrionError):
    pass


class MixedPayload(OrionError):
    pass


class ForeignSigner(OrionError):
    pass


class InvalidCert(OrionError):
    pass


class NotLeader(OrionError):
    pass


class InsufficientNewViews(OrionError):
    pass


class NotDisseminator(OrionError):
    pass


class MatchFailed(OrionError):
    pass


class LocalQuorumTimeout(OrionError):
    pass


class BadExtension(OrionError):
    pass


class ViewMismatch(OrionError):
    pass


class NullProposal(OrionError):
    pass


class BadCertificate(OrionError):
    pass


class BadConfirmation(OrionError):
    pass


class InsufficientContributors(OrionError):
    pass


class MissingBlockData(OrionError):
    def __init__(self, missing):
        super().__init__(f"{len(missing)} block(s) unavailable")
        self.missing = tuple(missing)


class ConfigInvalid(OrionError):
    pass


class BudgetExceeded(OrionError):
    """A fault plan asks for more faults than the model tolerates."""
