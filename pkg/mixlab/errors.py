# mixlab/errors.py
"""Exception hierarchy. `exit_code` is what cli.run returns when the error escapes a stage."""
from typing import Optional


class MixlabError(Exception):
    exit_code = 1


class ConfigError(MixlabError):
    exit_code = 3


class CertificateFailure(MixlabError):
    """A hypothesis or certificate was numerically refuted."""
    exit_code = 2


# ---------------- measures ---------------- #
class MismatchedSupport(MixlabError):
    pass


class EmptyMeasure(MixlabError):
    pass


class SolverFailure(MixlabError):
    pass


class SampleOutOfBox(MixlabError):
    def __init__(self, index: int, message: Optional[str] = None):
        self.index = int(index)
        super().__init__(message or f"sample {self.index} lies outside the box")


# ---------------- dynamics ---------------- #
class LeftInvariantSet(MixlabError):
    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"{message} (step {index})"
        super().__init__(message)


class Blowup(MixlabError):
    pass


class NotDissipative(CertificateFailure):
    pass


class BudgetExceeded(CertificateFailure):
    pass


# ---------------- markov noise ---------------- #
class DegenerateDensity(MixlabError):
    pass


class ResolutionTooCoarse(MixlabError):
    pass


class MinorizationFails(CertificateFailure):
    pass


# ---------------- reduction ---------------- #
class MismatchedBuffers(MixlabError):
    pass


# ---------------- pushforward ---------------- #
class NewtonDivergence(MixlabError):
    pass


class SurjectivityLost(MixlabError):
    pass


class NotLocallyInjective(MixlabError):
    pass


class EpsilonTooLarge(MixlabError):
    pass


# ---------------- mixing ---------------- #
class InsufficientDecorrelation(MixlabError):
    pass


class TooFewPoints(MixlabError):
    pass


class CertificateContradicted(CertificateFailure):
    def __init__(self, message: str, certificate=None):
        self.certificate = certificate
        super().__init__(message)


class EmptyMinorization(CertificateFailure):
    pass


__all__ = [
    "MixlabError",
    "ConfigError",
    "CertificateFailure",
    "MismatchedSupport",
    "EmptyMeasure",
    "SolverFailure",
    "SampleOutOfBox",
    "LeftInvariantSet",
    "Blowup",
    "NotDissipative",
    "BudgetExceeded",
    "DegenerateDensity",
    "ResolutionTooCoarse",
    "MinorizationFails",
    "MismatchedBuffers",
    "NewtonDivergence",
    "SurjectivityLost",
    "NotLocallyInjective",
    "EpsilonTooLarge",
    "InsufficientDecorrelation",
    "TooFewPoints",
    "CertificateContradicted",
    "EmptyMinorization",
]
