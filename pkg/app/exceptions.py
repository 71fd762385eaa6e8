from typing import Optional


# ── Base ──────────────────────────────────────────────────────────────────────

class LabError(Exception):
    """Domain failure carrying the process exit code and a readable detail."""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return f"{type(self).__name__}: {self.detail}"


# ── Configuration / precondition errors (exit 2) ──────────────────────────────

class ConfigInvalid(LabError):
    exit_code = 2

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InfeasibleGap(LabError):
    exit_code = 2


class DimensionTooSmall(LabError):
    exit_code = 2


class PermutationInvalid(LabError):
    exit_code = 2


class PartitionInvalid(LabError):
    exit_code = 2


class TooFewTasks(LabError):
    exit_code = 2


class DimensionMismatch(LabError):
    exit_code = 2


class ShapeMismatch(LabError):
    exit_code = 2


class NonIntegerAllocation(LabError):
    exit_code = 2


class DenominatorDomain(LabError):
    exit_code = 2


class NonzeroSigma(LabError):
    exit_code = 2


# ── Runtime degeneracy (exit 3) ───────────────────────────────────────────────

class SingularGram(LabError):
    exit_code = 3


class TooManyDegenerateDraws(LabError):
    exit_code = 3


# ── Verification (exit 4) ─────────────────────────────────────────────────────

class VerificationFailed(LabError):
    exit_code = 4
