"""Exception taxonomy shared across the harness.

Every error the public API can raise lives here so callers can catch one
base class or the precise condition. Names are part of the contract.
"""

from __future__ import annotations


class HarnessError(Exception):
    """Base class for all tunelab errors."""


# -- task registry -----------------------------------------------------------

class DuplicateTaskId(HarnessError):
    pass


class UnresolvableDataDescriptor(HarnessError):
    pass


class NoPrimaryMetric(HarnessError):
    pass


class UnknownTask(HarnessError):
    pass


class UnknownFacet(HarnessError):
    pass


# -- data repository ---------------------------------------------------------

class UnreadableSource(HarnessError):
    pass


class UnparsableFormat(HarnessError):
    pass


class DuplicateSourceId(HarnessError):
    pass


class UnparsableRecord(HarnessError):
    """A single record that cannot be normalized; callers skip and count it."""


class EmptyResult(HarnessError):
    """A data strategy retained zero records."""


class BudgetExceeded(HarnessError):
    """A data strategy asked for more records than the task allows."""


# -- evaluation engine -------------------------------------------------------

class MissingGold(HarnessError):
    pass


class MetricNotRegistered(HarnessError):
    pass


class DuplicateMetricId(HarnessError):
    pass


class MetricFailure(HarnessError):
    """An external metric process exited nonzero or wrote malformed output."""


class RunFinalized(HarnessError):
    """Validation submission after the run was finalized."""


class RunNotFinalizing(HarnessError):
    """Test submission before finalization began."""


class TestAlreadyConsumed(HarnessError):
    """Second test submission; the held-out set is evaluated at most once."""

    __test__ = False  # name starts with Test; keep pytest from collecting it


class RunInactive(HarnessError):
    pass


class BudgetExhausted(HarnessError):
    """Wall-clock or spend budget ran out."""


# -- feedback analyzer -------------------------------------------------------

class EmptyTrajectory(HarnessError):
    """Loss trajectory with fewer than two points cannot be classified."""


# -- sandbox runtime ---------------------------------------------------------

class StorageFailure(HarnessError):
    pass


class DeadlinePassed(HarnessError):
    """No process may start after the wall-clock deadline."""


class SpendLimitExceeded(HarnessError):
    """A charge pushed the ledger past the spend limit; the charge itself
    is still recorded so the ledger stays conservative."""


class WorkspaceViolation(HarnessError):
    """A command was handed a path outside its workspace or read-only mounts."""


# -- llm gateway -------------------------------------------------------------

class GatewayError(HarnessError):
    pass


class AllEndpointsFailed(GatewayError):
    pass


class SchemaViolation(GatewayError):
    """Structured completion still invalid after repair attempts."""


class ScriptExhausted(GatewayError):
    """Scripted backend ran out of canned responses."""


class PromptTooLarge(GatewayError):
    pass
