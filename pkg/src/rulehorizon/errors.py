"""Exception hierarchy shared by all subsystems.

Exit-code mapping used by the CLI: usage problems exit 1, data/format
problems exit 2, runtime failures exit 3.
"""

from __future__ import annotations


class RuleHorizonError(Exception):
    """Base class for all package errors."""


class FormatError(RuleHorizonError):
    """Malformed input file (missing column, bad header, bad version line)."""


class DataError(RuleHorizonError):
    """Well-formed input with inconsistent content (bad frames, unknown lane)."""


class ConfigError(RuleHorizonError):
    """Invalid or unknown configuration key/value."""


class GenerationError(RuleHorizonError):
    """Synthetic scenario spec cannot be realised (vehicles do not fit)."""


class OutOfDomainError(RuleHorizonError):
    """Query position outside the road reference domain."""


class PredicateLookupError(RuleHorizonError):
    """Unknown predicate name."""


class InvalidTimestepError(RuleHorizonError):
    """Temporal operator evaluated where history is insufficient."""


class StateError(RuleHorizonError):
    """Required vehicle state absent (e.g. ego missing at requested time)."""


class PlannerFailure(RuleHorizonError):
    """No feasible, collision-free candidate survived; episode must end."""


class TrainingError(RuleHorizonError):
    """Non-finite gradient or loss encountered during an update."""
