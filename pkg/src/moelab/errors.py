"""Exception types shared across the package.

Every deliberate contract failure raises one of these rather than a bare
AssertionError, so the CLI can map any expected failure to a single-line
diagnostic and a nonzero exit code.
"""

from __future__ import annotations


class MoelabError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ShapeError(MoelabError):
    """Operands have incompatible shapes. The message names both shapes."""


class InputError(MoelabError):
    """Caller-supplied data is malformed (bad token ids, bad dtypes, ...)."""


class ConfigError(MoelabError):
    """A configuration value or file violates its documented constraints."""


class ContractError(MoelabError):
    """An internal precondition was violated (empty mask, non-scalar loss, ...)."""


class TrainingAbort(MoelabError):
    """Training stopped because a loss term became non-finite.

    `term` names the offending loss component so the failure is actionable.
    """

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term {term!r}: {value!r}")


class CheckpointError(MoelabError):
    """A checkpoint file is unreadable, corrupt, or has the wrong version."""
