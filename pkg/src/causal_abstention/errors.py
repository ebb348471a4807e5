"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AbstentionError(Exception):
    """Base class for all errors raised by this package."""


class EmptyEvidence(AbstentionError):
    """A decision set holds no valid (non-invalid) samples to reason from."""


class ConditionMismatch(AbstentionError, ValueError):
    """A decision set was supplied under the wrong sampling condition."""


class MissingField(AbstentionError, ValueError):
    """A prompt template substitution is required but absent."""


class BackendUnavailable(AbstentionError):
    """The completion backend failed after the configured retry budget."""


class AuthFailure(AbstentionError):
    """The completion backend rejected the configured credentials."""


class ScriptExhausted(AbstentionError):
    """A scripted backend received a request with no matching scripted response."""


class ParseError(AbstentionError, ValueError):
    """An input file violates its schema. Carries location context in the message."""


class EmptyDataset(AbstentionError):
    """A dataset file produced zero usable instances."""


class UnknownLanguage(AbstentionError, KeyError):
    """A language code or name is not in the shipped registry."""


class UnknownSetting(AbstentionError, KeyError):
    """A related-language group selector is not recognized."""


class MissingGold(AbstentionError, KeyError):
    """A result references an instance id with no gold label."""


class EmptyInput(AbstentionError, ValueError):
    """An aggregate metric was requested over an empty collection."""


class ConfigError(AbstentionError, ValueError):
    """The run configuration is invalid. Message names the offending field."""


class ResultNotFound(AbstentionError):
    """A persisted instance result does not exist in the run directory."""
