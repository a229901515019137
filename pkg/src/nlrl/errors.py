"""Exception hierarchy shared across the package."""

from __future__ import annotations


class NlrlError(Exception):
    pass


class ConfigError(NlrlError):
    """Malformed environment or experiment configuration."""


class UsageError(NlrlError, ValueError):
    """An operation was called outside its preconditions."""


class DivergenceError(NlrlError):
    pass


class ParseError(NlrlError):
    """A model response could not be parsed.

    ``kind`` is ``"no_object"`` or ``"missing_concept"``; ``name`` carries the
    missing concept when relevant.
    """

    def __init__(self, kind: str, message: str, name: str | None = None):
        super().__init__(message)
        self.kind = kind
        self.name = name


class ModeMismatch(NlrlError):
    """Free-text values were fed to the concept aggregator."""


class StateEvaluationFailed(NlrlError):
    def __init__(self, state, message: str, transcripts=()):
        super().__init__(f"evaluation of state {state} failed: {message}")
        self.state = state
        self.transcripts = list(transcripts)


class ImprovementFailed(NlrlError):
    def __init__(self, state, message: str, transcripts=()):
        super().__init__(f"improvement at state {state} failed: {message}")
        self.state = state
        self.transcripts = list(transcripts)


class ReplayMiss(NlrlError):
    def __init__(self, prompt_hash: str):
        super().__init__(f"no cached transcript for prompt hash {prompt_hash}")
        self.prompt_hash = prompt_hash


class UpstreamUnavailable(NlrlError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class PersistenceCorrupt(NlrlError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: corrupt transcript line ({reason})")
        self.path = path
        self.line = line


class SweepFailed(NlrlError):
    """An evaluation or improvement sweep aborted; ``partial`` holds what was computed."""

    def __init__(self, state, cause: Exception, partial=None):
        super().__init__(f"sweep aborted at state {state}: {cause}")
        self.state = state
        self.cause = cause
        self.partial = partial or {}
