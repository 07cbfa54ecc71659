"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AuditError(Exception):
    """Base class for all errors raised by invariance_audit."""


class SchemaError(AuditError):
    """A schema row or the schema as a whole violates a structural rule."""

    def __init__(self, message: str, row: int | None = None, rule: str | None = None):
        self.row = row
        self.rule = rule
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(f"{prefix}{message}")


class PairingError(SchemaError):
    """Templates that do not form complete pairs."""

    def __init__(self, orphans: list[str], detail: str = "unpaired templates"):
        self.orphans = sorted(orphans)
        super().__init__(f"{detail}: {', '.join(self.orphans)}", rule="pairing")


class ConfigError(AuditError):
    """Invalid run or backend configuration."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class CollectionError(AuditError):
    """A request could not be completed after exhausting retries."""

    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class BackendHTTPError(CollectionError):
    """Non-success HTTP status from a chat-completions endpoint."""

    def __init__(self, status: int, body: str, attempts: int = 1):
        self.status = status
        self.body_snippet = body[:200]
        super().__init__(f"HTTP {status}: {self.body_snippet!r}", attempts)


class HeaderMismatchError(AuditError):
    """An existing measurement log belongs to a different run."""


class AnalysisError(AuditError):
    """A statistic is undefined for the supplied data."""


class DomainError(AnalysisError, ValueError):
    """Input outside the mathematical domain of an operation."""
