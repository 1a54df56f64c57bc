"""Exception hierarchy shared by every engine component.

Each error carries a stable ``code`` string so the gateway can map it onto
wire responses without string-matching messages.
"""

from __future__ import annotations


class PrismError(Exception):
    """Base class for all engine errors."""

    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


# --- registry / model lookups ------------------------------------------------

class UnknownUser(PrismError):
    code = "unknown-user"


class UnknownCircle(PrismError):
    code = "unknown-circle"


class UnknownRole(PrismError):
    code = "unknown-role"


class UnknownGroup(PrismError):
    code = "unknown-group"


class UnknownMessage(PrismError):
    code = "unknown-message"


class UnknownAsn(PrismError):
    code = "unknown-asn"


class UnknownAction(PrismError):
    code = "unknown-action"


class DuplicateId(PrismError):
    code = "duplicate-id"


# --- hierarchy construction --------------------------------------------------

class ParentNotSubdomain(PrismError):
    code = "parent-not-subdomain"


class SecondRoot(PrismError):
    code = "second-root"


class InvalidParentKind(PrismError):
    code = "invalid-parent-kind"


class ForeignParent(PrismError):
    code = "foreign-parent"


class HierarchyCycle(PrismError):
    code = "hierarchy-cycle"


# --- privileges / gating -----------------------------------------------------

class PrivilegeDenied(PrismError):
    code = "privilege-denied"


class CrossAsn(PrismError):
    code = "cross-asn"


class TaggingDenied(PrismError):
    code = "tagging-denied"


class TagConflictOverlap(PrismError):
    code = "tag-conflict-overlap"


class InvalidCircle(PrismError):
    code = "invalid-circle"


# --- rule language -----------------------------------------------------------

class RuleSyntaxError(PrismError):
    """Rule text failed to parse; ``position`` is the 0-based column."""

    code = "rule-syntax-error"

    def __init__(self, message: str, position: int = 0):
        super().__init__(f"{message} (at column {position})")
        self.raw_message = message
        self.position = position


class UnknownPredicateKind(RuleSyntaxError):
    code = "unknown-predicate-kind"


# --- store -------------------------------------------------------------------

class DuplicateIdDifferentContent(PrismError):
    code = "duplicate-id-different-content"


class CorruptRecord(PrismError):
    code = "corrupt-record"


# --- federation --------------------------------------------------------------

class DuplicateLink(PrismError):
    code = "duplicate-link"


class HandshakeFailed(PrismError):
    code = "handshake-failed"


class UnpairedOrigin(PrismError):
    code = "unpaired-origin"


class AuthFailed(PrismError):
    code = "auth-failed"


class RemoteUnavailable(PrismError):
    code = "remote-unavailable"


class AuthorNotLocal(PrismError):
    code = "author-not-local"


# --- gateway -----------------------------------------------------------------

class AuthRequired(PrismError):
    code = "auth-required"
