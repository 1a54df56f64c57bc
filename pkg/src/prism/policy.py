"""Circle policy rule language: parsing, printing and evaluation.

A policy is an ordered list of rules, one per line:

    allow <- reader-member-of(org/C2)
    deny  <- reader-is(org/mallory) and message-tagged-with(org/C1)

Grammar::

    rule := ("allow" | "deny") "<-" pred ("and" pred)*
    pred := kind "(" arg ")"

``#`` starts a comment that runs to the end of the line.  A policy set is
satisfied when at least one allow-rule holds and no deny-rule holds; the
empty set is never satisfied (closed by default); deny overrides allow.

Evaluation is pure: predicates only inspect the access context, never
mutate it.  References to circles that no longer resolve evaluate to
false and are logged, so deleting a circle can never widen access.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import RuleSyntaxError, UnknownPredicateKind
from .ids import asn_of

logger = logging.getLogger(__name__)

ALLOW = "allow"
DENY = "deny"

#: Supported predicate kinds and what their argument refers to.
PREDICATE_KINDS = {
    "author-is": "user",
    "reader-is": "user",
    "author-member-of": "circle",
    "reader-member-of": "circle",
    "message-tagged-with": "circle",
    "reader-in-asn": "asn",
    "author-in-asn": "asn",
}


@dataclass(frozen=True)
class Predicate:
    kind: str
    arg: str

    def __post_init__(self):
        if self.kind not in PREDICATE_KINDS:
            raise UnknownPredicateKind(f"unknown predicate kind {self.kind!r}")


@dataclass(frozen=True)
class Rule:
    effect: str  # ALLOW or DENY
    predicates: tuple[Predicate, ...]

    def __post_init__(self):
        if self.effect not in (ALLOW, DENY):
            raise ValueError(f"rule effect must be allow or deny, got {self.effect!r}")
        if not self.predicates:
            raise ValueError("rule body must contain at least one predicate")


@dataclass(frozen=True)
class PolicySet:
    rules: tuple[Rule, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.rules)

    def with_rule(self, rule: Rule) -> "PolicySet":
        return PolicySet(self.rules + (rule,))


EMPTY_POLICY_SET = PolicySet()


@dataclass
class AccessContext:
    """Evaluation environment for predicates.

    ``is_member`` and ``circle_exists`` are supplied by the caller so the
    evaluator stays decoupled from any particular registry; they must be
    consistent with the model state at evaluation time.
    """

    author: str
    reader: str
    tags: frozenset[str]
    is_member: Callable[[str, str], bool]
    circle_exists: Optional[Callable[[str], bool]] = None
    warnings: list[str] = field(default_factory=list)

    def _resolve_circle(self, circle_id: str) -> bool:
        if self.circle_exists is not None and not self.circle_exists(circle_id):
            msg = f"dangling circle reference {circle_id!r} evaluated as false"
            self.warnings.append(msg)
            logger.warning(msg)
            return False
        return True


# --- parsing -----------------------------------------------------------------

_WS = re.compile(r"\s*")
_EFFECT = re.compile(r"(allow|deny)\b")
_ARROW = re.compile(r"<-")
_KIND = re.compile(r"[a-z][a-z-]*")
_ARG = re.compile(r"[^()\s]+")
_AND = re.compile(r"and\b")


def parse_rule(text: str) -> Rule:
    """Parse one rule line into a :class:`Rule`.

    Raises :class:`RuleSyntaxError` with the offending column on malformed
    input and :class:`UnknownPredicateKind` for unsupported predicates.
    """
    pos = _WS.match(text, 0).end()

    m = _EFFECT.match(text, pos)
    if not m:
        raise RuleSyntaxError("expected 'allow' or 'deny'", pos)
    effect = m.group(1)
    pos = _WS.match(text, m.end()).end()

    m = _ARROW.match(text, pos)
    if not m:
        raise RuleSyntaxError("expected '<-'", pos)
    pos = _WS.match(text, m.end()).end()

    predicates: list[Predicate] = []
    while True:
        m = _KIND.match(text, pos)
        if not m:
            raise RuleSyntaxError("expected predicate", pos)
        kind = m.group(0)
        if kind not in PREDICATE_KINDS:
            raise UnknownPredicateKind(f"unknown predicate kind {kind!r}", pos)
        pos = m.end()
        if pos >= len(text) or text[pos] != "(":
            raise RuleSyntaxError("expected '('", pos)
        pos = _WS.match(text, pos + 1).end()
        m = _ARG.match(text, pos)
        if not m:
            raise RuleSyntaxError("expected argument", pos)
        arg = m.group(0)
        pos = _WS.match(text, m.end()).end()
        if pos >= len(text) or text[pos] != ")":
            raise RuleSyntaxError("expected ')'", pos)
        pos = _WS.match(text, pos + 1).end()
        predicates.append(Predicate(kind, arg))

        m = _AND.match(text, pos)
        if not m:
            break
        pos = _WS.match(text, m.end()).end()

    if pos != len(text):
        raise RuleSyntaxError(f"unexpected trailing input {text[pos:]!r}", pos)
    return Rule(effect, tuple(predicates))


def print_rule(rule: Rule) -> str:
    body = " and ".join(f"{p.kind}({p.arg})" for p in rule.predicates)
    return f"{rule.effect} <- {body}"


def parse_policy_set(text: str) -> PolicySet:
    """Parse a policy file body: one rule per line, '#' comments, blank lines ok."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rules.append(parse_rule(line))
        except RuleSyntaxError as exc:
            raise type(exc)(f"line {lineno}: {exc.raw_message}", exc.position) from None
    return PolicySet(tuple(rules))


def print_policy_set(policy: PolicySet) -> str:
    return "\n".join(print_rule(r) for r in policy.rules)


# --- evaluation --------------------------------------------------------------

def evaluate_predicate(pred: Predicate, ctx: AccessContext) -> bool:
    """Evaluate one predicate against the context.  Pure, no side effects
    beyond the dangling-reference warning log."""
    kind, arg = pred.kind, pred.arg
    if kind == "author-is":
        return ctx.author == arg
    if kind == "reader-is":
        return ctx.reader == arg
    if kind == "author-member-of":
        return ctx._resolve_circle(arg) and ctx.is_member(arg, ctx.author)
    if kind == "reader-member-of":
        return ctx._resolve_circle(arg) and ctx.is_member(arg, ctx.reader)
    if kind == "message-tagged-with":
        return arg in ctx.tags
    if kind == "reader-in-asn":
        return asn_of(ctx.reader) == arg
    if kind == "author-in-asn":
        return asn_of(ctx.author) == arg
    raise UnknownPredicateKind(f"unknown predicate kind {kind!r}")


def _rule_holds(rule: Rule, ctx: AccessContext) -> bool:
    return all(evaluate_predicate(p, ctx) for p in rule.predicates)


def evaluate_policy_set(policy: PolicySet, ctx: AccessContext) -> bool:
    """True iff at least one allow-rule holds and no deny-rule holds."""
    allowed = False
    for rule in policy.rules:
        if rule.effect == DENY:
            if _rule_holds(rule, ctx):
                return False
        elif not allowed and _rule_holds(rule, ctx):
            allowed = True
    return allowed
