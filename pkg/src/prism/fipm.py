"""Frontier information propagation: may this reader access this message?

The decision procedure, per tag circle, ascends the parent chain:
membership anywhere on the chain grants access immediately, and the walk
may only continue upward through circles whose policies the reader
satisfies.  Membership in any conflict-set circle denies outright before
tags are considered.  Authors always read their own messages.

Two terminating semantics are shipped because they genuinely differ for
a policy-satisfying non-member whose chain reaches the root:

* ``membership-anchored`` - only membership somewhere on the chain ends
  in allow; satisfying every policy up to and past the root still denies.
* ``policy-chain`` (default) - additionally allows when the walk passes
  the root with every policy on the chain satisfied.

Evaluation is pure over immutable snapshots.  Within one query, chains of
different tags merge: each circle's policy verdict for this reader is
computed once and reused when another tag's ascent meets the same circle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from .model import Mesh, Message
from .policy import AccessContext, evaluate_policy_set

logger = logging.getLogger(__name__)

ALLOW = "allow"
DENY = "deny"


class EvalMode(str, Enum):
    MEMBERSHIP_ANCHORED = "membership-anchored"
    POLICY_CHAIN = "policy-chain"

    @classmethod
    def parse(cls, text: str) -> "EvalMode":
        for mode in cls:
            if mode.value == text:
                return mode
        raise ValueError(f"unknown FIPM mode {text!r}")


DEFAULT_MODE = EvalMode.POLICY_CHAIN


@dataclass(frozen=True)
class AccessDecision:
    """Verdict plus the witness of how it was reached.

    For an allow, ``chain`` is the traversed suffix of the winning tag's
    ancestor chain and ``cause`` one of ``author``, ``membership`` or
    ``policy-chain`` (``circle`` carries the membership circle).  For a
    deny, ``cause`` is ``conflict`` (``circle`` = the blocking circle) or
    ``tag-exhausted``; ``diagnostics`` records skipped or suspect circles.
    """

    verdict: str
    cause: str
    chain: tuple[str, ...] = ()
    circle: str | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def allowed(self) -> bool:
        return self.verdict == ALLOW


def check_access(mesh: Mesh, message: Message, reader: str,
                 mode: EvalMode = DEFAULT_MODE) -> AccessDecision:
    """Decide whether ``reader`` may access ``message`` under ``mode``."""
    mesh.require_user(reader)
    if reader == message.author:
        return AccessDecision(ALLOW, "author")

    diagnostics: list[str] = []

    for cid in sorted(message.conflicts):
        circle = mesh.circle(cid)
        if circle is None:
            # A vanished conflict circle cannot block anyone; log it loudly.
            msg = f"unresolvable conflict circle {cid} treated as empty"
            diagnostics.append(msg)
            logger.warning(msg)
            continue
        if reader in circle.members:
            return AccessDecision(DENY, "conflict", circle=cid,
                                  diagnostics=tuple(diagnostics))

    ctx = AccessContext(
        author=message.author,
        reader=reader,
        tags=message.tags,
        is_member=mesh.is_member,
        circle_exists=mesh.circle_exists,
    )
    policy_verdicts: dict[str, bool] = {}  # chain-merge cache, this query only

    for cid in sorted(message.tags):
        if not mesh.circle_exists(cid):
            diagnostics.append(f"unresolvable tag circle {cid} skipped")
            continue
        chain: list[str] = []
        seen: set[str] = set()
        current: str | None = cid
        while current is not None:
            if current in seen:
                diagnostics.append(f"revisit at {current} ascending from {cid}")
                break
            circle = mesh.circle(current)
            if circle is None:
                diagnostics.append(f"dangling parent link {current} ascending from {cid}")
                break
            seen.add(current)
            chain.append(current)
            if reader in circle.members:
                return AccessDecision(ALLOW, "membership", chain=tuple(chain),
                                      circle=current, diagnostics=tuple(diagnostics))
            satisfied = policy_verdicts.get(current)
            if satisfied is None:
                satisfied = evaluate_policy_set(circle.policies, ctx)
                policy_verdicts[current] = satisfied
            if not satisfied:
                break
            current = circle.parent
        else:
            # Walked past the root with every policy on the chain satisfied.
            if mode is EvalMode.POLICY_CHAIN:
                return AccessDecision(ALLOW, "policy-chain", chain=tuple(chain),
                                      diagnostics=tuple(diagnostics))

    return AccessDecision(DENY, "tag-exhausted", diagnostics=tuple(diagnostics))


def compute_audience(mesh: Mesh, message: Message, candidates: Iterable[str],
                     mode: EvalMode = DEFAULT_MODE) -> set[str]:
    """Exactly the candidates for whom :func:`check_access` allows."""
    return {u for u in candidates if check_access(mesh, message, u, mode).allowed}
