"""Privilege computation: role closures, subdomain refinement, group gates.

Domain privileges answer "may user u perform action a while operating in
subdomain sd".  The effective set is layered:

1. union of the user's role closures (within one role chain the nearest
   role wins per action; across roles the entry defined at the smallest
   hierarchy distance wins, deny winning ties),
2. refined per-action by each subdomain on sd's ancestor chain, applied
   root first so the nearest subdomain wins,
3. overridden by per-user entries recorded on the chain's subdomains,
   again nearest wins.

Anything still undefined is denied.  Two bootstrap guarantees sit on top:
the ASN administrator holds every cataloged action everywhere in the ASN,
and a subdomain's founding administrator can never lose
``administer-subdomain`` over it, whatever gets revoked.

Group privileges (join / tag / moderate) are local to the group they are
defined on and never consult the layering above.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Optional

from .errors import CrossAsn, UnknownAction, UnknownCircle, UnknownGroup, UnknownRole, UnknownUser
from .policy import AccessContext, evaluate_policy_set

if TYPE_CHECKING:
    from .model import Mesh

GRANT = "grant"
DENY = "deny"

ADMINISTER_SUBDOMAIN = "administer-subdomain"

#: Built-in action catalog; instances may extend it through configuration.
DEFAULT_ACTIONS = (
    "create-subdomain",
    "create-public-group",
    "create-private-group",
    "create-role",
    "assign-role",
    "pair-asn",
    ADMINISTER_SUBDOMAIN,
    "post-message",
    "follow-user",
)

JOIN_OPEN = "open"
JOIN_CLOSED = "closed"
JOIN_POLICY_GATED = "policy-gated"

TAGGING_MEMBERS = "members"
TAGGING_BOSSES = "bosses"


@dataclass(frozen=True)
class PrivilegeEntry:
    action: str
    effect: str  # GRANT or DENY


@dataclass(frozen=True)
class PrivilegeSet:
    """Per-action effects; at most one entry per action."""

    entries: tuple[PrivilegeEntry, ...] = ()

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "PrivilegeSet":
        seen: dict[str, str] = {}
        for action, effect in pairs:
            if effect not in (GRANT, DENY):
                raise ValueError(f"effect must be grant or deny, got {effect!r}")
            if seen.get(action, effect) != effect:
                raise ValueError(f"conflicting effects for action {action!r} in one set")
            seen[action] = effect
        return cls(tuple(PrivilegeEntry(a, e) for a, e in sorted(seen.items())))

    def effect_of(self, action: str) -> Optional[str]:
        for entry in self.entries:
            if entry.action == action:
                return entry.effect
        return None

    def grants(self, action: str) -> bool:
        return self.effect_of(action) == GRANT

    def refine(self, other: "PrivilegeSet") -> "PrivilegeSet":
        """Per-action override of self by ``other`` (the refinement step)."""
        merged = {e.action: e.effect for e in self.entries}
        merged.update({e.action: e.effect for e in other.entries})
        return PrivilegeSet.from_pairs(merged.items())


EMPTY_PRIVILEGES = PrivilegeSet()


@dataclass(frozen=True)
class GroupPrivileges:
    join: str = JOIN_CLOSED          # open | closed | policy-gated
    tagging: str = TAGGING_MEMBERS   # members | bosses
    moderated: bool = False          # messages tagged here need boss approval


DEFAULT_GROUP_PRIVILEGES = GroupPrivileges()


# --- role closure ------------------------------------------------------------

def _role_chain(mesh: "Mesh", role_id: str) -> list:
    role = mesh.roles.get(role_id)
    if role is None:
        raise UnknownRole(role_id)
    chain = []
    seen = set()
    while role is not None:
        if role.id in seen:  # corrupt state; creation guards against cycles
            break
        seen.add(role.id)
        chain.append(role)
        role = mesh.roles.get(role.parent) if role.parent else None
    return chain


def role_closure(mesh: "Mesh", role_id: str) -> PrivilegeSet:
    """A role's privileges merged over its ancestors, nearer roles winning."""
    chain = _role_chain(mesh, role_id)
    closure = EMPTY_PRIVILEGES
    for role in reversed(chain):
        closure = closure.refine(role.privileges)
    return closure


def _closure_with_distance(mesh: "Mesh", role_id: str) -> dict[str, tuple[int, str]]:
    out: dict[str, tuple[int, str]] = {}
    for distance, role in enumerate(_role_chain(mesh, role_id)):
        for entry in role.privileges.entries:
            if entry.action not in out:  # nearest wins within one chain
                out[entry.action] = (distance, entry.effect)
    return out


def _merge_role_layer(closures: list[dict[str, tuple[int, str]]]) -> PrivilegeSet:
    best: dict[str, tuple[int, str]] = {}
    for closure in closures:
        for action, (distance, effect) in closure.items():
            cur = best.get(action)
            if cur is None or distance < cur[0]:
                best[action] = (distance, effect)
            elif distance == cur[0] and effect == DENY:
                best[action] = (distance, effect)
    return PrivilegeSet.from_pairs((a, e) for a, (_, e) in best.items())


# --- effective privileges ----------------------------------------------------

def effective_privileges(mesh: "Mesh", user_id: str, sd_id: str) -> PrivilegeSet:
    """Actions ``user_id`` holds while operating in subdomain ``sd_id``."""
    user = mesh.users.get(user_id)
    if user is None:
        raise UnknownUser(user_id)
    sd = mesh.subdomains.get(sd_id)
    if sd is None:
        raise UnknownCircle(f"unknown subdomain {sd_id}")
    if user.asn != sd.asn:
        raise CrossAsn(f"{user_id} and {sd_id} belong to different ASNs")

    asn = mesh.asns.get(sd.asn)
    if asn is not None and asn.admin == user_id:
        # ASN administrator bootstrap: all cataloged actions, everywhere.
        return PrivilegeSet.from_pairs((a, GRANT) for a in sorted(mesh.actions))

    effective = _merge_role_layer(
        [_closure_with_distance(mesh, rid) for rid in sorted(user.roles)]
    )

    chain = mesh.ancestor_chain(sd_id)  # sd .. root
    for cid in reversed(chain):  # apply root first, nearest subdomain last
        effective = effective.refine(mesh.subdomains[cid].privileges)
    for cid in reversed(chain):
        override = mesh.subdomains[cid].user_privileges.get(user_id)
        if override is not None:
            effective = effective.refine(override)

    if sd.founding_admin == user_id:
        # Never revocable, whatever the layers above said.
        effective = effective.refine(
            PrivilegeSet.from_pairs([(ADMINISTER_SUBDOMAIN, GRANT)])
        )
    return effective


def check_privilege(mesh: "Mesh", user_id: str, sd_id: str, action: str) -> bool:
    if action not in mesh.actions:
        raise UnknownAction(action)
    return effective_privileges(mesh, user_id, sd_id).grants(action)


# --- group privileges --------------------------------------------------------

def group_bosses(mesh: "Mesh", circle_id: str) -> frozenset[str]:
    """Users who may moderate / manage the group.

    Public groups carry an explicit boss set; for subdomains the founding
    administrator and the ASN administrator fill that role.
    """
    group = mesh.public_groups.get(circle_id)
    if group is not None:
        return group.bosses
    sd = mesh.subdomains.get(circle_id)
    if sd is not None:
        asn = mesh.asns.get(sd.asn)
        bosses = {sd.founding_admin}
        if asn is not None:
            bosses.add(asn.admin)
        return frozenset(bosses)
    raise UnknownGroup(circle_id)


def check_group_privilege(mesh: "Mesh", circle_id: str, user_id: str, action: str) -> bool:
    """Evaluate a join/tag/moderate request against the group's own settings."""
    circle = mesh.public_groups.get(circle_id) or mesh.subdomains.get(circle_id)
    if circle is None:
        raise UnknownGroup(circle_id)
    gp = circle.group_privileges

    if action == "join":
        if gp.join == JOIN_OPEN:
            return True
        if gp.join == JOIN_CLOSED:
            return False
        ctx = AccessContext(
            author=user_id,
            reader=user_id,
            tags=frozenset(),
            is_member=mesh.is_member,
            circle_exists=mesh.circle_exists,
        )
        return evaluate_policy_set(circle.policies, ctx)
    if action == "tag":
        if gp.tagging == TAGGING_BOSSES:
            return user_id in group_bosses(mesh, circle_id)
        return mesh.is_member(circle_id, user_id)
    if action == "moderate":
        return user_id in group_bosses(mesh, circle_id)
    raise ValueError(f"unknown group action {action!r}")
