"""Social-mesh entities and the per-instance registry.

The registry (:class:`Mesh`) holds every entity of one logical state:
ASNs, users, the three circle kinds, roles.  A server instance keeps one
Mesh for its own ASN plus whatever remote circles and profiles have been
replicated to it; tests may build a Mesh spanning several ASNs to act as
the global view.

Entities are frozen dataclasses.  Mutations replace whole entries under
an exclusive writer lock, so anything a reader got handed stays a
consistent immutable snapshot.  Structural invariants (single parent,
kind-compatible parents, acyclicity, unique main subdomain) are enforced
at mutation time and re-checkable in bulk through :meth:`Mesh.validate`.

Privilege gates deliberately do NOT live here; the gateway layer applies
them before calling in.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Union

from .errors import (
    DuplicateId,
    ForeignParent,
    HierarchyCycle,
    InvalidParentKind,
    ParentNotSubdomain,
    SecondRoot,
    TagConflictOverlap,
    UnknownAsn,
    UnknownCircle,
    UnknownRole,
    UnknownUser,
)
from .ids import asn_of
from .policy import EMPTY_POLICY_SET, PolicySet
from .privileges import (
    DEFAULT_ACTIONS,
    DEFAULT_GROUP_PRIVILEGES,
    EMPTY_PRIVILEGES,
    GRANT,
    ADMINISTER_SUBDOMAIN,
    GroupPrivileges,
    PrivilegeSet,
)


@dataclass(frozen=True)
class User:
    id: str
    asn: str
    display_name: str = ""
    password_hash: str = ""
    roles: frozenset[str] = frozenset()
    followers: frozenset[str] = frozenset()  # user ids, possibly remote


@dataclass(frozen=True)
class Asn:
    id: str
    admin: str
    users: frozenset[str] = frozenset()
    subdomains: frozenset[str] = frozenset()
    main_subdomain: Optional[str] = None
    roles: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Subdomain:
    id: str
    asn: str
    name: str
    founding_admin: str
    parent: Optional[str] = None
    members: frozenset[str] = frozenset()
    policies: PolicySet = EMPTY_POLICY_SET
    privileges: PrivilegeSet = EMPTY_PRIVILEGES
    user_privileges: Mapping[str, PrivilegeSet] = field(default_factory=dict)
    group_privileges: GroupPrivileges = DEFAULT_GROUP_PRIVILEGES

    kind = "subdomain"


@dataclass(frozen=True)
class PublicGroup:
    id: str
    owner: str
    parent: Optional[str] = None
    members: frozenset[str] = frozenset()
    bosses: frozenset[str] = frozenset()
    policies: PolicySet = EMPTY_POLICY_SET
    group_privileges: GroupPrivileges = DEFAULT_GROUP_PRIVILEGES

    kind = "public_group"


@dataclass(frozen=True)
class PrivateGroup:
    id: str
    owner: str
    parent: Optional[str] = None
    members: frozenset[str] = frozenset()
    policies: PolicySet = EMPTY_POLICY_SET

    kind = "private_group"


Circle = Union[Subdomain, PublicGroup, PrivateGroup]


@dataclass(frozen=True)
class Role:
    id: str
    asn: str
    name: str
    privileges: PrivilegeSet = EMPTY_PRIVILEGES
    parent: Optional[str] = None


@dataclass(frozen=True)
class Message:
    """The unit of information flow; tag and conflict sets must not overlap."""

    id: str
    author: str
    content: str
    tags: frozenset[str] = frozenset()
    conflicts: frozenset[str] = frozenset()

    def __post_init__(self):
        overlap = self.tags & self.conflicts
        if overlap:
            raise TagConflictOverlap(f"circles in both tag and conflict set: {sorted(overlap)}")


@dataclass(frozen=True)
class Violation:
    kind: str
    subject: str
    detail: str


class Mesh:
    """Registry of one logical state; exclusive writers, snapshot readers."""

    def __init__(self, extra_actions: tuple[str, ...] = ()):
        self._lock = threading.RLock()
        self.actions: frozenset[str] = frozenset(DEFAULT_ACTIONS) | frozenset(extra_actions)
        self.asns: dict[str, Asn] = {}
        self.users: dict[str, User] = {}
        self.subdomains: dict[str, Subdomain] = {}
        self.public_groups: dict[str, PublicGroup] = {}
        self.private_groups: dict[str, PrivateGroup] = {}
        self.roles: dict[str, Role] = {}
        self._counter = itertools.count(1)

    # --- lookups -------------------------------------------------------------

    def circle(self, circle_id: str) -> Optional[Circle]:
        return (
            self.subdomains.get(circle_id)
            or self.public_groups.get(circle_id)
            or self.private_groups.get(circle_id)
        )

    def require_circle(self, circle_id: str) -> Circle:
        circle = self.circle(circle_id)
        if circle is None:
            raise UnknownCircle(circle_id)
        return circle

    def circle_exists(self, circle_id: str) -> bool:
        return self.circle(circle_id) is not None

    def is_member(self, circle_id: str, user_id: str) -> bool:
        circle = self.circle(circle_id)
        return circle is not None and user_id in circle.members

    def parent_of(self, circle_id: str) -> Optional[str]:
        return self.require_circle(circle_id).parent

    def require_user(self, user_id: str) -> User:
        user = self.users.get(user_id)
        if user is None:
            raise UnknownUser(user_id)
        return user

    def require_asn(self, asn_id: str) -> Asn:
        asn = self.asns.get(asn_id)
        if asn is None:
            raise UnknownAsn(asn_id)
        return asn

    def all_circles(self) -> list[Circle]:
        with self._lock:
            return (
                list(self.subdomains.values())
                + list(self.public_groups.values())
                + list(self.private_groups.values())
            )

    def next_local_id(self, asn_id: str, prefix: str) -> str:
        return f"{asn_id}/{prefix}{next(self._counter)}"

    def ancestor_chain(self, circle_id: str) -> list[str]:
        """[c, parent(c), ...] up to and including the root.

        Defensive against replicated-state skew: a revisited circle aborts
        the walk with :class:`HierarchyCycle` even though creation-time
        checks should make that impossible.
        """
        self.require_circle(circle_id)
        chain: list[str] = []
        seen: set[str] = set()
        current: Optional[str] = circle_id
        while current is not None:
            if current in seen:
                raise HierarchyCycle(f"cycle through {current} while walking from {circle_id}")
            seen.add(current)
            chain.append(current)
            circle = self.circle(current)
            current = circle.parent if circle is not None else None
        return chain

    # --- mutation -----------------------------------------------------------

    def register_asn(self, asn_id: str, admin_id: str, display_name: str = "",
                     password_hash: str = "") -> Asn:
        with self._lock:
            if asn_id in self.asns:
                raise DuplicateId(f"asn {asn_id} already registered")
            if asn_of(admin_id) != asn_id:
                raise UnknownUser(f"admin id {admin_id} not qualified by {asn_id}")
            asn = Asn(id=asn_id, admin=admin_id, users=frozenset({admin_id}))
            self.asns[asn_id] = asn
            self.users[admin_id] = User(
                id=admin_id, asn=asn_id, display_name=display_name,
                password_hash=password_hash,
            )
            return asn

    def add_user(self, user_id: str, display_name: str = "", password_hash: str = "") -> User:
        with self._lock:
            asn_id = asn_of(user_id)
            asn = self.require_asn(asn_id)
            if user_id in self.users:
                raise DuplicateId(f"user {user_id} already registered")
            user = User(id=user_id, asn=asn_id, display_name=display_name,
                        password_hash=password_hash)
            self.users[user_id] = user
            self.asns[asn_id] = replace(asn, users=asn.users | {user_id})
            return user

    def upsert_remote_user(self, user_id: str, display_name: str = "") -> User:
        """Record a profile snapshot of a user from another ASN."""
        with self._lock:
            existing = self.users.get(user_id)
            if existing is not None:
                user = replace(existing, display_name=display_name)
            else:
                user = User(id=user_id, asn=asn_of(user_id), display_name=display_name)
            self.users[user_id] = user
            return user

    def create_subdomain(self, asn_id: str, name: str, parent: Optional[str],
                         admin: str, cid: Optional[str] = None) -> Subdomain:
        with self._lock:
            asn = self.require_asn(asn_id)
            if admin not in asn.users:
                raise UnknownUser(f"{admin} is not a user of {asn_id}")
            if parent is None:
                if asn.main_subdomain is not None:
                    raise SecondRoot(f"{asn_id} already has main subdomain {asn.main_subdomain}")
            else:
                parent_sd = self.subdomains.get(parent)
                if parent_sd is None or parent_sd.asn != asn_id:
                    raise ParentNotSubdomain(f"{parent} is not a subdomain of {asn_id}")
            cid = cid or self.next_local_id(asn_id, "sd")
            self._check_fresh_circle_id(cid)
            sd = Subdomain(
                id=cid, asn=asn_id, name=name, founding_admin=admin, parent=parent,
                members=frozenset({admin}),
                user_privileges={admin: PrivilegeSet.from_pairs([(ADMINISTER_SUBDOMAIN, GRANT)])},
            )
            self.subdomains[cid] = sd
            self.asns[asn_id] = replace(
                asn,
                subdomains=asn.subdomains | {cid},
                main_subdomain=asn.main_subdomain if parent is not None else cid,
            )
            return sd

    def create_public_group(self, owner: str, parent: Optional[str],
                            policies: PolicySet = EMPTY_POLICY_SET,
                            cid: Optional[str] = None) -> PublicGroup:
        with self._lock:
            self.require_user(owner)
            if parent is not None:
                parent_circle = self.circle(parent)
                if parent_circle is None:
                    raise UnknownCircle(parent)
                if parent_circle.kind == "private_group":
                    raise InvalidParentKind("a public group cannot hang under a private group")
            cid = cid or self.next_local_id(asn_of(owner), "pg")
            self._check_fresh_circle_id(cid)
            group = PublicGroup(
                id=cid, owner=owner, parent=parent,
                members=frozenset({owner}), bosses=frozenset({owner}),
                policies=policies,
            )
            self.public_groups[cid] = group
            return group

    def create_private_group(self, owner: str, parent: Optional[str],
                             cid: Optional[str] = None) -> PrivateGroup:
        with self._lock:
            self.require_user(owner)
            if parent is not None:
                parent_circle = self.circle(parent)
                if parent_circle is None:
                    raise UnknownCircle(parent)
                if parent_circle.kind != "private_group":
                    raise InvalidParentKind("a private group's parent must be a private group")
                if parent_circle.owner != owner:
                    raise ForeignParent(f"{parent} belongs to {parent_circle.owner}")
            cid = cid or self.next_local_id(asn_of(owner), "prg")
            self._check_fresh_circle_id(cid)
            group = PrivateGroup(id=cid, owner=owner, parent=parent)
            self.private_groups[cid] = group
            return group

    def create_role(self, asn_id: str, name: str,
                    privileges: PrivilegeSet = EMPTY_PRIVILEGES,
                    parent: Optional[str] = None, rid: Optional[str] = None) -> Role:
        with self._lock:
            asn = self.require_asn(asn_id)
            for existing in asn.roles:
                if self.roles[existing].name == name:
                    raise DuplicateId(f"role name {name!r} already used in {asn_id}")
            if parent is not None:
                parent_role = self.roles.get(parent)
                if parent_role is None or parent_role.asn != asn_id:
                    raise UnknownRole(f"{parent} is not a role of {asn_id}")
            rid = rid or self.next_local_id(asn_id, "role")
            if rid in self.roles:
                raise DuplicateId(f"role id {rid} already used")
            role = Role(id=rid, asn=asn_id, name=name, privileges=privileges, parent=parent)
            self.roles[rid] = role
            self.asns[asn_id] = replace(asn, roles=asn.roles | {rid})
            return role

    def set_role_parent(self, role_id: str, parent: Optional[str]) -> Role:
        with self._lock:
            role = self.roles.get(role_id)
            if role is None:
                raise UnknownRole(role_id)
            if parent is not None:
                probe = parent
                while probe is not None:
                    if probe == role_id:
                        raise HierarchyCycle(f"role {role_id} would become its own ancestor")
                    parent_role = self.roles.get(probe)
                    if parent_role is None or parent_role.asn != role.asn:
                        raise UnknownRole(f"{probe} is not a role of {role.asn}")
                    probe = parent_role.parent
            updated = replace(role, parent=parent)
            self.roles[role_id] = updated
            return updated

    def assign_role(self, user_id: str, role_id: str) -> User:
        with self._lock:
            user = self.require_user(user_id)
            role = self.roles.get(role_id)
            if role is None:
                raise UnknownRole(role_id)
            if role.asn != user.asn:
                raise UnknownRole(f"{role_id} is not a role of {user.asn}")
            updated = replace(user, roles=user.roles | {role_id})
            self.users[user_id] = updated
            return updated

    def add_member(self, circle_id: str, user_id: str) -> Circle:
        with self._lock:
            circle = self.require_circle(circle_id)
            if circle.kind == "subdomain":
                asn = self.require_asn(circle.asn)
                if user_id not in asn.users:
                    raise UnknownUser(f"{user_id} is not a user of {circle.asn}")
            updated = replace(circle, members=circle.members | {user_id})
            self._store_circle(updated)
            return updated

    def remove_member(self, circle_id: str, user_id: str) -> Circle:
        with self._lock:
            circle = self.require_circle(circle_id)
            members = circle.members - {user_id}
            updated = replace(circle, members=members)
            if circle.kind == "public_group":
                updated = replace(updated, bosses=updated.bosses - {user_id})
            self._store_circle(updated)
            return updated

    def add_boss(self, circle_id: str, user_id: str) -> PublicGroup:
        with self._lock:
            group = self.public_groups.get(circle_id)
            if group is None:
                raise UnknownCircle(circle_id)
            updated = replace(group, members=group.members | {user_id},
                              bosses=group.bosses | {user_id})
            self.public_groups[circle_id] = updated
            return updated

    def set_policies(self, circle_id: str, policies: PolicySet) -> Circle:
        with self._lock:
            circle = self.require_circle(circle_id)
            updated = replace(circle, policies=policies)
            self._store_circle(updated)
            return updated

    def set_subdomain_privileges(self, circle_id: str, privileges: PrivilegeSet) -> Subdomain:
        with self._lock:
            sd = self._require_subdomain(circle_id)
            updated = replace(sd, privileges=privileges)
            self.subdomains[circle_id] = updated
            return updated

    def set_user_privilege(self, circle_id: str, user_id: str,
                           privileges: PrivilegeSet) -> Subdomain:
        with self._lock:
            sd = self._require_subdomain(circle_id)
            overrides = dict(sd.user_privileges)
            if privileges.entries:
                overrides[user_id] = privileges
            else:
                overrides.pop(user_id, None)
            updated = replace(sd, user_privileges=overrides)
            self.subdomains[circle_id] = updated
            return updated

    def set_role_privileges(self, role_id: str, privileges: PrivilegeSet) -> Role:
        with self._lock:
            role = self.roles.get(role_id)
            if role is None:
                raise UnknownRole(role_id)
            updated = replace(role, privileges=privileges)
            self.roles[role_id] = updated
            return updated

    def set_group_privileges(self, circle_id: str, gp: GroupPrivileges) -> Circle:
        with self._lock:
            circle = self.require_circle(circle_id)
            if circle.kind == "private_group":
                raise InvalidParentKind("private groups carry no group privileges")
            updated = replace(circle, group_privileges=gp)
            self._store_circle(updated)
            return updated

    def add_follower(self, target_id: str, follower_id: str) -> User:
        """Record that ``follower_id`` (possibly remote) follows ``target_id``."""
        with self._lock:
            target = self.require_user(target_id)
            updated = replace(target, followers=target.followers | {follower_id})
            self.users[target_id] = updated
            return updated

    def upsert_circle(self, circle: Circle) -> None:
        """Replace a circle wholesale (replica application, log replay)."""
        with self._lock:
            self._store_circle(circle, allow_new=True)

    def upsert_user(self, user: User) -> None:
        with self._lock:
            self.users[user.id] = user

    def upsert_asn(self, asn: Asn) -> None:
        with self._lock:
            self.asns[asn.id] = asn

    def upsert_role(self, role: Role) -> None:
        with self._lock:
            self.roles[role.id] = role

    def rebuild_asn_aggregates(self) -> None:
        """Recompute per-ASN membership sets after a log replay."""
        with self._lock:
            for asn_id, asn in list(self.asns.items()):
                users = frozenset(u for u, rec in self.users.items()
                                  if rec.asn == asn_id)
                subdomains = frozenset(sd for sd, rec in self.subdomains.items()
                                       if rec.asn == asn_id)
                roles = frozenset(r for r, rec in self.roles.items()
                                  if rec.asn == asn_id)
                roots = [sd for sd in subdomains
                         if self.subdomains[sd].parent is None]
                main = roots[0] if len(roots) == 1 else asn.main_subdomain
                self.asns[asn_id] = replace(asn, users=users, subdomains=subdomains,
                                            roles=roles, main_subdomain=main)

    # --- internals ------------------------------------------------------------

    def _require_subdomain(self, circle_id: str) -> Subdomain:
        sd = self.subdomains.get(circle_id)
        if sd is None:
            raise UnknownCircle(f"unknown subdomain {circle_id}")
        return sd

    def _check_fresh_circle_id(self, cid: str) -> None:
        if self.circle(cid) is not None:
            raise DuplicateId(f"circle id {cid} already used")

    def _store_circle(self, circle: Circle, allow_new: bool = False) -> None:
        table = {
            "subdomain": self.subdomains,
            "public_group": self.public_groups,
            "private_group": self.private_groups,
        }[circle.kind]
        if not allow_new and circle.id not in table:
            raise UnknownCircle(circle.id)
        table[circle.id] = circle

    # --- bulk validation -------------------------------------------------------

    def validate(self) -> list[Violation]:
        """Structural diagnostics over the whole registry; empty means ok."""
        with self._lock:
            out: list[Violation] = []
            seen_ids: dict[str, str] = {}
            for circle in self.all_circles():
                if circle.id in seen_ids:
                    out.append(Violation("duplicate-circle-id", circle.id,
                                         f"also a {seen_ids[circle.id]}"))
                seen_ids[circle.id] = circle.kind

            for asn in self.asns.values():
                roots = [sd for sd in self.subdomains.values()
                         if sd.asn == asn.id and sd.parent is None]
                if not roots:
                    out.append(Violation("missing-main-subdomain", asn.id,
                                         "no parentless subdomain"))
                elif len(roots) > 1:
                    out.append(Violation("duplicate-main-subdomain", asn.id,
                                         f"{len(roots)} parentless subdomains"))
                elif asn.main_subdomain != roots[0].id:
                    out.append(Violation("main-subdomain-mismatch", asn.id,
                                         f"recorded {asn.main_subdomain}, found {roots[0].id}"))
                if asn.admin not in asn.users:
                    out.append(Violation("admin-not-user", asn.id, asn.admin))

            for sd in self.subdomains.values():
                if sd.parent is not None:
                    parent = self.subdomains.get(sd.parent)
                    if parent is None:
                        out.append(Violation("bad-parent-kind", sd.id,
                                             f"parent {sd.parent} is not a subdomain"))
                    elif parent.asn != sd.asn:
                        out.append(Violation("cross-asn-parent", sd.id, sd.parent))
                if sd.founding_admin not in sd.members:
                    out.append(Violation("founding-admin-not-member", sd.id, sd.founding_admin))
                asn = self.asns.get(sd.asn)
                if asn is not None and not sd.members <= asn.users:
                    extra = sorted(sd.members - asn.users)
                    out.append(Violation("member-outside-asn", sd.id, str(extra)))

            for group in self.public_groups.values():
                if group.parent is not None:
                    parent = self.circle(group.parent)
                    if parent is None or parent.kind == "private_group":
                        out.append(Violation("bad-parent-kind", group.id, str(group.parent)))
                if not group.bosses <= group.members:
                    out.append(Violation("boss-not-member", group.id,
                                         str(sorted(group.bosses - group.members))))
                if group.owner not in group.members:
                    out.append(Violation("owner-not-member", group.id, group.owner))

            for group in self.private_groups.values():
                if group.parent is not None:
                    parent = self.private_groups.get(group.parent)
                    if parent is None:
                        out.append(Violation("bad-parent-kind", group.id, str(group.parent)))
                    elif parent.owner != group.owner:
                        out.append(Violation("cross-owner-parent", group.id, group.parent))

            for circle in self.all_circles():
                if self._cycles_back(circle.id, lambda c: self._parent_or_none(c)):
                    out.append(Violation("hierarchy-cycle", circle.id, "parent walk revisits"))

            for role in self.roles.values():
                if self._cycles_back(role.id,
                                     lambda r: self.roles[r].parent if r in self.roles else None):
                    out.append(Violation("role-cycle", role.id, "parent walk revisits"))

            return out

    def _parent_or_none(self, circle_id: str) -> Optional[str]:
        circle = self.circle(circle_id)
        return circle.parent if circle is not None else None

    @staticmethod
    def _cycles_back(start: str, parent_fn) -> bool:
        seen = {start}
        current = parent_fn(start)
        while current is not None:
            if current in seen:
                return True
            seen.add(current)
            current = parent_fn(current)
        return False


def validate_hierarchy(mesh: Mesh) -> list[Violation]:
    """Module-level alias kept for symmetry with the other engine entry points."""
    return mesh.validate()
