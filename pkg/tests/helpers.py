"""Shared test fixtures: scenario meshes, random generators, brute-force
oracles and an in-process multi-ASN cluster.

The oracles here restate the access definitions directly (full chain
enumeration, explicit truth tables) and must stay independent of the
engine's incremental evaluation paths.
"""

from __future__ import annotations

import random
from pathlib import Path

from prism.federation import InProcessTransport
from prism.fipm import EvalMode
from prism.ids import asn_of
from prism.instance import AsnInstance, InstanceConfig
from prism.model import Mesh, Message
from prism.policy import ALLOW, DENY, PolicySet, Predicate, Rule, parse_policy_set
from prism.privileges import GRANT, PrivilegeSet

#: everyday actions granted to ordinary scenario users
BASELINE_ACTIONS = ("post-message", "follow-user", "create-private-group",
                    "create-public-group")


# --- the two-circle scenario used across suites --------------------------------

def build_two_circle_mesh() -> Mesh:
    """Alice posts into C1 whose parent is C2; Bob in C1, Charlie in C2,
    Ellen in neither."""
    mesh = Mesh()
    mesh.register_asn("org", "org/root")
    for name in ("alice", "bob", "charlie", "ellen"):
        mesh.add_user(f"org/{name}")
    mesh.create_subdomain("org", "Org", None, "org/root", cid="org/main")
    mesh.create_subdomain("org", "C2", "org/main", "org/root", cid="org/C2")
    mesh.create_subdomain("org", "C1", "org/C2", "org/root", cid="org/C1")
    mesh.add_member("org/C1", "org/alice")
    mesh.add_member("org/C1", "org/bob")
    mesh.add_member("org/C2", "org/charlie")
    return mesh


def two_circle_message() -> Message:
    return Message(id="org/m1", author="org/alice", content="ward notes",
                   tags=frozenset({"org/C1"}))


def set_policy(mesh: Mesh, cid: str, text: str) -> None:
    mesh.set_policies(cid, parse_policy_set(text))


# --- random meshes --------------------------------------------------------------

PREDICATE_KIND_POOL = (
    "author-is", "reader-is", "author-member-of", "reader-member-of",
    "message-tagged-with", "reader-in-asn", "author-in-asn",
)

#: Predicates whose truth does not depend on the message's tag set.  The
#: tag-monotonicity property only holds over policies drawn from these:
#: a deny rule on message-tagged-with can legitimately revoke access when
#: a tag is added (pinned by a dedicated test).
TAG_INSENSITIVE_KINDS = tuple(k for k in PREDICATE_KIND_POOL
                              if k != "message-tagged-with")


def random_rule(rng: random.Random, users: list[str], circles: list[str],
                asns: list[str], kinds=PREDICATE_KIND_POOL) -> Rule:
    effect = ALLOW if rng.random() < 0.7 else DENY
    preds = []
    for _ in range(rng.randint(1, 3)):
        kind = rng.choice(kinds)
        slot = {"user": users, "circle": circles, "asn": asns}[
            {"author-is": "user", "reader-is": "user",
             "author-member-of": "circle", "reader-member-of": "circle",
             "message-tagged-with": "circle",
             "reader-in-asn": "asn", "author-in-asn": "asn"}[kind]
        ]
        arg = rng.choice(slot) if slot else "none/none"
        preds.append(Predicate(kind, arg))
    return Rule(effect, tuple(preds))


def random_policy(rng: random.Random, users: list[str], circles: list[str],
                  asns: list[str], max_rules: int = 10,
                  kinds=PREDICATE_KIND_POOL) -> PolicySet:
    n = rng.randint(0, max_rules)
    return PolicySet(tuple(random_rule(rng, users, circles, asns, kinds)
                           for _ in range(n)))


def random_mesh(rng: random.Random, n_circles: int | None = None,
                n_users: int | None = None, max_rules: int = 10,
                asn: str = "a", policy_kinds=PREDICATE_KIND_POOL) -> Mesh:
    """A structurally valid single-ASN mesh with randomized hierarchy,
    memberships and policies."""
    n_users = n_users if n_users is not None else rng.randint(2, 40)
    n_circles = n_circles if n_circles is not None else rng.randint(1, 30)

    mesh = Mesh()
    admin = f"{asn}/u0"
    mesh.register_asn(asn, admin)
    users = [admin] + [f"{asn}/u{i}" for i in range(1, n_users)]
    for uid in users[1:]:
        mesh.add_user(uid)

    main = mesh.create_subdomain(asn, "main", None, admin, cid=f"{asn}/c0")
    subdomains = [main.id]
    publics: list[str] = []
    privates: list[str] = []

    for i in range(1, n_circles):
        cid = f"{asn}/c{i}"
        roll = rng.random()
        if roll < 0.45:
            parent = rng.choice(subdomains)
            mesh.create_subdomain(asn, f"sd{i}", parent, admin, cid=cid)
            subdomains.append(cid)
        elif roll < 0.8:
            owner = rng.choice(users)
            parent_pool = [None] + subdomains + publics
            mesh.create_public_group(owner, rng.choice(parent_pool), cid=cid)
            publics.append(cid)
        else:
            owner = rng.choice(users)
            own_privates = [p for p in privates
                            if mesh.private_groups[p].owner == owner]
            parent = rng.choice([None] + own_privates)
            mesh.create_private_group(owner, parent, cid=cid)
            privates.append(cid)

    circles = subdomains + publics + privates
    for cid in circles:
        for uid in rng.sample(users, k=min(len(users), rng.randint(0, 8))):
            mesh.add_member(cid, uid)

    for cid in circles:
        mesh.set_policies(cid, random_policy(rng, users, circles, [asn, "b"],
                                             max_rules, policy_kinds))

    return mesh


def random_message(rng: random.Random, mesh: Mesh, mid: str = "a/m") -> Message:
    users = sorted(mesh.users)
    circles = sorted(c.id for c in mesh.all_circles())
    pool = circles + [f"{asn_of(users[0])}/missing{k}" for k in range(2)]
    tags = set(rng.sample(pool, k=min(len(pool), rng.randint(0, 4))))
    remaining = [c for c in pool if c not in tags]
    conflicts = set(rng.sample(remaining, k=min(len(remaining), rng.randint(0, 3))))
    return Message(id=mid, author=rng.choice(users), content="x",
                   tags=frozenset(tags), conflicts=frozenset(conflicts))


# --- brute-force access oracle ---------------------------------------------------

def _oracle_predicate(pred: Predicate, author: str, reader: str,
                      tags: frozenset[str], mesh: Mesh) -> bool:
    kind, arg = pred.kind, pred.arg
    if kind == "author-is":
        return author == arg
    if kind == "reader-is":
        return reader == arg
    if kind == "author-member-of":
        circle = mesh.circle(arg)
        return circle is not None and author in circle.members
    if kind == "reader-member-of":
        circle = mesh.circle(arg)
        return circle is not None and reader in circle.members
    if kind == "message-tagged-with":
        return arg in tags
    if kind == "reader-in-asn":
        return asn_of(reader) == arg
    if kind == "author-in-asn":
        return asn_of(author) == arg
    raise AssertionError(kind)


def _oracle_policy_satisfied(policy: PolicySet, author: str, reader: str,
                             tags: frozenset[str], mesh: Mesh) -> bool:
    outcomes = [
        (rule.effect,
         all(_oracle_predicate(p, author, reader, tags, mesh) for p in rule.predicates))
        for rule in policy.rules
    ]
    any_allow = any(effect == ALLOW and held for effect, held in outcomes)
    any_deny = any(effect == DENY and held for effect, held in outcomes)
    return any_allow and not any_deny


def _full_chain(mesh: Mesh, cid: str) -> tuple[list, bool]:
    """(circles from tag to topmost reachable, chain-ends-at-a-root?)."""
    chain = []
    seen = set()
    current = cid
    while current is not None and current not in seen:
        circle = mesh.circle(current)
        if circle is None:
            return chain, False
        seen.add(current)
        chain.append(circle)
        current = circle.parent
    return chain, current is None


def oracle_check_access(mesh: Mesh, message: Message, reader: str,
                        mode: EvalMode) -> bool:
    """Direct restatement of the access definition via full chain enumeration."""
    if reader == message.author:
        return True
    for cid in message.conflicts:
        circle = mesh.circle(cid)
        if circle is not None and reader in circle.members:
            return False
    for cid in message.tags:
        if mesh.circle(cid) is None:
            continue
        chain, reaches_root = _full_chain(mesh, cid)
        satisfied = [
            _oracle_policy_satisfied(c.policies, message.author, reader,
                                     message.tags, mesh)
            for c in chain
        ]
        for k, circle in enumerate(chain):
            if reader in circle.members and all(satisfied[:k]):
                return True
        if mode is EvalMode.POLICY_CHAIN and reaches_root and all(satisfied):
            return True
    return False


def oracle_audience(mesh: Mesh, message: Message, candidates, mode: EvalMode) -> set[str]:
    return {u for u in candidates if oracle_check_access(mesh, message, u, mode)}


# --- in-process cluster ------------------------------------------------------------

class Cluster:
    """Several ASN instances sharing one in-process transport."""

    def __init__(self, asn_ids, root: Path, mode: str = "policy-chain",
                 pool_width: int = 4, latency=None, sync: bool = True,
                 transport: InProcessTransport | None = None):
        self.transport = transport or InProcessTransport(latency=latency)
        self.instances: dict[str, AsnInstance] = {}
        self.member_roles: dict[str, str] = {}
        for asn in asn_ids:
            config = InstanceConfig(
                asn_id=asn, data_dir=str(root / asn), endpoint=f"mem://{asn}",
                fipm_mode=mode, pool_width=pool_width, sync=sync,
                retry_max_attempts=2, retry_base_delay=0.01,
            )
            instance = AsnInstance(config, transport=self.transport)
            self.transport.register(f"mem://{asn}", instance)
            self.instances[asn] = instance

    def __getitem__(self, asn: str) -> AsnInstance:
        return self.instances[asn]

    def admin(self, asn: str) -> str:
        return self.instances[asn].config.admin_id

    def pair_all(self, secret: str = "mesh-secret") -> None:
        asns = sorted(self.instances)
        for i, a in enumerate(asns):
            for b in asns[i + 1:]:
                self.instances[a].pair(self.admin(a), b, f"mem://{b}", secret)
                self.instances[b].pair(self.admin(b), a, f"mem://{a}", secret)

    def add_user(self, asn: str, name: str, password: str = "pw") -> str:
        """Register a user and hand them the baseline member role."""
        instance = self.instances[asn]
        admin = self.admin(asn)
        user = instance.register_user(admin, name, password=password)
        role_id = self.member_roles.get(asn)
        if role_id is None:
            role = instance.create_role(
                admin, "member",
                PrivilegeSet.from_pairs((a, GRANT) for a in BASELINE_ACTIONS))
            role_id = self.member_roles[asn] = role.id
        instance.assign_role(admin, user.id, role_id)
        return user.id

    def drain(self) -> None:
        for instance in self.instances.values():
            instance.drain()

    def inbox_sets(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {}
        for instance in self.instances.values():
            for user in instance.store.inbox_users():
                out[user] = {e.message_id for e in instance.store.inbox(user)}
        return out

    def global_mesh(self) -> Mesh:
        """Union of every instance's authoritative state (own users, own
        circles, own roles)."""
        g = Mesh()
        for asn, instance in self.instances.items():
            mesh = instance.mesh
            g.upsert_asn(mesh.asns[asn])
            for user in mesh.users.values():
                if user.asn == asn:
                    g.upsert_user(user)
            for circle in mesh.all_circles():
                if asn_of(circle.id) == asn:
                    g.upsert_circle(circle)
            for role in mesh.roles.values():
                if role.asn == asn:
                    g.upsert_role(role)
        g.rebuild_asn_aggregates()
        return g

    def close(self) -> None:
        for instance in self.instances.values():
            instance.close()
