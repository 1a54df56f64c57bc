"""One running ASN: registry + store + federation engine + local operations.

Every mutation follows write-ahead discipline: validate against the
in-memory registry, append the whole-state record to the store, then
apply to the registry, so recovery is a straight replay.  Privilege gates
(the ones the gateway promises) live on the operation methods here; the
registry itself stays structural.

``handle_remote`` is the single ingress for the federation surface; the
HTTP gateway and the in-process transport both call it, which keeps wire
semantics identical across deployment modes.
"""

from __future__ import annotations

import hashlib
import hmac
import itertools
import json
import logging
import os
import threading
import urllib.parse
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import (
    AuthFailed,
    DuplicateIdDifferentContent,
    InvalidCircle,
    PrismError,
    PrivilegeDenied,
    TaggingDenied,
    UnknownMessage,
    UnknownUser,
    UnpairedOrigin,
)
from .federation import (
    CIRCLES_PATH,
    FOLLOWS_PATH,
    MESSAGES_PATH,
    PAIR_PATH,
    USERS_PATH,
    DeliveryReport,
    Federation,
    HttpTransport,
    PeeringLink,
    RetryPolicy,
    Transport,
)
from .fipm import EvalMode, check_access
from .ids import asn_of
from .model import Asn, Mesh, Message, Role, User
from .policy import PolicySet, parse_policy_set
from .privileges import (
    GroupPrivileges,
    PrivilegeSet,
    check_group_privilege,
    check_privilege,
    group_bosses,
)
from .store import Store
from .wire import (
    ORIGIN_HEADER,
    SIGNATURE_HEADER,
    RemoteEnvelope,
    ReplicaRecord,
    canonical_json,
    circle_from_payload,
    circle_to_payload,
    verify_body,
)

logger = logging.getLogger(__name__)

MAIN_SUBDOMAIN_SUFFIX = "main"


@dataclass
class InstanceConfig:
    asn_id: str
    data_dir: str
    listen: str = "127.0.0.1:0"
    endpoint: str = ""
    admin_name: str = "admin"
    admin_password: str = "admin"
    fipm_mode: str = "policy-chain"
    pool_width: int = 4
    sync: bool = True
    extra_actions: tuple[str, ...] = ()
    session_ttl: float = 3600.0
    retry_max_attempts: int = 3
    retry_base_delay: float = 0.05
    profile_ttl: float = 30.0

    @property
    def admin_id(self) -> str:
        return f"{self.asn_id}/{self.admin_name}"

    @classmethod
    def from_file(cls, path: str | Path) -> "InstanceConfig":
        data = json.loads(Path(path).read_text())
        data["extra_actions"] = tuple(data.get("extra_actions", ()))
        return cls(**data)


def hash_password(password: str, salt: Optional[bytes] = None) -> str:
    salt = salt if salt is not None else os.urandom(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, 50_000)
    return f"pbkdf2${salt.hex()}${digest.hex()}"


def verify_password(password: str, stored: str) -> bool:
    try:
        _, salt_hex, digest_hex = stored.split("$")
    except ValueError:
        return False
    candidate = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"),
                                    bytes.fromhex(salt_hex), 50_000)
    return hmac.compare_digest(candidate.hex(), digest_hex)


class AsnInstance:
    def __init__(self, config: InstanceConfig, transport: Optional[Transport] = None):
        self.config = config
        self.asn_id = config.asn_id
        self.mode = EvalMode.parse(config.fipm_mode)
        self.store = Store(config.data_dir, sync=config.sync)
        self.mesh = Mesh(extra_actions=config.extra_actions)
        self.circle_versions: dict[str, int] = {}
        self.federation = Federation(
            self,
            transport or HttpTransport(),
            pool_width=config.pool_width,
            retry=RetryPolicy(max_attempts=config.retry_max_attempts,
                              base_delay=config.retry_base_delay),
            profile_ttl=config.profile_ttl,
        )
        self._admin_lock = threading.RLock()
        self._mid_counter = itertools.count(1)
        self._replay()
        if self.asn_id not in self.mesh.asns:
            self._bootstrap()

    # --- recovery / bootstrap ---------------------------------------------------

    def _replay(self) -> None:
        for record in self.store.replayed_meta:
            kind = record["t"]
            if kind == "asn":
                self.mesh.upsert_asn(Asn(id=record["id"], admin=record["admin"],
                                         main_subdomain=record["main_subdomain"]))
            elif kind == "user":
                self.mesh.upsert_user(User(
                    id=record["id"], asn=record["asn"],
                    display_name=record["display_name"],
                    password_hash=record["password_hash"],
                    roles=frozenset(record["roles"]),
                    followers=frozenset(record["followers"]),
                ))
            elif kind == "circle":
                circle = circle_from_payload(record["circle"])
                self.mesh.upsert_circle(circle)
                self.circle_versions[circle.id] = record["version"]
            elif kind == "role":
                self.mesh.upsert_role(Role(
                    id=record["id"], asn=record["asn"], name=record["name"],
                    parent=record["parent"],
                    privileges=PrivilegeSet.from_pairs(record["privileges"]),
                ))
            elif kind == "peer":
                self.federation.restore_link(PeeringLink(
                    asn=record["asn"], endpoint=record["endpoint"],
                    secret=record["secret"], state=record["state"],
                ))
            elif kind == "replica":
                self.mesh.upsert_circle(circle_from_payload(record["circle"]))
        self.mesh.rebuild_asn_aggregates()

    def _bootstrap(self) -> None:
        admin = self.config.admin_id
        self.mesh.register_asn(self.asn_id, admin,
                               password_hash=hash_password(self.config.admin_password))
        main_id = f"{self.asn_id}/{MAIN_SUBDOMAIN_SUFFIX}"
        self.mesh.create_subdomain(self.asn_id, self.asn_id, None, admin, cid=main_id)
        self.persist_user(admin)
        self.persist_circle(main_id, push=False)
        self.persist_asn()
        logger.info("bootstrapped %s with admin %s", self.asn_id, admin)

    # --- persistence helpers -------------------------------------------------------

    def persist_user(self, user_id: str) -> None:
        user = self.mesh.users[user_id]
        self.store.append_meta({
            "t": "user", "id": user.id, "asn": user.asn,
            "display_name": user.display_name,
            "password_hash": user.password_hash,
            "roles": sorted(user.roles), "followers": sorted(user.followers),
        })

    def persist_asn(self) -> None:
        asn = self.mesh.asns[self.asn_id]
        self.store.append_meta({"t": "asn", "id": asn.id, "admin": asn.admin,
                                "main_subdomain": asn.main_subdomain})

    def persist_circle(self, circle_id: str, push: bool = True) -> None:
        circle = self.mesh.require_circle(circle_id)
        version = self.circle_versions.get(circle_id, 0) + 1
        self.circle_versions[circle_id] = version
        self.store.append_meta({
            "t": "circle", "version": version,
            "circle": circle_to_payload(circle, include_private=True),
        })
        if push:
            self.federation.push_circle_update(circle_id)

    def persist_role(self, role_id: str) -> None:
        role = self.mesh.roles[role_id]
        self.store.append_meta({
            "t": "role", "id": role.id, "asn": role.asn, "name": role.name,
            "parent": role.parent,
            "privileges": [[e.action, e.effect] for e in role.privileges.entries],
        })

    def persist_peer(self, link: PeeringLink) -> None:
        self.store.upsert_peer(link.asn, link.endpoint, link.secret, link.state)

    def replica_for(self, circle_id: str) -> ReplicaRecord:
        circle = self.mesh.require_circle(circle_id)
        origin = asn_of(circle_id)
        if origin == self.asn_id:
            version = self.circle_versions.get(circle_id, 1)
        else:
            version = self.store.replica_version(circle_id)
        return ReplicaRecord(origin=origin, version=version,
                             circle=circle_to_payload(circle))

    def compact(self) -> int:
        """Snapshot current state and reset the logs."""
        with self._admin_lock:
            meta: list[dict] = []
            asn = self.mesh.asns[self.asn_id]
            meta.append({"t": "asn", "id": asn.id, "admin": asn.admin,
                         "main_subdomain": asn.main_subdomain})
            for uid in sorted(self.mesh.users):
                user = self.mesh.users[uid]
                meta.append({"t": "user", "id": user.id, "asn": user.asn,
                             "display_name": user.display_name,
                             "password_hash": user.password_hash,
                             "roles": sorted(user.roles),
                             "followers": sorted(user.followers)})
            for circle in sorted(self.mesh.all_circles(), key=lambda c: c.id):
                if asn_of(circle.id) == self.asn_id:
                    meta.append({"t": "circle",
                                 "version": self.circle_versions.get(circle.id, 1),
                                 "circle": circle_to_payload(circle, include_private=True)})
                else:
                    meta.append({"t": "replica", "origin": asn_of(circle.id),
                                 "version": self.store.replica_version(circle.id),
                                 "circle": circle_to_payload(circle)})
            for rid in sorted(self.mesh.roles):
                role = self.mesh.roles[rid]
                meta.append({"t": "role", "id": role.id, "asn": role.asn,
                             "name": role.name, "parent": role.parent,
                             "privileges": [[e.action, e.effect]
                                            for e in role.privileges.entries]})
            for link in self.federation.links.values():
                meta.append({"t": "peer", "asn": link.asn, "endpoint": link.endpoint,
                             "secret": link.secret, "state": link.state})
            return self.store.compact(meta)

    # --- privilege plumbing ------------------------------------------------------------

    @property
    def main_subdomain(self) -> str:
        return self.mesh.asns[self.asn_id].main_subdomain

    def _require_privilege(self, actor: str, sd_id: str, action: str) -> None:
        if not check_privilege(self.mesh, actor, sd_id, action):
            raise PrivilegeDenied(f"{actor} lacks {action} in {sd_id}")

    def _context_subdomain(self, parent: Optional[str]) -> str:
        current = parent
        while current is not None:
            circle = self.mesh.circle(current)
            if circle is None:
                break
            if circle.kind == "subdomain":
                return circle.id
            current = circle.parent
        return self.main_subdomain

    # --- user operations ------------------------------------------------------------------

    def register_user(self, actor: str, name: str, display_name: str = "",
                      password: str = "") -> User:
        with self._admin_lock:
            self._require_privilege(actor, self.main_subdomain, "administer-subdomain")
            user = self.mesh.add_user(f"{self.asn_id}/{name}",
                                      display_name=display_name,
                                      password_hash=hash_password(password))
            self.persist_user(user.id)
            self.persist_asn()
            return user

    def authenticate(self, user_id: str, password: str) -> bool:
        user = self.mesh.users.get(user_id)
        return (user is not None and user.asn == self.asn_id
                and verify_password(password, user.password_hash))

    def follow(self, actor: str, target: str) -> None:
        """Subscribe ``actor`` to ``target``'s posts; for remote targets the
        subscription is forwarded so their ASN fans out to us."""
        with self._admin_lock:
            self._require_privilege(actor, self.main_subdomain, "follow-user")
            if asn_of(target) == self.asn_id:
                self.mesh.add_follower(target, actor)
                self.persist_user(target)
                return
            profile = self.federation.fetch_remote_profile(target)
            self.mesh.upsert_remote_user(target, profile.get("display_name", ""))
            self.mesh.add_follower(target, actor)
            self.persist_user(target)
            self.federation.notify_follow(actor, target)

    def profile(self, user_id: str) -> dict:
        user = self.mesh.require_user(user_id)
        return {"id": user.id, "asn": user.asn, "display_name": user.display_name}

    # --- circle / role administration ---------------------------------------------------------

    def create_subdomain(self, actor: str, name: str, parent: Optional[str],
                         cid: Optional[str] = None):
        with self._admin_lock:
            context = parent if parent is not None else self.main_subdomain
            if self.mesh.circle(context) is not None:
                self._require_privilege(actor, self._context_subdomain(context),
                                        "create-subdomain")
            sd = self.mesh.create_subdomain(self.asn_id, name, parent, actor, cid=cid)
            self.persist_circle(sd.id)
            self.persist_asn()
            return sd

    def create_public_group(self, actor: str, parent: Optional[str],
                            policies: PolicySet = PolicySet(),
                            cid: Optional[str] = None):
        with self._admin_lock:
            self._require_privilege(actor, self._context_subdomain(parent),
                                    "create-public-group")
            group = self.mesh.create_public_group(actor, parent, policies, cid=cid)
            self.persist_circle(group.id)
            return group

    def create_private_group(self, actor: str, parent: Optional[str],
                             cid: Optional[str] = None):
        with self._admin_lock:
            self._require_privilege(actor, self.main_subdomain, "create-private-group")
            group = self.mesh.create_private_group(actor, parent, cid=cid)
            self.persist_circle(group.id, push=False)
            return group

    def create_role(self, actor: str, name: str, privileges: PrivilegeSet,
                    parent: Optional[str] = None, rid: Optional[str] = None) -> Role:
        with self._admin_lock:
            self._require_privilege(actor, self.main_subdomain, "create-role")
            role = self.mesh.create_role(self.asn_id, name, privileges,
                                         parent=parent, rid=rid)
            self.persist_role(role.id)
            self.persist_asn()
            return role

    def assign_role(self, actor: str, user_id: str, role_id: str) -> None:
        with self._admin_lock:
            self._require_privilege(actor, self.main_subdomain, "assign-role")
            self.mesh.assign_role(user_id, role_id)
            self.persist_user(user_id)

    def set_role_privileges(self, actor: str, role_id: str,
                            privileges: PrivilegeSet) -> None:
        with self._admin_lock:
            self._require_privilege(actor, self.main_subdomain, "create-role")
            self.mesh.set_role_privileges(role_id, privileges)
            self.persist_role(role_id)

    def set_subdomain_privileges(self, actor: str, sd_id: str,
                                 privileges: PrivilegeSet) -> None:
        with self._admin_lock:
            self._require_privilege(actor, sd_id, "administer-subdomain")
            self.mesh.set_subdomain_privileges(sd_id, privileges)
            self.persist_circle(sd_id)

    def set_user_privilege(self, actor: str, sd_id: str, user_id: str,
                           privileges: PrivilegeSet) -> None:
        with self._admin_lock:
            self._require_privilege(actor, sd_id, "administer-subdomain")
            self.mesh.set_user_privilege(sd_id, user_id, privileges)
            self.persist_circle(sd_id)

    def _require_circle_manager(self, actor: str, circle_id: str) -> None:
        circle = self.mesh.require_circle(circle_id)
        if circle.kind == "subdomain":
            self._require_privilege(actor, circle_id, "administer-subdomain")
        elif circle.kind == "public_group":
            if actor not in circle.bosses:
                raise PrivilegeDenied(f"{actor} is not a boss of {circle_id}")
        else:
            if actor != circle.owner:
                raise PrivilegeDenied(f"{actor} does not own {circle_id}")

    def set_policies(self, actor: str, circle_id: str, policy_text: str) -> None:
        with self._admin_lock:
            self._require_circle_manager(actor, circle_id)
            self.mesh.set_policies(circle_id, parse_policy_set(policy_text))
            self.persist_circle(circle_id)

    def set_group_privileges(self, actor: str, circle_id: str,
                             gp: GroupPrivileges) -> None:
        with self._admin_lock:
            self._require_circle_manager(actor, circle_id)
            self.mesh.set_group_privileges(circle_id, gp)
            self.persist_circle(circle_id)

    def add_member(self, actor: str, circle_id: str, user_id: str) -> None:
        with self._admin_lock:
            circle = self.mesh.require_circle(circle_id)
            if circle.kind == "public_group" and actor == user_id:
                if actor not in circle.bosses and not check_group_privilege(
                        self.mesh, circle_id, actor, "join"):
                    raise PrivilegeDenied(f"{actor} may not join {circle_id}")
            else:
                self._require_circle_manager(actor, circle_id)
            self.mesh.add_member(circle_id, user_id)
            self.persist_circle(circle_id)

    def add_boss(self, actor: str, circle_id: str, user_id: str) -> None:
        with self._admin_lock:
            group = self.mesh.public_groups.get(circle_id)
            if group is None or actor not in group.bosses:
                raise PrivilegeDenied(f"{actor} is not a boss of {circle_id}")
            self.mesh.add_boss(circle_id, user_id)
            self.persist_circle(circle_id)

    def pair(self, actor: str, remote_asn: str, endpoint: str,
             secret: str) -> PeeringLink:
        with self._admin_lock:
            self._require_privilege(actor, self.main_subdomain, "pair-asn")
            return self.federation.pair(remote_asn, endpoint, secret)

    # --- messages ------------------------------------------------------------------------------

    def _next_message_id(self) -> str:
        while True:
            mid = f"{self.asn_id}/m{next(self._mid_counter)}"
            if self.store.get_message(mid) is None:
                return mid

    def _check_tagging_rights(self, author: str, circle_id: str) -> None:
        circle = self.mesh.circle(circle_id)
        if circle is None:
            raise InvalidCircle(circle_id)
        if circle.kind == "private_group":
            if circle.owner != author:
                raise TaggingDenied(f"{author} does not own {circle_id}")
        elif not check_group_privilege(self.mesh, circle_id, author, "tag"):
            raise TaggingDenied(f"{author} may not tag {circle_id}")

    def post_message(self, author: str, content: str, tags=(), conflicts=(),
                     mid: Optional[str] = None) -> tuple[str, Optional[DeliveryReport]]:
        """Store and propagate; returns (message id, delivery report).

        The report is None while the message sits in the moderation queue.
        """
        self.mesh.require_user(author)
        if asn_of(author) != self.asn_id:
            raise UnknownUser(f"{author} is not local to {self.asn_id}")
        self._require_privilege(author, self.main_subdomain, "post-message")
        message = Message(id=mid or self._next_message_id(), author=author,
                          content=content, tags=frozenset(tags),
                          conflicts=frozenset(conflicts))
        for cid in sorted(message.tags | message.conflicts):
            self._check_tagging_rights(author, cid)

        needs_approval = any(
            circle.group_privileges.moderated
            and author not in group_bosses(self.mesh, cid)
            for cid in sorted(message.tags)
            for circle in [self.mesh.circle(cid)]
            if circle is not None and circle.kind != "private_group"
        )
        if needs_approval:
            self.store.put_message(message, status="pending")
            return message.id, None
        self.store.put_message(message, status="approved")
        return message.id, self.federation.propagate_post(message)

    def moderate_message(self, actor: str, message_id: str,
                         approve: bool) -> Optional[DeliveryReport]:
        with self._admin_lock:
            stored = self.store.get_message(message_id)
            if stored is None:
                raise UnknownMessage(message_id)
            message, status = stored
            if status != "pending":
                raise PrismError(f"message {message_id} is not pending")
            moderated_tags = [
                cid for cid in sorted(message.tags)
                for circle in [self.mesh.circle(cid)]
                if circle is not None and circle.kind != "private_group"
                and circle.group_privileges.moderated
            ]
            if not any(check_group_privilege(self.mesh, cid, actor, "moderate")
                       for cid in moderated_tags):
                raise PrivilegeDenied(f"{actor} may not moderate {message_id}")
            if not approve:
                self.store.set_message_status(message_id, "rejected")
                return None
            self.store.set_message_status(message_id, "approved")
        return self.federation.propagate_post(message)

    def fetch_message(self, reader: str, message_id: str) -> Optional[str]:
        """Content iff the reader may access it; None is deliberately
        indistinguishable between denied and nonexistent."""
        stored = self.store.get_message(message_id)
        if stored is None:
            return None
        message, status = stored
        if reader == message.author:
            return message.content
        if status != "approved":
            return None
        if self.mesh.users.get(reader) is None:
            return None
        if check_access(self.mesh, message, reader, self.mode).allowed:
            return message.content
        return None

    def inbox(self, user_id: str):
        return self.store.inbox(user_id)

    # --- remote ingress -------------------------------------------------------------------------

    def receive_remote_post(self, envelope: RemoteEnvelope) -> dict:
        """Store, evaluate with local state, notify local followers.
        Idempotent by envelope id."""
        if self.store.envelope_processed(envelope.envelope_id):
            return {"delivered": [], "duplicate": True}
        message = envelope.message
        self.store.put_message(message, status="approved")
        author_record = self.mesh.users.get(message.author)
        followers = sorted(author_record.followers) if author_record else []
        local = [u for u in followers
                 if asn_of(u) == self.asn_id and u in self.mesh.users]
        delivered = []
        for user in sorted(u for u in local
                           if check_access(self.mesh, message, u, self.mode).allowed):
            self.store.append_inbox(user, message.id)
            delivered.append(user)
        self.store.mark_envelope_processed(envelope.envelope_id)
        return {"delivered": delivered, "duplicate": False}

    def _authenticate_remote(self, headers: dict[str, str], payload: bytes):
        origin = headers.get(ORIGIN_HEADER, "")
        signature = headers.get(SIGNATURE_HEADER, "")
        link = self.federation.links.get(origin)
        if link is None or link.state != "active":
            raise UnpairedOrigin(origin or "<missing origin>")
        if not verify_body(link.secret, payload, signature):
            raise AuthFailed(f"bad signature from {origin}")
        return link

    def handle_remote(self, method: str, path: str, body: bytes,
                      headers: dict[str, str]) -> tuple[int, bytes]:
        """Federation ingress shared by HTTP and in-process transports."""
        try:
            if method == "POST" and path == PAIR_PATH:
                return self._handle_pair(body, headers)
            if method == "POST" and path == MESSAGES_PATH:
                self._authenticate_remote(headers, body)
                result = self.receive_remote_post(RemoteEnvelope.from_wire(body))
                return 200, canonical_json(result)
            if method == "POST" and path == CIRCLES_PATH:
                self._authenticate_remote(headers, body)
                replica = ReplicaRecord.from_wire(body)
                outcome = self.store.apply_replica_update(replica)
                if outcome == "applied":
                    self.mesh.upsert_circle(circle_from_payload(replica.circle))
                return 200, canonical_json({"status": outcome})
            if method == "POST" and path == FOLLOWS_PATH:
                self._authenticate_remote(headers, body)
                data = json.loads(body.decode("utf-8"))
                target = data["target"]
                if asn_of(target) != self.asn_id:
                    return 404, canonical_json({"error": "unknown-user"})
                self.mesh.add_follower(target, data["follower"])
                self.persist_user(target)
                return 200, canonical_json({"status": "ok"})
            if method == "GET" and path.startswith(USERS_PATH + "/"):
                self._authenticate_remote(headers, path.encode("utf-8"))
                user_id = urllib.parse.unquote(path[len(USERS_PATH) + 1:])
                user = self.mesh.users.get(user_id)
                if user is None or user.asn != self.asn_id:
                    return 404, canonical_json({"error": "unknown-user"})
                return 200, canonical_json(self.profile(user_id))
            return 404, canonical_json({"error": "not-found"})
        except UnpairedOrigin as err:
            return 403, canonical_json({"error": "unpaired-origin", "detail": str(err)})
        except AuthFailed as err:
            return 403, canonical_json({"error": "auth-failed", "detail": str(err)})
        except DuplicateIdDifferentContent as err:
            return 409, canonical_json({"error": err.code, "detail": str(err)})
        except PrismError as err:
            return 400, canonical_json({"error": err.code, "detail": str(err)})

    def _handle_pair(self, body: bytes, headers: dict[str, str]) -> tuple[int, bytes]:
        data = json.loads(body.decode("utf-8"))
        origin = headers.get(ORIGIN_HEADER, "")
        link = self.federation.links.get(origin)
        if link is None:
            return 409, canonical_json({"error": "unknown-peer"})
        if not verify_body(link.secret, body, headers.get(SIGNATURE_HEADER, "")):
            return 403, canonical_json({"error": "auth-failed"})
        descriptor = self.federation.accept_handshake(origin, data.get("endpoint", ""))
        return 200, canonical_json(descriptor)

    # --- lifecycle ----------------------------------------------------------------------------------

    def drain(self) -> None:
        self.federation.drain()

    def close(self) -> None:
        self.federation.close()
        self.store.close()

    def __enter__(self) -> "AsnInstance":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
