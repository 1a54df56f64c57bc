"""Canonical serialization and signing for everything that crosses a wire.

Bodies are canonical JSON: UTF-8, keys in lexicographic order, compact
separators, non-ASCII escaped.  Signatures are HMAC-SHA256 over the exact
body bytes using the peering link's shared secret, sent hex-encoded in
the ``X-Prism-Signature`` header alongside ``X-Prism-Origin``.  Any byte
change invalidates the signature.

One envelope exists per (message, destination ASN); its id is the
SHA-256 of ``"<message-id>|<destination>"`` so retries regenerate the
same id and receipt stays idempotent.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass
from typing import Any

from .model import Circle, Message, PrivateGroup, PublicGroup, Subdomain
from .policy import parse_policy_set, print_policy_set
from .privileges import GroupPrivileges, PrivilegeSet

SIGNATURE_HEADER = "X-Prism-Signature"
ORIGIN_HEADER = "X-Prism-Origin"


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True).encode("ascii")


def sign_body(secret: str, body: bytes) -> str:
    return hmac.new(secret.encode("utf-8"), body, hashlib.sha256).hexdigest()


def verify_body(secret: str, body: bytes, signature: str) -> bool:
    return hmac.compare_digest(sign_body(secret, body), signature)


def envelope_id(message_id: str, destination_asn: str) -> str:
    return hashlib.sha256(f"{message_id}|{destination_asn}".encode("utf-8")).hexdigest()


# --- remote envelope -----------------------------------------------------------

@dataclass(frozen=True)
class RemoteEnvelope:
    envelope_id: str
    origin: str
    message: Message
    origin_ts: int  # unix milliseconds at the origin

    @classmethod
    def for_destination(cls, origin: str, message: Message, destination: str,
                        origin_ts: int) -> "RemoteEnvelope":
        return cls(envelope_id=envelope_id(message.id, destination),
                   origin=origin, message=message, origin_ts=origin_ts)

    def to_wire(self) -> bytes:
        return canonical_json({
            "author": self.message.author,
            "conflicts": sorted(self.message.conflicts),
            "content": self.message.content,
            "envelope_id": self.envelope_id,
            "message_id": self.message.id,
            "origin": self.origin,
            "origin_ts": self.origin_ts,
            "tags": sorted(self.message.tags),
        })

    @classmethod
    def from_wire(cls, body: bytes) -> "RemoteEnvelope":
        data = json.loads(body.decode("utf-8"))
        message = Message(
            id=data["message_id"],
            author=data["author"],
            content=data["content"],
            tags=frozenset(data["tags"]),
            conflicts=frozenset(data["conflicts"]),
        )
        return cls(envelope_id=data["envelope_id"], origin=data["origin"],
                   message=message, origin_ts=data["origin_ts"])


# --- replicated circles ----------------------------------------------------------

def circle_to_payload(circle: Circle, include_private: bool = False) -> dict:
    """Snapshot a circle for the wire or, with ``include_private``, for
    local storage.  Domain privileges are only enforceable within their own
    ASN, so replication payloads omit them."""
    payload: dict[str, Any] = {
        "id": circle.id,
        "kind": circle.kind,
        "parent": circle.parent,
        "members": sorted(circle.members),
        "policies": print_policy_set(circle.policies),
    }
    if isinstance(circle, Subdomain):
        payload.update(asn=circle.asn, name=circle.name,
                       founding_admin=circle.founding_admin,
                       group_privileges=_gp_to_payload(circle.group_privileges))
        if include_private:
            payload["privileges"] = _privilege_pairs(circle.privileges)
            payload["user_privileges"] = {
                uid: _privilege_pairs(ps)
                for uid, ps in sorted(circle.user_privileges.items())
            }
    elif isinstance(circle, PublicGroup):
        payload.update(owner=circle.owner, bosses=sorted(circle.bosses),
                       group_privileges=_gp_to_payload(circle.group_privileges))
    else:
        payload.update(owner=circle.owner)
    return payload


def _privilege_pairs(privileges: PrivilegeSet) -> list[list[str]]:
    return [[e.action, e.effect] for e in privileges.entries]


def circle_from_payload(payload: dict) -> Circle:
    kind = payload["kind"]
    policies = parse_policy_set(payload["policies"])
    members = frozenset(payload["members"])
    parent = payload["parent"]
    if kind == "subdomain":
        return Subdomain(
            id=payload["id"], asn=payload["asn"], name=payload["name"],
            founding_admin=payload["founding_admin"], parent=parent,
            members=members, policies=policies,
            privileges=PrivilegeSet.from_pairs(payload.get("privileges", [])),
            user_privileges={
                uid: PrivilegeSet.from_pairs(pairs)
                for uid, pairs in payload.get("user_privileges", {}).items()
            },
            group_privileges=_gp_from_payload(payload.get("group_privileges")),
        )
    if kind == "public_group":
        return PublicGroup(
            id=payload["id"], owner=payload["owner"], parent=parent,
            members=members, bosses=frozenset(payload["bosses"]),
            policies=policies,
            group_privileges=_gp_from_payload(payload.get("group_privileges")),
        )
    if kind == "private_group":
        return PrivateGroup(id=payload["id"], owner=payload["owner"],
                            parent=parent, members=members, policies=policies)
    raise ValueError(f"unknown circle kind {kind!r}")


def _gp_to_payload(gp: GroupPrivileges) -> dict:
    return {"join": gp.join, "moderated": gp.moderated, "tagging": gp.tagging}


def _gp_from_payload(data: dict | None) -> GroupPrivileges:
    if not data:
        return GroupPrivileges()
    return GroupPrivileges(join=data["join"], tagging=data["tagging"],
                           moderated=data["moderated"])


@dataclass(frozen=True)
class ReplicaRecord:
    origin: str
    version: int
    circle: dict  # circle payload as produced by circle_to_payload

    @property
    def circle_id(self) -> str:
        return self.circle["id"]

    def to_wire(self) -> bytes:
        return canonical_json({
            "circle": self.circle,
            "origin": self.origin,
            "version": self.version,
        })

    @classmethod
    def from_wire(cls, body: bytes) -> "ReplicaRecord":
        data = json.loads(body.decode("utf-8"))
        return cls(origin=data["origin"], version=data["version"],
                   circle=data["circle"])


# --- privilege assignment text format ---------------------------------------------

def print_privilege_assignment(effect: str, action: str, subject: str) -> str:
    """``grant|deny <action> to role:<id>|subdomain:<id>|user:<id>@subdomain:<id>``"""
    return f"{effect} {action} to {subject}"


def parse_privilege_assignment(line: str) -> tuple[str, str, str]:
    parts = line.split()
    if len(parts) != 4 or parts[2] != "to" or parts[0] not in ("grant", "deny"):
        raise ValueError(f"malformed privilege assignment {line!r}")
    return parts[0], parts[1], parts[3]


def privilege_set_to_lines(subject: str, privileges: PrivilegeSet) -> list[str]:
    return [print_privilege_assignment(e.effect, e.action, subject)
            for e in privileges.entries]
