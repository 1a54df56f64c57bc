"""Local-facing surface: token sessions, the JSON API, the HTTP server.

Routing is a plain dispatch over (method, path) implemented without a web
framework; ``handle_api`` mirrors ``AsnInstance.handle_remote`` so tests
can drive the full surface in-process while ``PrismHttpServer`` exposes
both the local ``/api/v1`` and the federation ``/remote/v1`` trees over
one listener.

Every mutating route resolves the session and goes through the privilege
engine inside the instance operation it calls.  Message reads answer 404
for denied and nonexistent ids alike so callers cannot probe which
message ids exist.
"""

from __future__ import annotations

import json
import logging
import secrets
import threading
import time
import urllib.parse
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .errors import (
    AuthFailed,
    AuthRequired,
    DuplicateId,
    DuplicateIdDifferentContent,
    DuplicateLink,
    PrismError,
    PrivilegeDenied,
    TaggingDenied,
    UnpairedOrigin,
)
from .instance import AsnInstance
from .policy import parse_policy_set, print_policy_set
from .privileges import GroupPrivileges, PrivilegeSet
from .wire import canonical_json, parse_privilege_assignment

logger = logging.getLogger(__name__)

API_PREFIX = "/api/v1"
REMOTE_PREFIX = "/remote/v1"

_STATUS_BY_CODE = {
    AuthRequired.code: 401,
    AuthFailed.code: 401,
    PrivilegeDenied.code: 403,
    TaggingDenied.code: 403,
    UnpairedOrigin.code: 403,
    DuplicateLink.code: 409,
    DuplicateId.code: 409,
    DuplicateIdDifferentContent.code: 409,
}


@dataclass(frozen=True)
class SessionToken:
    token: str
    user_id: str
    expires_at: float


class SessionManager:
    def __init__(self, ttl: float):
        self.ttl = ttl
        self._sessions: dict[str, SessionToken] = {}
        self._lock = threading.Lock()

    def create(self, user_id: str) -> SessionToken:
        session = SessionToken(token=secrets.token_urlsafe(24), user_id=user_id,
                               expires_at=time.time() + self.ttl)
        with self._lock:
            self._sessions[session.token] = session
        return session

    def resolve(self, token: str) -> str:
        with self._lock:
            session = self._sessions.get(token)
            if session is None:
                raise AuthRequired("unknown session token")
            if session.expires_at < time.time():
                del self._sessions[token]
                raise AuthRequired("session expired")
            return session.user_id


class Gateway:
    def __init__(self, instance: AsnInstance):
        self.instance = instance
        self.sessions = SessionManager(ttl=instance.config.session_ttl)

    # --- request plumbing ---------------------------------------------------------

    def _user(self, headers: dict[str, str]) -> str:
        auth = headers.get("Authorization", "")
        if not auth.startswith("Bearer "):
            raise AuthRequired("missing bearer token")
        return self.sessions.resolve(auth[len("Bearer "):].strip())

    @staticmethod
    def _json(body: bytes) -> dict:
        if not body:
            return {}
        return json.loads(body.decode("utf-8"))

    def handle_api(self, method: str, path: str, body: bytes,
                   headers: dict[str, str]) -> tuple[int, bytes]:
        try:
            return self._route(method, path, body, headers)
        except PrismError as err:
            status = _STATUS_BY_CODE.get(err.code, 400)
            return status, canonical_json({"error": err.code, "detail": str(err)})
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            return 400, canonical_json({"error": "bad-request", "detail": str(err)})

    # --- routes ------------------------------------------------------------------------

    def _route(self, method: str, path: str, body: bytes,
               headers: dict[str, str]) -> tuple[int, bytes]:
        instance = self.instance
        parts = [p for p in path[len(API_PREFIX):].split("/") if p]

        if method == "POST" and parts == ["session"]:
            data = self._json(body)
            user_id = data["user"]
            if not instance.authenticate(user_id, data.get("password", "")):
                raise AuthFailed("bad credentials")
            session = self.sessions.create(user_id)
            return 200, canonical_json({"token": session.token,
                                        "expires_at": session.expires_at})

        if method == "POST" and parts == ["messages"]:
            user = self._user(headers)
            data = self._json(body)
            mid, report = instance.post_message(
                user, data.get("content", ""),
                tags=data.get("tags", ()), conflicts=data.get("conflicts", ()))
            status = "pending" if report is None else "accepted"
            return 200, canonical_json({"id": mid, "status": status})

        if method == "GET" and len(parts) == 2 and parts[0] == "messages":
            user = self._user(headers)
            content = instance.fetch_message(user, urllib.parse.unquote(parts[1]))
            if content is None:
                # same shape for denied and nonexistent
                return 404, canonical_json({"error": "not-available"})
            return 200, canonical_json({"id": urllib.parse.unquote(parts[1]),
                                        "content": content})

        if method == "POST" and len(parts) == 3 and parts[0] == "messages" \
                and parts[2] == "moderate":
            user = self._user(headers)
            data = self._json(body)
            report = instance.moderate_message(user, urllib.parse.unquote(parts[1]),
                                               approve=bool(data.get("approve", False)))
            return 200, canonical_json(
                {"status": "approved" if report is not None else "rejected"})

        if method == "GET" and parts == ["inbox"]:
            user = self._user(headers)
            entries = [{"message_id": e.message_id, "seq": e.seq}
                       for e in instance.inbox(user)]
            return 200, canonical_json({"entries": entries})

        if method == "POST" and parts == ["follow"]:
            user = self._user(headers)
            instance.follow(user, self._json(body)["target"])
            return 200, canonical_json({"status": "ok"})

        if method == "POST" and parts == ["users"]:
            user = self._user(headers)
            data = self._json(body)
            created = instance.register_user(user, data["name"],
                                             display_name=data.get("display_name", ""),
                                             password=data.get("password", ""))
            return 200, canonical_json({"id": created.id})

        if method == "GET" and len(parts) == 2 and parts[0] == "users":
            user = self._user(headers)
            target = urllib.parse.unquote(parts[1])
            if target != user:
                raise PrivilegeDenied("profiles are self-read only")
            return 200, canonical_json(instance.profile(target))

        if method == "POST" and parts == ["circles"]:
            return self._create_circle(self._user(headers), self._json(body))

        if method == "GET" and len(parts) == 3 and parts[0] == "circles" \
                and parts[2] == "policies":
            user = self._user(headers)
            circle_id = urllib.parse.unquote(parts[1])
            self.instance._require_circle_manager(user, circle_id)
            text = print_policy_set(self.instance.mesh.require_circle(circle_id).policies)
            return 200, canonical_json({"circle": circle_id, "text": text})

        if method == "POST" and len(parts) == 3 and parts[0] == "circles":
            user = self._user(headers)
            circle_id = urllib.parse.unquote(parts[1])
            data = self._json(body)
            if parts[2] == "members":
                instance.add_member(user, circle_id, data["user"])
            elif parts[2] == "bosses":
                instance.add_boss(user, circle_id, data["user"])
            elif parts[2] == "policies":
                instance.set_policies(user, circle_id, data["text"])
            elif parts[2] == "group-privileges":
                instance.set_group_privileges(user, circle_id, GroupPrivileges(
                    join=data.get("join", "closed"),
                    tagging=data.get("tagging", "members"),
                    moderated=bool(data.get("moderated", False))))
            else:
                return 404, canonical_json({"error": "not-found"})
            return 200, canonical_json({"status": "ok"})

        if method == "POST" and parts == ["roles"]:
            user = self._user(headers)
            data = self._json(body)
            role = instance.create_role(
                user, data["name"],
                PrivilegeSet.from_pairs(data.get("privileges", [])),
                parent=data.get("parent"))
            return 200, canonical_json({"id": role.id})

        if method == "POST" and parts == ["roles", "assign"]:
            user = self._user(headers)
            data = self._json(body)
            instance.assign_role(user, data["user"], data["role"])
            return 200, canonical_json({"status": "ok"})

        if method == "POST" and parts == ["privileges"]:
            user = self._user(headers)
            data = self._json(body)
            applied = [self._apply_privilege_line(user, line)
                       for line in data["assignments"].splitlines() if line.strip()]
            return 200, canonical_json({"applied": len(applied)})

        if method == "POST" and parts == ["admin", "pair"]:
            user = self._user(headers)
            data = self._json(body)
            link = instance.pair(user, data["asn"], data["endpoint"], data["secret"])
            return 200, canonical_json({"asn": link.asn, "state": link.state})

        return 404, canonical_json({"error": "not-found"})

    def _create_circle(self, user: str, data: dict) -> tuple[int, bytes]:
        kind = data.get("kind", "public")
        parent = data.get("parent")
        instance = self.instance
        if kind == "subdomain":
            circle = instance.create_subdomain(user, data["name"], parent)
        elif kind == "public":
            policies = parse_policy_set(data.get("policies", ""))
            circle = instance.create_public_group(user, parent, policies)
        elif kind == "private":
            circle = instance.create_private_group(user, parent)
        else:
            return 400, canonical_json({"error": "bad-request",
                                        "detail": f"unknown circle kind {kind!r}"})
        return 200, canonical_json({"id": circle.id, "kind": circle.kind})

    def _apply_privilege_line(self, actor: str, line: str) -> str:
        """Apply one ``grant|deny <action> to <subject>`` assignment."""
        effect, action, subject = parse_privilege_assignment(line.strip())
        entry = PrivilegeSet.from_pairs([(action, effect)])
        instance = self.instance
        if subject.startswith("role:"):
            role_id = subject[len("role:"):]
            merged = instance.mesh.roles[role_id].privileges.refine(entry)
            instance.set_role_privileges(actor, role_id, merged)
        elif subject.startswith("subdomain:"):
            sd_id = subject[len("subdomain:"):]
            merged = instance.mesh.subdomains[sd_id].privileges.refine(entry)
            instance.set_subdomain_privileges(actor, sd_id, merged)
        elif subject.startswith("user:"):
            user_part, _, sd_part = subject[len("user:"):].partition("@subdomain:")
            if not sd_part:
                raise ValueError(f"user assignment needs @subdomain: {line!r}")
            current = instance.mesh.subdomains[sd_part].user_privileges.get(
                user_part, PrivilegeSet())
            instance.set_user_privilege(actor, sd_part, user_part,
                                        current.refine(entry))
        else:
            raise ValueError(f"unknown assignment subject {subject!r}")
        return subject


class _Handler(BaseHTTPRequestHandler):
    gateway: Gateway  # injected by PrismHttpServer
    protocol_version = "HTTP/1.1"

    def _dispatch(self, method: str) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        headers = {k: v for k, v in self.headers.items()}
        path = urllib.parse.urlparse(self.path).path
        if path.startswith(REMOTE_PREFIX):
            status, payload = self.gateway.instance.handle_remote(
                method, path, body, headers)
        elif path.startswith(API_PREFIX):
            status, payload = self.gateway.handle_api(method, path, body, headers)
        else:
            status, payload = 404, canonical_json({"error": "not-found"})
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):  # noqa: N802 (http.server API)
        self._dispatch("GET")

    def do_POST(self):  # noqa: N802
        self._dispatch("POST")

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)


class PrismHttpServer:
    """Threaded HTTP front for one instance; serves /api/v1 and /remote/v1."""

    def __init__(self, gateway: Gateway, listen: Optional[str] = None):
        host, _, port = (listen or gateway.instance.config.listen).rpartition(":")
        handler = type("BoundHandler", (_Handler,), {"gateway": gateway})
        self._server = ThreadingHTTPServer((host or "127.0.0.1", int(port)), handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "PrismHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="prism-http", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
