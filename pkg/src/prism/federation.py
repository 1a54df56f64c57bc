"""The remote interface: pairing, fan-out, replication, profile fetch.

Communication happens only between manually paired instances; each link
carries a shared secret (established out of band by the two
administrators) used to sign every request.  Fan-out groups an author's
remote followers by ASN and sends exactly one envelope per destination
domain, preceded by replica pushes for every circle on the message's tag
and conflict ancestor chains so the destination evaluates access against
current data.  The receiving side recomputes the audience with its own
state; origins never evaluate for remote readers.

A fixed-width worker pool drives deliveries.  Pool width only affects
latency: the delivered set is identical for any width >= 1.  Failures
retry with exponential backoff up to a cap, then the destination is
reported failed; local delivery never depends on remote outcomes.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional, Protocol

from .errors import (
    AuthFailed,
    AuthorNotLocal,
    DuplicateLink,
    RemoteUnavailable,
    UnknownUser,
    UnpairedOrigin,
)
from .fipm import compute_audience
from .ids import asn_of
from .model import Message
from .wire import (
    ORIGIN_HEADER,
    SIGNATURE_HEADER,
    RemoteEnvelope,
    ReplicaRecord,
    canonical_json,
    sign_body,
)

if TYPE_CHECKING:
    from .instance import AsnInstance

logger = logging.getLogger(__name__)

PAIR_PATH = "/remote/v1/pair"
MESSAGES_PATH = "/remote/v1/messages"
CIRCLES_PATH = "/remote/v1/circles"
USERS_PATH = "/remote/v1/users"
FOLLOWS_PATH = "/remote/v1/follows"


@dataclass(frozen=True)
class PeeringLink:
    asn: str
    endpoint: str
    secret: str
    state: str = "active"  # active | suspended


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.05
    factor: float = 2.0

    def delay(self, attempt: int) -> float:
        return self.base_delay * (self.factor ** (attempt - 1))


class Transport(Protocol):
    def post(self, endpoint: str, path: str, body: bytes,
             headers: dict[str, str]) -> tuple[int, bytes]: ...

    def get(self, endpoint: str, path: str,
            headers: dict[str, str]) -> tuple[int, bytes]: ...


class HttpTransport:
    """Plain HTTP client for real deployments."""

    def __init__(self, timeout: float = 10.0):
        self.timeout = timeout

    def post(self, endpoint: str, path: str, body: bytes,
             headers: dict[str, str]) -> tuple[int, bytes]:
        request = urllib.request.Request(
            endpoint.rstrip("/") + path, data=body,
            headers={"Content-Type": "application/json", **headers},
            method="POST",
        )
        return self._send(request)

    def get(self, endpoint: str, path: str,
            headers: dict[str, str]) -> tuple[int, bytes]:
        request = urllib.request.Request(
            endpoint.rstrip("/") + path, headers=headers, method="GET")
        return self._send(request)

    def _send(self, request: urllib.request.Request) -> tuple[int, bytes]:
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                return response.status, response.read()
        except urllib.error.HTTPError as err:
            return err.code, err.read()
        except (urllib.error.URLError, OSError) as err:
            raise RemoteUnavailable(str(err)) from err


class InProcessTransport:
    """Dispatches to other instances in the same process.

    Used by the multi-ASN simulation suites and benchmarks.  Supports an
    injected per-destination latency (seconds) so geo-distribution shapes
    can be reproduced deterministically, and counts requests per path for
    the envelope-count invariants.
    """

    def __init__(self, latency: Optional[Callable[[str], float]] = None):
        self._instances: dict[str, "AsnInstance"] = {}
        self._latency = latency
        self._lock = threading.Lock()
        self.counts: dict[tuple[str, str], int] = {}

    def register(self, endpoint: str, instance: "AsnInstance") -> None:
        self._instances[endpoint] = instance

    def _dispatch(self, method: str, endpoint: str, path: str, body: bytes,
                  headers: dict[str, str]) -> tuple[int, bytes]:
        instance = self._instances.get(endpoint)
        if instance is None:
            raise RemoteUnavailable(endpoint)
        if self._latency is not None:
            time.sleep(self._latency(endpoint))
        with self._lock:
            key = (endpoint, path.split("?")[0])
            self.counts[key] = self.counts.get(key, 0) + 1
        return instance.handle_remote(method, path, body, headers)

    def post(self, endpoint, path, body, headers):
        return self._dispatch("POST", endpoint, path, body, headers)

    def get(self, endpoint, path, headers):
        return self._dispatch("GET", endpoint, path, b"", headers)

    def count_for(self, path: str) -> int:
        with self._lock:
            return sum(n for (_, p), n in self.counts.items() if p == path)


@dataclass
class DestinationOutcome:
    status: str  # delivered | retrying | failed
    attempts: int = 0
    detail: str = ""


class DeliveryReport:
    """Per-destination outcomes plus the locally notified users."""

    def __init__(self, local_notified: list[str]):
        self.local_notified = list(local_notified)
        self._outcomes: dict[str, DestinationOutcome] = {}
        self._futures: dict[str, Future] = {}
        self._lock = threading.Lock()

    def _init_destination(self, destination: str) -> None:
        with self._lock:
            self._outcomes[destination] = DestinationOutcome("retrying", 0)

    def _attach(self, destination: str, future: Future) -> None:
        with self._lock:
            self._futures[destination] = future

    def _record(self, destination: str, outcome: DestinationOutcome) -> None:
        with self._lock:
            self._outcomes[destination] = outcome

    def wait(self, timeout: Optional[float] = None) -> dict[str, DestinationOutcome]:
        for future in list(self._futures.values()):
            future.result(timeout=timeout)
        return self.outcomes()

    def outcomes(self) -> dict[str, DestinationOutcome]:
        with self._lock:
            return dict(self._outcomes)

    @property
    def delivered_destinations(self) -> set[str]:
        return {d for d, o in self.outcomes().items() if o.status == "delivered"}


class Federation:
    """Remote-interface engine bound to one instance."""

    def __init__(self, instance: "AsnInstance", transport: Transport,
                 pool_width: int = 4, retry: RetryPolicy = RetryPolicy(),
                 profile_ttl: float = 30.0):
        self.instance = instance
        self.transport = transport
        self.retry = retry
        self.pool = ThreadPoolExecutor(
            max_workers=max(1, pool_width),
            thread_name_prefix=f"deliver-{instance.asn_id}",
        )
        self.links: dict[str, PeeringLink] = {}
        self.profile_ttl = profile_ttl
        self._profiles: dict[str, tuple[float, dict]] = {}
        self._pending: set[Future] = set()
        self._pending_lock = threading.Lock()

    # --- link management ------------------------------------------------------

    @property
    def asn_id(self) -> str:
        return self.instance.asn_id

    def restore_link(self, link: PeeringLink) -> None:
        self.links[link.asn] = link

    def active_link(self, remote_asn: str) -> Optional[PeeringLink]:
        link = self.links.get(remote_asn)
        return link if link is not None and link.state == "active" else None

    def pair(self, remote_asn: str, endpoint: str, secret: str) -> PeeringLink:
        """Persist the link and attempt the descriptor handshake.

        Pairing is manual on both ends: the handshake only verifies when
        the remote administrator has installed the same secret; until
        then the remote side answers 409 and will reach back once paired.
        """
        if remote_asn in self.links:
            raise DuplicateLink(remote_asn)
        link = PeeringLink(asn=remote_asn, endpoint=endpoint, secret=secret)
        self.links[remote_asn] = link
        self.instance.persist_peer(link)

        body = canonical_json({"asn": self.asn_id,
                               "endpoint": self.instance.config.endpoint})
        try:
            status, payload = self.transport.post(
                endpoint, PAIR_PATH, body, self._headers(link, body))
        except RemoteUnavailable:
            logger.info("pair handshake with %s deferred: remote unavailable", remote_asn)
            return link
        if status == 200:
            descriptor = json.loads(payload.decode("utf-8"))
            if descriptor.get("asn") != remote_asn:
                del self.links[remote_asn]
                raise AuthFailed(f"handshake descriptor mismatch from {endpoint}")
            logger.info("paired with %s at %s", remote_asn, endpoint)
        elif status == 409:
            logger.info("pair handshake with %s deferred: not yet paired there", remote_asn)
        else:
            del self.links[remote_asn]
            raise AuthFailed(f"handshake with {remote_asn} failed: {status}")
        return link

    def accept_handshake(self, origin: str, endpoint: str) -> dict:
        link = self.links.get(origin)
        if link is None:
            raise UnpairedOrigin(origin)
        if link.endpoint != endpoint:
            updated = PeeringLink(asn=origin, endpoint=endpoint,
                                  secret=link.secret, state="active")
            self.links[origin] = updated
            self.instance.persist_peer(updated)
        return {"asn": self.asn_id, "endpoint": self.instance.config.endpoint}

    def _headers(self, link: PeeringLink, body: bytes) -> dict[str, str]:
        return {
            ORIGIN_HEADER: self.asn_id,
            SIGNATURE_HEADER: sign_body(link.secret, body),
        }

    # --- fan-out -----------------------------------------------------------------

    def propagate_post(self, message: Message) -> DeliveryReport:
        """Steps of the posting pipeline past local storage: notify local
        followers through the access check, forward one envelope per
        remote destination domain."""
        if asn_of(message.author) != self.asn_id:
            raise AuthorNotLocal(message.author)
        mesh = self.instance.mesh
        followers = sorted(mesh.require_user(message.author).followers)
        local = [u for u in followers
                 if asn_of(u) == self.asn_id and u in mesh.users]
        remote = [u for u in followers if asn_of(u) != self.asn_id]

        allowed = compute_audience(mesh, message, local, self.instance.mode)
        notified = []
        for user in sorted(allowed):
            self.instance.store.append_inbox(user, message.id)
            notified.append(user)

        report = DeliveryReport(local_notified=notified)
        destinations = sorted({asn_of(u) for u in remote})
        replicas = self._chain_replicas(message)
        for destination in destinations:
            report._init_destination(destination)
            future = self.pool.submit(self._deliver, destination, message,
                                      replicas, report)
            report._attach(destination, future)
            self._track(future)
        return report

    def _chain_replicas(self, message: Message) -> list[ReplicaRecord]:
        """Replica records the destination needs to evaluate this message
        exactly as the origin would: every resolvable circle on the
        tag/conflict ancestor chains (root-first so parents land before
        children) plus any circle those chains' policies test membership
        against."""
        mesh = self.instance.mesh
        ordered: list[str] = []
        seen: set[str] = set()
        for cid in sorted(message.tags | message.conflicts):
            if not mesh.circle_exists(cid):
                continue
            for ancestor in reversed(mesh.ancestor_chain(cid)):
                if ancestor not in seen:
                    seen.add(ancestor)
                    ordered.append(ancestor)
        for cid in list(ordered):
            for rule in mesh.require_circle(cid).policies.rules:
                for pred in rule.predicates:
                    if pred.kind in ("author-member-of", "reader-member-of") \
                            and pred.arg not in seen and mesh.circle_exists(pred.arg):
                        seen.add(pred.arg)
                        ordered.append(pred.arg)
        return [self.instance.replica_for(cid) for cid in ordered]

    def _deliver(self, destination: str, message: Message,
                 replicas: list[ReplicaRecord], report: DeliveryReport) -> None:
        link = self.active_link(destination)
        if link is None:
            report._record(destination, DestinationOutcome("failed", 0, "unpaired"))
            return
        envelope = RemoteEnvelope.for_destination(
            self.asn_id, message, destination,
            origin_ts=int(time.time() * 1000))
        attempts = 0
        while attempts < self.retry.max_attempts:
            attempts += 1
            report._record(destination, DestinationOutcome("retrying", attempts))
            try:
                for replica in replicas:
                    self._signed_post(link, CIRCLES_PATH, replica.to_wire())
                status, _ = self._signed_post(link, MESSAGES_PATH, envelope.to_wire())
            except RemoteUnavailable as err:
                detail = str(err)
            else:
                if status == 200:
                    report._record(destination,
                                   DestinationOutcome("delivered", attempts))
                    return
                if status in (401, 403, 409):
                    report._record(destination, DestinationOutcome(
                        "failed", attempts, f"rejected: {status}"))
                    return
                detail = f"status {status}"
            if attempts < self.retry.max_attempts:
                time.sleep(self.retry.delay(attempts))
        report._record(destination, DestinationOutcome("failed", attempts, detail))

    def _signed_post(self, link: PeeringLink, path: str,
                     body: bytes) -> tuple[int, bytes]:
        return self.transport.post(link.endpoint, path, body,
                                   self._headers(link, body))

    # --- replication -----------------------------------------------------------------

    def push_circle_update(self, circle_id: str) -> dict[str, Future]:
        """Send the current replica to every paired ASN holding members."""
        mesh = self.instance.mesh
        circle = mesh.circle(circle_id)
        if circle is None:
            return {}
        interested = sorted({asn_of(u) for u in circle.members}
                            - {self.asn_id, ""})
        replica = self.instance.replica_for(circle_id)
        futures: dict[str, Future] = {}
        for destination in interested:
            if self.active_link(destination) is None:
                continue
            future = self.pool.submit(self._push_replica, destination, replica)
            futures[destination] = future
            self._track(future)
        return futures

    def _push_replica(self, destination: str, replica: ReplicaRecord) -> str:
        link = self.active_link(destination)
        if link is None:
            return "failed"
        attempts = 0
        while attempts < self.retry.max_attempts:
            attempts += 1
            try:
                status, _ = self._signed_post(link, CIRCLES_PATH, replica.to_wire())
            except RemoteUnavailable:
                status = None
            if status == 200:
                return "delivered"
            if attempts < self.retry.max_attempts:
                time.sleep(self.retry.delay(attempts))
        return "failed"

    # --- remote reads -----------------------------------------------------------------

    def fetch_remote_profile(self, user_id: str) -> dict:
        remote_asn = asn_of(user_id)
        link = self.active_link(remote_asn)
        if link is None:
            raise UnpairedOrigin(remote_asn)
        cached = self._profiles.get(user_id)
        now = time.monotonic()
        if cached is not None and now - cached[0] < self.profile_ttl:
            return cached[1]
        path = f"{USERS_PATH}/{urllib.parse.quote(user_id, safe='')}"
        headers = {
            ORIGIN_HEADER: self.asn_id,
            SIGNATURE_HEADER: sign_body(link.secret, path.encode("utf-8")),
        }
        attempts = 0
        while True:
            attempts += 1
            try:
                status, payload = self.transport.get(link.endpoint, path, headers)
                break
            except RemoteUnavailable:
                if attempts >= self.retry.max_attempts:
                    raise
                time.sleep(self.retry.delay(attempts))
        if status == 404:
            raise UnknownUser(user_id)
        if status != 200:
            raise RemoteUnavailable(f"profile fetch failed: {status}")
        profile = json.loads(payload.decode("utf-8"))
        self._profiles[user_id] = (now, profile)
        return profile

    def notify_follow(self, follower: str, target: str) -> None:
        """Tell the target's ASN that a local user follows them."""
        remote_asn = asn_of(target)
        link = self.active_link(remote_asn)
        if link is None:
            raise UnpairedOrigin(remote_asn)
        body = canonical_json({"follower": follower, "target": target})
        status, payload = self._signed_post(link, FOLLOWS_PATH, body)
        if status != 200:
            raise RemoteUnavailable(f"follow notification failed: {status}")

    # --- lifecycle ------------------------------------------------------------------------

    def _track(self, future: Future) -> None:
        with self._pending_lock:
            self._pending.add(future)
        future.add_done_callback(self._untrack)

    def _untrack(self, future: Future) -> None:
        with self._pending_lock:
            self._pending.discard(future)

    def drain(self) -> None:
        """Block until every outstanding delivery or push settles."""
        while True:
            with self._pending_lock:
                pending = list(self._pending)
            if not pending:
                return
            for future in pending:
                future.result()

    def close(self) -> None:
        self.pool.shutdown(wait=True)
