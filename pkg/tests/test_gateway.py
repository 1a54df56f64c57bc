"""Gateway tests: sessions, API routes, moderation flow, the
zero-privilege probe, and real-HTTP federation between two instances."""

from __future__ import annotations

import json
import urllib.request

import pytest

from prism.gateway import Gateway, PrismHttpServer
from prism.instance import AsnInstance, InstanceConfig
from prism.privileges import GRANT, PrivilegeSet

from helpers import BASELINE_ACTIONS


@pytest.fixture
def gw(tmp_path):
    config = InstanceConfig(asn_id="org", data_dir=str(tmp_path / "org"),
                            admin_password="rootpw")
    instance = AsnInstance(config)
    gateway = Gateway(instance)
    yield gateway
    instance.close()


def api(gateway, method, path, payload=None, token=None):
    headers = {}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = json.dumps(payload).encode() if payload is not None else b""
    status, raw = gateway.handle_api(method, path, body, headers)
    return status, json.loads(raw.decode())


def login(gateway, user, password):
    status, data = api(gateway, "POST", "/api/v1/session",
                       {"user": user, "password": password})
    assert status == 200, data
    return data["token"]


def setup_member(gateway, name, password="pw"):
    """Register a user holding the everyday baseline actions."""
    instance = gateway.instance
    admin = instance.config.admin_id
    user = instance.register_user(admin, name, password=password)
    role = instance.mesh.roles.get(f"org/member-role")
    if role is None:
        role = instance.create_role(
            admin, "member",
            PrivilegeSet.from_pairs((a, GRANT) for a in BASELINE_ACTIONS),
            rid="org/member-role")
    instance.assign_role(admin, user.id, role.id)
    return user.id


class TestSessions:
    def test_login_and_authenticated_call(self, gw):
        token = login(gw, "org/admin", "rootpw")
        status, data = api(gw, "GET", "/api/v1/inbox", token=token)
        assert status == 200 and data == {"entries": []}

    def test_bad_password_rejected(self, gw):
        status, data = api(gw, "POST", "/api/v1/session",
                           {"user": "org/admin", "password": "wrong"})
        assert status == 401

    def test_missing_token_rejected(self, gw):
        status, data = api(gw, "GET", "/api/v1/inbox")
        assert status == 401

    def test_expired_token_rejected(self, gw):
        gw.sessions.ttl = -1
        token = login(gw, "org/admin", "rootpw")
        status, _ = api(gw, "GET", "/api/v1/inbox", token=token)
        assert status == 401


class TestMessageRoutes:
    def test_post_tag_own_private_group(self, gw):
        alice = setup_member(gw, "alice")
        token = login(gw, alice, "pw")
        status, circle = api(gw, "POST", "/api/v1/circles",
                             {"kind": "private"}, token)
        assert status == 200
        status, posted = api(gw, "POST", "/api/v1/messages",
                             {"content": "note", "tags": [circle["id"]]}, token)
        assert status == 200 and posted["status"] == "accepted"

    def test_tag_conflict_overlap_rejected(self, gw):
        alice = setup_member(gw, "alice")
        token = login(gw, alice, "pw")
        _, circle = api(gw, "POST", "/api/v1/circles", {"kind": "private"}, token)
        status, err = api(gw, "POST", "/api/v1/messages",
                          {"content": "x", "tags": [circle["id"]],
                           "conflicts": [circle["id"]]}, token)
        assert status == 400 and err["error"] == "tag-conflict-overlap"

    def test_tagging_foreign_circle_denied(self, gw):
        alice = setup_member(gw, "alice")
        bob = setup_member(gw, "bob")
        t_alice = login(gw, alice, "pw")
        t_bob = login(gw, bob, "pw")
        _, circle = api(gw, "POST", "/api/v1/circles", {"kind": "private"}, t_alice)
        status, err = api(gw, "POST", "/api/v1/messages",
                          {"content": "x", "tags": [circle["id"]]}, t_bob)
        assert status == 403 and err["error"] == "tagging-denied"

    def test_fetch_denied_and_missing_look_identical(self, gw):
        alice = setup_member(gw, "alice")
        bob = setup_member(gw, "bob")
        t_alice = login(gw, alice, "pw")
        t_bob = login(gw, bob, "pw")
        _, circle = api(gw, "POST", "/api/v1/circles", {"kind": "private"}, t_alice)
        _, posted = api(gw, "POST", "/api/v1/messages",
                        {"content": "secret", "tags": [circle["id"]]}, t_alice)
        denied = api(gw, "GET", f"/api/v1/messages/{posted['id'].replace('/', '%2F')}",
                     token=t_bob)
        missing = api(gw, "GET", "/api/v1/messages/org%2Fnever-was", token=t_bob)
        assert denied == missing  # same status, same body shape

    def test_author_reads_own_message(self, gw):
        alice = setup_member(gw, "alice")
        token = login(gw, alice, "pw")
        _, circle = api(gw, "POST", "/api/v1/circles", {"kind": "private"}, token)
        _, posted = api(gw, "POST", "/api/v1/messages",
                        {"content": "mine", "tags": [circle["id"]]}, token)
        status, data = api(gw, "GET",
                           f"/api/v1/messages/{posted['id'].replace('/', '%2F')}",
                           token=token)
        assert status == 200 and data["content"] == "mine"


class TestModeration:
    def test_pending_until_boss_approves(self, gw):
        instance = gw.instance
        admin_token = login(gw, "org/admin", "rootpw")
        alice = setup_member(gw, "alice")
        bob = setup_member(gw, "bob")
        t_alice = login(gw, alice, "pw")

        _, group = api(gw, "POST", "/api/v1/circles", {"kind": "public"},
                       login(gw, bob, "pw"))
        gid = group["id"]
        t_bob = login(gw, bob, "pw")
        api(gw, "POST", f"/api/v1/circles/{gid.replace('/', '%2F')}/members",
            {"user": alice}, t_bob)
        status, _ = api(gw, "POST",
                        f"/api/v1/circles/{gid.replace('/', '%2F')}/group-privileges",
                        {"moderated": True, "tagging": "members"}, t_bob)
        assert status == 200

        # bob follows alice so an approved post lands somewhere visible
        api(gw, "POST", "/api/v1/follow", {"target": alice}, t_bob)

        status, posted = api(gw, "POST", "/api/v1/messages",
                             {"content": "needs review", "tags": [gid]}, t_alice)
        assert status == 200 and posted["status"] == "pending"
        assert instance.inbox(bob) == []

        # a non-boss cannot approve
        status, err = api(gw, "POST",
                          f"/api/v1/messages/{posted['id'].replace('/', '%2F')}/moderate",
                          {"approve": True}, t_alice)
        assert status == 403

        status, verdict = api(gw, "POST",
                              f"/api/v1/messages/{posted['id'].replace('/', '%2F')}/moderate",
                              {"approve": True}, t_bob)
        assert status == 200 and verdict["status"] == "approved"
        instance.drain()
        assert [e.message_id for e in instance.inbox(bob)] == [posted["id"]]

    def test_boss_posts_skip_moderation(self, gw):
        bob = setup_member(gw, "bob")
        t_bob = login(gw, bob, "pw")
        _, group = api(gw, "POST", "/api/v1/circles", {"kind": "public"}, t_bob)
        api(gw, "POST",
            f"/api/v1/circles/{group['id'].replace('/', '%2F')}/group-privileges",
            {"moderated": True}, t_bob)
        status, posted = api(gw, "POST", "/api/v1/messages",
                             {"content": "boss speaks", "tags": [group["id"]]}, t_bob)
        assert posted["status"] == "accepted"


class TestPolicyImportExport:
    def test_round_trip_through_the_file_format(self, gw):
        alice = setup_member(gw, "alice")
        token = login(gw, alice, "pw")
        _, group = api(gw, "POST", "/api/v1/circles", {"kind": "public"}, token)
        gid = group["id"].replace("/", "%2F")
        text = ("allow <- reader-member-of(org/main)\n"
                "deny <- reader-is(org/mallory)")
        assert api(gw, "POST", f"/api/v1/circles/{gid}/policies",
                   {"text": text}, token)[0] == 200
        status, exported = api(gw, "GET", f"/api/v1/circles/{gid}/policies",
                               token=token)
        assert status == 200 and exported["text"] == text

    def test_export_gated_on_circle_manager(self, gw):
        alice = setup_member(gw, "alice")
        bob = setup_member(gw, "bob")
        t_alice = login(gw, alice, "pw")
        _, group = api(gw, "POST", "/api/v1/circles", {"kind": "public"}, t_alice)
        gid = group["id"].replace("/", "%2F")
        status, _ = api(gw, "GET", f"/api/v1/circles/{gid}/policies",
                        token=login(gw, bob, "pw"))
        assert status == 403


class TestPrivilegeAssignments:
    def test_text_format_applied(self, gw):
        admin_token = login(gw, "org/admin", "rootpw")
        alice = setup_member(gw, "alice")
        _, role = api(gw, "POST", "/api/v1/roles",
                      {"name": "scoped", "privileges": []}, admin_token)
        assignments = "\n".join([
            f"grant create-subdomain to role:{role['id']}",
            f"deny post-message to subdomain:org/main",
            f"grant post-message to user:{alice}@subdomain:org/main",
        ])
        status, result = api(gw, "POST", "/api/v1/privileges",
                             {"assignments": assignments}, admin_token)
        assert status == 200 and result["applied"] == 3
        mesh = gw.instance.mesh
        assert mesh.roles[role["id"]].privileges.grants("create-subdomain")
        assert mesh.subdomains["org/main"].privileges.effect_of("post-message") == "deny"
        assert mesh.subdomains["org/main"].user_privileges[alice].grants("post-message")


ZERO_PRIV_MUTATING_ROUTES = [
    ("POST", "/api/v1/messages", {"content": "x"}),
    ("POST", "/api/v1/follow", {"target": "org/admin"}),
    ("POST", "/api/v1/users", {"name": "sneaky"}),
    ("POST", "/api/v1/circles", {"kind": "public"}),
    ("POST", "/api/v1/circles", {"kind": "private"}),
    ("POST", "/api/v1/circles", {"kind": "subdomain", "name": "x"}),
    ("POST", "/api/v1/circles/org%2Fmain/members", {"user": "org/zero"}),
    ("POST", "/api/v1/circles/org%2Fmain/policies", {"text": ""}),
    ("POST", "/api/v1/circles/org%2Fmain/group-privileges", {"join": "open"}),
    ("POST", "/api/v1/roles", {"name": "r", "privileges": []}),
    ("POST", "/api/v1/roles/assign", {"user": "org/zero", "role": "org/x"}),
    ("POST", "/api/v1/privileges",
     {"assignments": "grant post-message to subdomain:org/main"}),
    ("POST", "/api/v1/admin/pair",
     {"asn": "other", "endpoint": "mem://other", "secret": "s"}),
]


class TestZeroPrivilegeProbe:
    def test_every_mutating_route_denies_a_roleless_user(self, gw):
        gw.instance.register_user("org/admin", "zero", password="pw")
        token = login(gw, "org/zero", "pw")
        for method, path, payload in ZERO_PRIV_MUTATING_ROUTES:
            status, data = api(gw, method, path, payload, token)
            assert status == 403, (path, status, data)
            assert data["error"] in ("privilege-denied", "tagging-denied"), (path, data)

    def test_self_reads_still_work(self, gw):
        gw.instance.register_user("org/admin", "zero", password="pw")
        token = login(gw, "org/zero", "pw")
        assert api(gw, "GET", "/api/v1/inbox", token=token)[0] == 200
        assert api(gw, "GET", "/api/v1/users/org%2Fzero", token=token)[0] == 200
        assert api(gw, "GET", "/api/v1/users/org%2Fadmin", token=token)[0] == 403
        assert api(gw, "GET", "/api/v1/messages/org%2Fm1", token=token)[0] == 404


class TestConfig:
    def test_config_file_round_trip(self, tmp_path):
        path = tmp_path / "conf.json"
        path.write_text(json.dumps({
            "asn_id": "org", "data_dir": str(tmp_path / "data"),
            "listen": "127.0.0.1:0", "fipm_mode": "membership-anchored",
            "pool_width": 2, "admin_password": "zz",
        }))
        config = InstanceConfig.from_file(path)
        assert config.fipm_mode == "membership-anchored"
        assert config.pool_width == 2
        with AsnInstance(config) as instance:
            from prism.fipm import EvalMode
            assert instance.mode is EvalMode.MEMBERSHIP_ANCHORED


class TestHttpFederation:
    def test_two_instances_over_real_sockets(self, tmp_path):
        from prism.federation import HttpTransport

        servers, instances = [], []
        try:
            for asn in ("asnA", "asnB"):
                config = InstanceConfig(asn_id=asn, data_dir=str(tmp_path / asn),
                                        admin_password="pw",
                                        retry_max_attempts=2, retry_base_delay=0.01)
                instance = AsnInstance(config, transport=HttpTransport(timeout=5))
                server = PrismHttpServer(Gateway(instance), listen="127.0.0.1:0").start()
                instance.config.endpoint = server.url
                instances.append(instance)
                servers.append(server)
            a, b = instances
            a.pair("asnA/admin", "asnB", servers[1].url, "socket-secret")
            b.pair("asnB/admin", "asnA", servers[0].url, "socket-secret")

            alice = a.register_user("asnA/admin", "alice", password="pw")
            role = a.create_role("asnA/admin", "member", PrivilegeSet.from_pairs(
                (x, GRANT) for x in BASELINE_ACTIONS))
            a.assign_role("asnA/admin", alice.id, role.id)
            bob = b.register_user("asnB/admin", "bob", password="pw")
            role_b = b.create_role("asnB/admin", "member", PrivilegeSet.from_pairs(
                (x, GRANT) for x in BASELINE_ACTIONS))
            b.assign_role("asnB/admin", bob.id, role_b.id)

            b.follow(bob.id, alice.id)  # remote follow over HTTP
            group = a.create_public_group(alice.id, None)
            a.add_member(alice.id, group.id, bob.id)
            mid, report = a.post_message(alice.id, "over the wire",
                                         tags=[group.id])
            outcomes = report.wait(timeout=10)
            assert outcomes["asnB"].status == "delivered"
            assert [e.message_id for e in b.inbox(bob.id)] == [mid]

            # and the local API answers over the same listener
            payload = json.dumps({"user": "asnB/bob", "password": "pw"}).encode()
            request = urllib.request.Request(
                servers[1].url + "/api/v1/session", data=payload,
                headers={"Content-Type": "application/json"})
            with urllib.request.urlopen(request, timeout=5) as response:
                token = json.loads(response.read())["token"]
            request = urllib.request.Request(
                servers[1].url + "/api/v1/inbox",
                headers={"Authorization": f"Bearer {token}"})
            with urllib.request.urlopen(request, timeout=5) as response:
                entries = json.loads(response.read())["entries"]
            assert [e["message_id"] for e in entries] == [mid]
        finally:
            for server in servers:
                server.stop()
            for instance in instances:
                instance.close()
