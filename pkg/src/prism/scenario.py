"""Declarative scenario files: a JSON script of operations driven against
in-process instances.

Integration tests and benchmarks share this runner with the ``prism
scenario run`` command.  A scenario declares the participating ASNs,
optional pairing, and an ordered step list; steps default their actor to
the owning ASN's administrator.  Runs are deterministic given the file:
ids are assigned in step order and every post is drained before the next
step executes.

Example::

    {
      "asns": [{"id": "a"}, {"id": "b"}],
      "pair_all": true,
      "steps": [
        {"op": "register-user", "asn": "a", "name": "alice"},
        {"op": "grant", "asn": "a", "actions": ["post-message"],
         "users": ["a/alice"]},
        {"op": "create-circle", "kind": "public", "actor": "a/alice"},
        {"op": "post", "author": "a/alice", "content": "hi",
         "tags": ["last-circle"]}
      ]
    }

``"last-circle"`` and ``"last-message"`` refer to the most recently
created circle / posted message, which keeps scripts free of generated
ids.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from .federation import InProcessTransport
from .instance import AsnInstance, InstanceConfig
from .model import Mesh
from .ids import asn_of
from .policy import parse_policy_set
from .privileges import GRANT, GroupPrivileges, PrivilegeSet


class ScenarioCluster:
    """The in-process multi-ASN assembly scenarios run against."""

    def __init__(self, asns: list[dict], data_root: Path, settings: dict):
        self.transport = InProcessTransport()
        self.instances: dict[str, AsnInstance] = {}
        for spec in asns:
            asn_id = spec["id"]
            config = InstanceConfig(
                asn_id=asn_id,
                data_dir=str(data_root / asn_id),
                endpoint=f"mem://{asn_id}",
                admin_password=spec.get("admin_password", "admin"),
                fipm_mode=spec.get("fipm_mode",
                                   settings.get("fipm_mode", "policy-chain")),
                pool_width=int(settings.get("pool_width", 4)),
                sync=bool(settings.get("sync", True)),
                retry_max_attempts=int(settings.get("retry_max_attempts", 2)),
                retry_base_delay=float(settings.get("retry_base_delay", 0.01)),
            )
            instance = AsnInstance(config, transport=self.transport)
            self.transport.register(config.endpoint, instance)
            self.instances[asn_id] = instance

    def admin(self, asn_id: str) -> str:
        return self.instances[asn_id].config.admin_id

    def pair_all(self, secret: str = "scenario-secret") -> None:
        ids = sorted(self.instances)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                self.instances[a].pair(self.admin(a), b, f"mem://{b}", secret)
                self.instances[b].pair(self.admin(b), a, f"mem://{a}", secret)

    def drain(self) -> None:
        for instance in self.instances.values():
            instance.drain()

    def close(self) -> None:
        for instance in self.instances.values():
            instance.close()


class ScenarioRunner:
    def __init__(self, script: dict, data_root: Path):
        self.script = script
        self.cluster = ScenarioCluster(script.get("asns", [{"id": "asn1"}]),
                                       data_root, script.get("settings", {}))
        self.last_circle: Optional[str] = None
        self.last_message: Optional[str] = None
        self.posts: list[dict] = []

    @classmethod
    def from_file(cls, path: str | Path, data_root: Path) -> "ScenarioRunner":
        return cls(json.loads(Path(path).read_text()), data_root)

    def _instance_of(self, entity_id: str) -> AsnInstance:
        return self.cluster.instances[asn_of(entity_id)]

    def _resolve(self, ref: Optional[str]) -> Optional[str]:
        if ref == "last-circle":
            return self.last_circle
        if ref == "last-message":
            return self.last_message
        return ref

    def run(self) -> dict:
        script = self.script
        if script.get("pair_all"):
            self.cluster.pair_all()
        for pair in script.get("pairs", []):
            a, b = pair
            secret = script.get("pair_secret", "scenario-secret")
            self.cluster.instances[a].pair(self.cluster.admin(a), b,
                                           f"mem://{b}", secret)
            self.cluster.instances[b].pair(self.cluster.admin(b), a,
                                           f"mem://{a}", secret)
        for step in script.get("steps", []):
            self._apply(step)
        self.cluster.drain()
        return self.report()

    def _apply(self, step: dict) -> None:
        op = step["op"]
        if op == "register-user":
            instance = self.cluster.instances[step["asn"]]
            instance.register_user(step.get("actor", self.cluster.admin(step["asn"])),
                                   step["name"],
                                   display_name=step.get("display_name", ""),
                                   password=step.get("password", "pw"))
        elif op == "grant":
            # convenience: one role granting the listed actions, assigned to users
            asn_id = step["asn"]
            instance = self.cluster.instances[asn_id]
            admin = self.cluster.admin(asn_id)
            role = instance.create_role(
                admin, step.get("role_name", f"granted-{len(instance.mesh.roles)}"),
                PrivilegeSet.from_pairs((a, GRANT) for a in step["actions"]))
            for user in step.get("users", []):
                instance.assign_role(admin, user, role.id)
        elif op == "create-circle":
            actor = step["actor"]
            instance = self._instance_of(actor)
            kind = step.get("kind", "public")
            parent = self._resolve(step.get("parent"))
            if kind == "subdomain":
                circle = instance.create_subdomain(actor, step["name"], parent)
            elif kind == "private":
                circle = instance.create_private_group(actor, parent)
            else:
                circle = instance.create_public_group(
                    actor, parent, parse_policy_set(step.get("policies", "")))
            self.last_circle = circle.id
        elif op == "add-member":
            circle = self._resolve(step["circle"])
            instance = self._instance_of(circle)
            instance.add_member(step["actor"], circle, step["user"])
        elif op == "set-policies":
            circle = self._resolve(step["circle"])
            self._instance_of(circle).set_policies(step["actor"], circle,
                                                   step["text"])
        elif op == "set-group-privileges":
            circle = self._resolve(step["circle"])
            self._instance_of(circle).set_group_privileges(
                step["actor"], circle,
                GroupPrivileges(join=step.get("join", "closed"),
                                tagging=step.get("tagging", "members"),
                                moderated=bool(step.get("moderated", False))))
        elif op == "follow":
            follower = step["follower"]
            self._instance_of(follower).follow(follower, step["target"])
        elif op == "post":
            author = step["author"]
            instance = self._instance_of(author)
            tags = [self._resolve(t) for t in step.get("tags", [])]
            conflicts = [self._resolve(c) for c in step.get("conflicts", [])]
            mid, report = instance.post_message(author, step.get("content", ""),
                                                tags=tags, conflicts=conflicts)
            self.last_message = mid
            entry = {"id": mid, "author": author}
            if report is not None:
                outcomes = report.wait()
                entry["local_notified"] = report.local_notified
                entry["destinations"] = {d: o.status for d, o in outcomes.items()}
            else:
                entry["status"] = "pending"
            self.posts.append(entry)
        elif op == "moderate":
            mid = self._resolve(step.get("message", "last-message"))
            instance = self._instance_of(mid)
            report = instance.moderate_message(step["actor"], mid,
                                               approve=bool(step.get("approve", True)))
            if report is not None:
                report.wait()
        elif op == "compact":
            self.cluster.instances[step["asn"]].compact()
        elif op == "drain":
            self.cluster.drain()
        else:
            raise ValueError(f"unknown scenario op {op!r}")

    def report(self) -> dict:
        inboxes: dict[str, list[str]] = {}
        for instance in self.cluster.instances.values():
            for user in instance.store.inbox_users():
                inboxes[user] = [e.message_id for e in instance.store.inbox(user)]
        return {"posts": self.posts, "inboxes": inboxes}

    def global_mesh(self) -> Mesh:
        """Authoritative union across instances (used by verification tools)."""
        mesh = Mesh()
        for asn_id, instance in self.cluster.instances.items():
            local = instance.mesh
            mesh.upsert_asn(local.asns[asn_id])
            for user in local.users.values():
                if user.asn == asn_id:
                    mesh.upsert_user(user)
            for circle in local.all_circles():
                if asn_of(circle.id) == asn_id:
                    mesh.upsert_circle(circle)
            for role in local.roles.values():
                if role.asn == asn_id:
                    mesh.upsert_role(role)
        mesh.rebuild_asn_aggregates()
        return mesh

    def close(self) -> None:
        self.cluster.close()
