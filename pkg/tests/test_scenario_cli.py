"""Scenario runner and command-line interface tests."""

from __future__ import annotations

import json

import pytest

from prism.cli import main
from prism.gateway import Gateway, PrismHttpServer
from prism.instance import AsnInstance, InstanceConfig
from prism.scenario import ScenarioRunner

TWO_ASN_SCRIPT = {
    "asns": [{"id": "a"}, {"id": "b"}],
    "pair_all": True,
    "settings": {"sync": False},
    "steps": [
        {"op": "register-user", "asn": "a", "name": "alice"},
        {"op": "register-user", "asn": "b", "name": "bob"},
        {"op": "grant", "asn": "a", "actions": ["post-message", "create-public-group"],
         "users": ["a/alice"]},
        {"op": "grant", "asn": "b", "actions": ["follow-user"], "users": ["b/bob"]},
        {"op": "follow", "follower": "b/bob", "target": "a/alice"},
        {"op": "create-circle", "kind": "public", "actor": "a/alice"},
        {"op": "add-member", "circle": "last-circle", "actor": "a/alice",
         "user": "b/bob"},
        {"op": "post", "author": "a/alice", "content": "hello mesh",
         "tags": ["last-circle"]},
    ],
}


class TestScenarioRunner:
    def test_two_asn_script_delivers(self, tmp_path):
        runner = ScenarioRunner(TWO_ASN_SCRIPT, tmp_path)
        try:
            report = runner.run()
        finally:
            runner.close()
        assert report["inboxes"] == {"b/bob": ["a/m1"]}
        post = report["posts"][0]
        assert post["destinations"] == {"b": "delivered"}
        assert post["local_notified"] == []

    def test_deterministic_given_script(self, tmp_path):
        r1 = ScenarioRunner(TWO_ASN_SCRIPT, tmp_path / "one")
        r2 = ScenarioRunner(TWO_ASN_SCRIPT, tmp_path / "two")
        try:
            assert r1.run() == r2.run()
        finally:
            r1.close()
            r2.close()

    def test_moderation_flow(self, tmp_path):
        script = {
            "asns": [{"id": "a"}],
            "steps": [
                {"op": "register-user", "asn": "a", "name": "alice"},
                {"op": "register-user", "asn": "a", "name": "boss"},
                {"op": "grant", "asn": "a",
                 "actions": ["post-message", "create-public-group", "follow-user"],
                 "users": ["a/alice", "a/boss"]},
                {"op": "create-circle", "kind": "public", "actor": "a/boss"},
                {"op": "add-member", "circle": "last-circle", "actor": "a/boss",
                 "user": "a/alice"},
                {"op": "set-group-privileges", "circle": "last-circle",
                 "actor": "a/boss", "moderated": True},
                {"op": "follow", "follower": "a/boss", "target": "a/alice"},
                {"op": "post", "author": "a/alice", "content": "review me",
                 "tags": ["last-circle"]},
                {"op": "moderate", "actor": "a/boss", "approve": True},
            ],
        }
        runner = ScenarioRunner(script, tmp_path)
        try:
            report = runner.run()
        finally:
            runner.close()
        assert report["posts"][0]["status"] == "pending"
        assert report["inboxes"] == {"a/boss": ["a/m1"]}

    def test_unknown_op_rejected(self, tmp_path):
        runner = ScenarioRunner({"asns": [{"id": "a"}],
                                 "steps": [{"op": "frobnicate"}]}, tmp_path)
        try:
            with pytest.raises(ValueError, match="frobnicate"):
                runner.run()
        finally:
            runner.close()


class TestCli:
    def test_scenario_run_command(self, tmp_path, capsys):
        script_path = tmp_path / "scenario.json"
        script_path.write_text(json.dumps(TWO_ASN_SCRIPT))
        rc = main(["scenario", "run", str(script_path),
                   "--data-dir", str(tmp_path / "data")])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["inboxes"] == {"b/bob": ["a/m1"]}

    def test_bench_chain_command_emits_csv(self, tmp_path, capsys, monkeypatch):
        import prism.bench as bench_mod
        from prism.bench import BenchConfig
        monkeypatch.setattr(bench_mod, "DEFAULT_BENCH",
                            BenchConfig(chain_lengths=(2, 4), chain_reps=3,
                                        chain_batch=1, warmup=1))
        out_dir = tmp_path / "bench"
        rc = main(["bench", "chain", "--out", str(out_dir), "--max-len", "4"])
        assert rc == 0
        csv = (out_dir / "chain.csv").read_text().splitlines()
        assert csv[0] == "parameter,sample_idx,value_ns"
        assert len(csv) == 1 + 2 * 3
        assert (out_dir / "summary.txt").exists()

    def test_admin_cli_against_live_server(self, tmp_path, capsys):
        config = InstanceConfig(asn_id="org", data_dir=str(tmp_path / "org"),
                                admin_password="rootpw")
        instance = AsnInstance(config)
        server = PrismHttpServer(Gateway(instance), listen="127.0.0.1:0").start()
        try:
            base = ["admin", "--server", server.url,
                    "--user", "org/admin", "--password", "rootpw"]
            assert main(base + ["register-user", "alice",
                                "--user-password", "pw"]) == 0
            capsys.readouterr()
            assert main(base + ["create-role", "member",
                                "--grant", "post-message=grant",
                                "--grant", "create-private-group=grant"]) == 0
            role_id = json.loads(capsys.readouterr().out)["id"]
            assert main(base + ["assign-role", "org/alice", role_id]) == 0
            capsys.readouterr()

            user_base = ["admin", "--server", server.url,
                         "--user", "org/alice", "--password", "pw"]
            assert main(user_base + ["create-circle", "--kind", "private"]) == 0
            circle_id = json.loads(capsys.readouterr().out)["id"]
            assert main(user_base + ["post", "--content", "from the cli",
                                     "--tag", circle_id]) == 0
            message_id = json.loads(capsys.readouterr().out)["id"]
            assert main(user_base + ["fetch", message_id]) == 0
            assert json.loads(capsys.readouterr().out)["content"] == "from the cli"
        finally:
            server.stop()
            instance.close()
        assert "org/alice" in instance.mesh.users
        assert any(r.name == "member" for r in instance.mesh.roles.values())
