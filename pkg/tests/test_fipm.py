"""Access-decision tests: the two-circle scenario, conflict precedence,
witness structure and both terminating semantics."""

from __future__ import annotations

import pytest

from prism.errors import UnknownUser
from prism.fipm import EvalMode, check_access, compute_audience
from prism.model import Message, Subdomain

from helpers import build_two_circle_mesh, set_policy, two_circle_message

MA = EvalMode.MEMBERSHIP_ANCHORED
PC = EvalMode.POLICY_CHAIN


@pytest.fixture
def mesh():
    return build_two_circle_mesh()


@pytest.fixture
def message():
    return two_circle_message()


class TestTwoCircleScenario:
    def test_member_of_tag_circle_allowed(self, mesh, message):
        for mode in (MA, PC):
            decision = check_access(mesh, message, "org/bob", mode)
            assert decision.allowed
            assert decision.cause == "membership"
            assert decision.chain == ("org/C1",)

    def test_policy_satisfier_with_parent_membership_allowed(self, mesh, message):
        set_policy(mesh, "org/C1", "allow <- reader-is(org/charlie)")
        for mode in (MA, PC):
            decision = check_access(mesh, message, "org/charlie", mode)
            assert decision.allowed
            assert decision.cause == "membership"
            assert decision.chain == ("org/C1", "org/C2")
            assert decision.circle == "org/C2"

    def test_policy_satisfier_of_first_circle_only_denied(self, mesh, message):
        set_policy(mesh, "org/C1", "allow <- reader-is(org/ellen)")
        for mode in (MA, PC):
            assert not check_access(mesh, message, "org/ellen", mode).allowed

    def test_full_chain_satisfier_split_by_mode(self, mesh, message):
        set_policy(mesh, "org/C1", "allow <- reader-is(org/ellen)")
        set_policy(mesh, "org/C2", "allow <- reader-is(org/ellen)")
        # The walk still has to clear the root's own policies.
        set_policy(mesh, "org/main", "allow <- reader-in-asn(org)")
        chain = check_access(mesh, message, "org/ellen", PC)
        assert chain.allowed and chain.cause == "policy-chain"
        assert chain.chain == ("org/C1", "org/C2", "org/main")
        assert not check_access(mesh, message, "org/ellen", MA).allowed

    def test_author_always_allowed(self, mesh, message):
        decision = check_access(mesh, message, "org/alice", PC)
        assert decision.allowed and decision.cause == "author"


class TestConflicts:
    def test_conflict_checked_before_tags(self, mesh, message):
        banned = Message(id="org/m2", author="org/alice", content="x",
                         tags=frozenset({"org/C1"}), conflicts=frozenset({"org/C2"}))
        mesh.add_member("org/C1", "org/charlie")  # member of the tag circle too
        decision = check_access(mesh, banned, "org/charlie", PC)
        assert not decision.allowed
        assert decision.cause == "conflict"
        assert decision.circle == "org/C2"

    def test_unresolvable_conflict_circle_cannot_block(self, mesh):
        m = Message(id="org/m3", author="org/alice", content="x",
                    tags=frozenset({"org/C1"}), conflicts=frozenset({"org/gone"}))
        assert check_access(mesh, m, "org/bob", PC).allowed

    def test_unresolvable_tag_circle_cannot_grant(self, mesh):
        m = Message(id="org/m4", author="org/alice", content="x",
                    tags=frozenset({"org/gone"}))
        decision = check_access(mesh, m, "org/bob", PC)
        assert not decision.allowed
        assert any("skipped" in d for d in decision.diagnostics)


class TestFallbacks:
    def test_empty_tag_and_conflict_sets_deny_non_author(self, mesh):
        m = Message(id="org/m5", author="org/alice", content="x")
        decision = check_access(mesh, m, "org/bob", PC)
        assert not decision.allowed
        assert decision.cause == "tag-exhausted"

    def test_unknown_reader_raises(self, mesh, message):
        with pytest.raises(UnknownUser):
            check_access(mesh, message, "org/ghost", PC)

    def test_cycle_in_replicated_state_fails_that_tag(self, mesh, message):
        # Replica skew: corrupt C2's parent to point back at C1.
        mesh.upsert_circle(Subdomain(id="org/C2", asn="org", name="C2",
                                     founding_admin="org/root", parent="org/C1",
                                     members=frozenset({"org/root", "org/charlie"})))
        set_policy(mesh, "org/C1", "allow <- reader-in-asn(org)")
        set_policy(mesh, "org/C2", "allow <- reader-in-asn(org)")
        decision = check_access(mesh, message, "org/ellen", PC)
        assert not decision.allowed
        assert any("revisit" in d for d in decision.diagnostics)
        # Membership along the cycle still terminates in allow.
        assert check_access(mesh, message, "org/charlie", PC).allowed


class TestAudience:
    def test_members_of_single_tag_circle(self, mesh, message):
        got = compute_audience(mesh, message, mesh.users.keys(), PC)
        # author plus every C1 member (the founding admin sits in C1 too)
        assert got == {"org/alice", "org/bob", "org/root"}

    def test_empty_candidates(self, mesh, message):
        assert compute_audience(mesh, message, set(), PC) == set()
