"""PriSM: a federated autonomous-social-network engine.

Circle-scoped information flow, role/subdomain privilege management and a
peer federation protocol between independently administered instances.
"""

from .fipm import AccessDecision, EvalMode, check_access, compute_audience
from .model import (
    Asn,
    Circle,
    Mesh,
    Message,
    PrivateGroup,
    PublicGroup,
    Role,
    Subdomain,
    User,
    Violation,
    validate_hierarchy,
)
from .policy import (
    AccessContext,
    PolicySet,
    Predicate,
    Rule,
    evaluate_policy_set,
    evaluate_predicate,
    parse_policy_set,
    parse_rule,
    print_policy_set,
    print_rule,
)
from .privileges import (
    GroupPrivileges,
    PrivilegeSet,
    check_group_privilege,
    check_privilege,
    effective_privileges,
    role_closure,
)

__all__ = [
    "AccessContext",
    "AccessDecision",
    "Asn",
    "Circle",
    "EvalMode",
    "GroupPrivileges",
    "Mesh",
    "Message",
    "PolicySet",
    "Predicate",
    "PrivateGroup",
    "PrivilegeSet",
    "PublicGroup",
    "Role",
    "Rule",
    "Subdomain",
    "User",
    "Violation",
    "check_access",
    "check_group_privilege",
    "check_privilege",
    "compute_audience",
    "effective_privileges",
    "evaluate_policy_set",
    "evaluate_predicate",
    "parse_policy_set",
    "parse_rule",
    "print_policy_set",
    "print_rule",
    "role_closure",
    "validate_hierarchy",
]

__version__ = "0.1.0"
