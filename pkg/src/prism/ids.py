"""Identifier helpers.

Every user, circle, role and message id is a string of the form
``<asn-id>/<local-id>`` so references stay unambiguous across federated
instances.
"""

from __future__ import annotations


def make_id(asn: str, local: str) -> str:
    return f"{asn}/{local}"


def asn_of(entity_id: str) -> str:
    """Return the owning ASN prefix of a qualified id ('' if unqualified)."""
    head, sep, _ = entity_id.partition("/")
    return head if sep else ""
