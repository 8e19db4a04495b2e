"""Standalone checker for challenger reports.

Written against the report format only (hashlib, hmac and cryptography; no
imports from the rest of the package) so a third party can audit a finding
without trusting the challenger's code.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import struct
from dataclasses import dataclass
from typing import Mapping, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey


@dataclass(frozen=True)
class FindingCheck:
    index: int
    kind: str
    ok: bool
    detail: str


def _sig_ok(scheme: str, key: bytes, sth: Mapping) -> bool:
    root = bytes.fromhex(sth["root_hash"])
    if len(root) != 32:
        return False
    msg = b"\x00" + struct.pack(">QQ", int(sth["tree_size"]), int(sth["timestamp"])) + root
    sig = base64.b64decode(sth["signature"], validate=True)
    if scheme == "ed25519":
        try:
            Ed25519PublicKey.from_public_bytes(key).verify(sig, msg)
            return True
        except (InvalidSignature, ValueError):
            return False
    if scheme == "hmac-sha256":
        return hmac.compare_digest(hmac.new(key, msg, hashlib.sha256).digest(), sig)
    raise ValueError(f"unsupported scheme {scheme!r}")


def _h(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


def _consistent(m: int, n: int, old: bytes, new: bytes, proof: list) -> bool:
    """Consistency check, following the RFC 9162 procedure step by step."""
    if m == n:
        return old == new and not proof
    if m == 0:
        return not proof and old == hashlib.sha256(b"").digest()
    if m > n or not proof:
        return False
    path = list(proof)
    if m & (m - 1) == 0:
        path.insert(0, old)
    fn, sn = m - 1, n - 1
    while fn % 2 == 1:
        fn, sn = fn // 2, sn // 2
    fr = sr = path[0]
    for c in path[1:]:
        if sn == 0:
            return False
        if fn % 2 == 1 or fn == sn:
            fr, sr = _h(b"\x01", c, fr), _h(b"\x01", c, sr)
            while fn % 2 == 0 and fn != 0:
                fn, sn = fn // 2, sn // 2
        else:
            sr = _h(b"\x01", sr, c)
        fn, sn = fn // 2, sn // 2
    return sn == 0 and fr == old and sr == new


def check_report(text: str, keys: Mapping[str, tuple]) -> list:
    """Re-verify every finding. ``keys`` maps log name -> (scheme, public key bytes)."""
    doc = json.loads(text)
    out = []
    for i, f in enumerate(doc.get("findings", [])):
        out.append(_check_finding(i, f, keys))
    return out


def _check_finding(i: int, f: Mapping, keys: Mapping[str, tuple]) -> FindingCheck:
    kind = f.get("kind", "?")
    try:
        a, b = f["sth_a"], f["sth_b"]
        name = f["log"]
        if name not in keys:
            return FindingCheck(i, kind, False, f"no key for log {name!r}")
        scheme, key = keys[name]
        key_id = hashlib.sha256(key).hexdigest()
        if not (a["log"] == b["log"] == name and a["log_id"] == b["log_id"] == key_id):
            return FindingCheck(i, kind, False, "heads are not from the same log key")
        if not (_sig_ok(scheme, key, a) and _sig_ok(scheme, key, b)):
            return FindingCheck(i, kind, False, "signature check failed")
        size_a, size_b = int(a["tree_size"]), int(b["tree_size"])
        root_a, root_b = bytes.fromhex(a["root_hash"]), bytes.fromhex(b["root_hash"])
        if kind == "equal_size_distinct_roots":
            if size_a == size_b and root_a != root_b:
                return FindingCheck(i, kind, True, "two signed heads of equal size disagree")
            return FindingCheck(i, kind, False, "heads do not conflict")
        if kind == "failed_consistency":
            if size_a > size_b:
                size_a, size_b, root_a, root_b = size_b, size_a, root_b, root_a
            proof: Optional[list] = f.get("proof")
            if proof is None:
                return FindingCheck(i, kind, True, "log refused a consistency proof")
            digests = [bytes.fromhex(p) for p in proof]
            if any(len(d) != 32 for d in digests):
                return FindingCheck(i, kind, True, "log returned a malformed proof")
            if _consistent(size_a, size_b, root_a, root_b, digests):
                return FindingCheck(i, kind, False, "embedded proof actually verifies")
            return FindingCheck(i, kind, True, "log's consistency proof does not verify")
        return FindingCheck(i, kind, False, f"unknown finding kind {kind!r}")
    except (KeyError, ValueError, TypeError) as exc:
        return FindingCheck(i, kind, False, f"malformed finding: {exc}")
