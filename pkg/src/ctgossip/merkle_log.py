"""Append-only Merkle tree log (RFC 6962 hashing) that signs tree heads.

A log holds one or more *branches*. An honest log has a single branch; a
split-viewing log forks extra branches off a common prefix and serves them
to different client classes through a :class:`ForkPolicy`.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import re
import struct
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Optional, Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

HOUR_MS = 3600 * 1000
DAY_MS = 24 * HOUR_MS

EMPTY_ROOT = hashlib.sha256(b"").digest()
EXPORT_FORMAT = "ctgossip-log/1"

_LABEL_RE = re.compile(r"^[a-z0-9](?:[a-z0-9-]{0,61}[a-z0-9])?$")


class LogError(Exception):
    """Base class for log misuse."""


class UnknownBranchError(LogError):
    pass


class RangeError(LogError, ValueError):
    pass


class PolicyError(LogError):
    """Raised when issuing would exceed the STH frequency budget."""


def leaf_hash(data: bytes) -> bytes:
    return hashlib.sha256(b"\x00" + data).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(b"\x01" + left + right).digest()


def _split_point(n: int) -> int:
    # largest power of two strictly smaller than n (n >= 2)
    return 1 << ((n - 1).bit_length() - 1)


def tree_head_bytes(tree_size: int, timestamp: int, root_hash: bytes) -> bytes:
    """Canonical bytes covered by an STH signature."""
    return b"\x00" + struct.pack(">QQ", tree_size, timestamp) + root_hash


# -- signers -----------------------------------------------------------------


class Verifier(Protocol):
    scheme: str
    public_key: bytes

    def verify(self, message: bytes, signature: bytes) -> bool: ...


class Signer(Verifier, Protocol):
    def sign(self, message: bytes) -> bytes: ...


class HmacSigner:
    """Deterministic keyed-MAC signer for fixtures. The "public key" is the key."""

    scheme = "hmac-sha256"

    def __init__(self, key: bytes):
        if not key:
            raise ValueError("empty HMAC key")
        self.public_key = bytes(key)

    def sign(self, message: bytes) -> bytes:
        return hmac.new(self.public_key, message, hashlib.sha256).digest()

    def verify(self, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(message), bytes(signature))


class Ed25519Verifier:
    scheme = "ed25519"

    def __init__(self, public_key: bytes):
        self.public_key = bytes(public_key)
        self._key = Ed25519PublicKey.from_public_bytes(self.public_key)

    def verify(self, message: bytes, signature: bytes) -> bool:
        try:
            self._key.verify(bytes(signature), message)
        except (InvalidSignature, ValueError, TypeError):
            return False
        return True


class Ed25519Signer(Ed25519Verifier):
    def __init__(self, private_key: Optional[Ed25519PrivateKey] = None):
        self._private = private_key or Ed25519PrivateKey.generate()
        raw = self._private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        super().__init__(raw)

    @classmethod
    def from_seed(cls, seed: bytes) -> "Ed25519Signer":
        """Derive a reproducible key pair from arbitrary seed bytes."""
        secret = hashlib.sha256(b"ctgossip-ed25519|" + seed).digest()
        return cls(Ed25519PrivateKey.from_private_bytes(secret))

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


def make_verifier(scheme: str, public_key: bytes) -> Verifier:
    if scheme == Ed25519Verifier.scheme:
        return Ed25519Verifier(public_key)
    if scheme == HmacSigner.scheme:
        return HmacSigner(public_key)
    raise ValueError(f"unknown signature scheme {scheme!r}")


# -- domain types ------------------------------------------------------------


def is_valid_log_name(name: str) -> bool:
    return isinstance(name, str) and bool(_LABEL_RE.match(name))


@dataclass(frozen=True)
class LogId:
    id: bytes
    name: str

    def __post_init__(self):
        if len(self.id) != 32:
            raise ValueError("log id must be 32 bytes")
        if not is_valid_log_name(self.name):
            raise ValueError(f"log name {self.name!r} is not a lowercase DNS label")

    @classmethod
    def for_key(cls, name: str, public_key: bytes) -> "LogId":
        return cls(hashlib.sha256(public_key).digest(), name)


@dataclass(frozen=True)
class SignedTreeHead:
    log_id: LogId
    tree_size: int
    timestamp: int
    root_hash: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return tree_head_bytes(self.tree_size, self.timestamp, self.root_hash)

    def verify(self, verifier: Verifier) -> bool:
        if self.tree_size == 0 and self.root_hash != EMPTY_ROOT:
            return False
        return verifier.verify(self.signed_bytes(), self.signature)

    def to_json(self) -> dict:
        return {
            "log": self.log_id.name,
            "log_id": self.log_id.id.hex(),
            "tree_size": self.tree_size,
            "timestamp": self.timestamp,
            "root_hash": self.root_hash.hex(),
            "signature": base64.b64encode(self.signature).decode(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SignedTreeHead":
        return cls(
            LogId(bytes.fromhex(obj["log_id"]), obj["log"]),
            int(obj["tree_size"]),
            int(obj["timestamp"]),
            bytes.fromhex(obj["root_hash"]),
            base64.b64decode(obj["signature"], validate=True),
        )


@dataclass(frozen=True)
class LogPolicy:
    mmd_ms: int = DAY_MS
    sth_frequency: int = 24

    def __post_init__(self):
        if self.mmd_ms <= 0:
            raise ValueError("mmd must be positive")
        if self.sth_frequency < 1:
            raise ValueError("sth_frequency must be >= 1")


@dataclass(frozen=True)
class ForkPolicy:
    """Which branch each client class sees. Unknown classes get ``default_branch``."""

    mode: str = "honest"
    branch_assignment: Mapping[str, str] = field(default_factory=dict)
    default_branch: str = "main"

    def __post_init__(self):
        if self.mode not in ("honest", "fork_by_client_class"):
            raise ValueError(f"unknown fork mode {self.mode!r}")
        if self.mode == "honest" and len(self.branches) != 1:
            raise ValueError("honest mode has exactly one branch")

    @property
    def branches(self) -> set:
        return {self.default_branch, *self.branch_assignment.values()}

    def branch_for(self, client_class: str) -> str:
        if self.mode == "honest":
            return self.default_branch
        return self.branch_assignment.get(client_class, self.default_branch)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "branch_assignment": dict(self.branch_assignment),
            "default_branch": self.default_branch,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ForkPolicy":
        return cls(
            obj.get("mode", "honest"),
            dict(obj.get("branch_assignment", {})),
            obj.get("default_branch", "main"),
        )


# -- the tree ----------------------------------------------------------------


class _Branch:
    def __init__(self, name: str, parent: Optional[str], fork_at: int,
                 leaves: list, hashes: list):
        self.name = name
        self.parent = parent
        self.fork_at = fork_at
        self.leaves = leaves
        self.hashes = hashes
        # (start, end) -> subtree hash; valid forever since leaves are append-only
        self.cache: dict = {}
        self.issued: list = []  # issuance timestamps, for the frequency budget
        self.latest: Optional[SignedTreeHead] = None

    def mth(self, start: int, end: int) -> bytes:
        n = end - start
        if n == 0:
            return EMPTY_ROOT
        if n == 1:
            return self.hashes[start]
        key = (start, end)
        hit = self.cache.get(key)
        if hit is None:
            k = _split_point(n)
            hit = node_hash(self.mth(start, start + k), self.mth(start + k, end))
            self.cache[key] = hit
        return hit


class MerkleLog:
    def __init__(self, name: str, signer: Signer, policy: Optional[LogPolicy] = None,
                 *, main_branch: str = "main"):
        self.signer = signer
        self.policy = policy or LogPolicy()
        self.log_id = LogId.for_key(name, signer.public_key)
        self.main_branch = main_branch
        self._branches = {main_branch: _Branch(main_branch, None, 0, [], [])}

    @property
    def name(self) -> str:
        return self.log_id.name

    @property
    def branches(self) -> list:
        return list(self._branches)

    def _branch(self, view: str) -> _Branch:
        try:
            return self._branches[view]
        except KeyError:
            raise UnknownBranchError(f"log {self.name!r} has no branch {view!r}") from None

    def fork(self, branch: str, parent: Optional[str] = None, at: Optional[int] = None) -> None:
        """Create ``branch`` sharing the first ``at`` leaves of ``parent``."""
        src = self._branch(parent or self.main_branch)
        if branch in self._branches:
            raise LogError(f"branch {branch!r} already exists")
        at = len(src.leaves) if at is None else at
        if not 0 <= at <= len(src.leaves):
            raise RangeError(f"fork point {at} outside 0..{len(src.leaves)}")
        new = _Branch(branch, src.name, at, src.leaves[:at], src.hashes[:at])
        new.cache = {k: v for k, v in src.cache.items() if k[1] <= at}
        self._branches[branch] = new

    def tree_size(self, view: str) -> int:
        return len(self._branch(view).leaves)

    def append(self, view: str, leaf: bytes) -> int:
        b = self._branch(view)
        b.leaves.append(bytes(leaf))
        b.hashes.append(leaf_hash(leaf))
        return len(b.leaves)

    def extend(self, view: str, leaves: Iterable[bytes]) -> int:
        size = self.tree_size(view)
        for leaf in leaves:
            size = self.append(view, leaf)
        return size

    def leaves(self, view: str) -> list:
        return list(self._branch(view).leaves)

    def root_at(self, view: str, size: int) -> bytes:
        b = self._branch(view)
        if not 0 <= size <= len(b.leaves):
            raise RangeError(f"size {size} outside 0..{len(b.leaves)}")
        return b.mth(0, size)

    def issue_sth(self, view: str, now: int) -> SignedTreeHead:
        b = self._branch(view)
        window_start = now - self.policy.mmd_ms
        recent = sum(1 for t in b.issued if window_start < t <= now)
        if recent >= self.policy.sth_frequency:
            raise PolicyError(
                f"{self.name}/{view}: {recent} STHs already issued in the last MMD"
            )
        size = len(b.leaves)
        root = b.mth(0, size)
        sig = self.signer.sign(tree_head_bytes(size, now, root))
        sth = SignedTreeHead(self.log_id, size, now, root, sig)
        b.issued.append(now)
        b.latest = sth
        return sth

    def latest_sth(self, view: str) -> Optional[SignedTreeHead]:
        return self._branch(view).latest

    def serve_sth(self, fork_policy: ForkPolicy, client_class: str, now: int = 0) -> SignedTreeHead:
        """Latest STH of the branch ``client_class`` is assigned to (issued on first use)."""
        view = fork_policy.branch_for(client_class)
        sth = self.latest_sth(view)
        return sth if sth is not None else self.issue_sth(view, now)

    def consistency_proof(self, view: str, m: int, n: int) -> list:
        b = self._branch(view)
        if not 0 <= m <= n <= len(b.leaves):
            raise RangeError(f"need 0 <= m <= n <= {len(b.leaves)}, got m={m} n={n}")
        if m == 0 or m == n:
            return []
        return _subproof(b, m, 0, n, True)

    def inclusion_proof(self, view: str, leaf_index: int, size: int) -> list:
        b = self._branch(view)
        if not 0 <= leaf_index < size <= len(b.leaves):
            raise RangeError(f"need 0 <= index < size <= {len(b.leaves)}")
        return _path(b, leaf_index, 0, size)

    # -- persistence ----------------------------------------------------------

    def export(self, fp: IO[str], fork_policy: Optional[ForkPolicy] = None) -> None:
        """Write a JSON header line followed by one base64 leaf per line.

        Leaves appear branch by branch in header order; each branch lists only
        the leaves it appended after its fork point.
        """
        header = {
            "format": EXPORT_FORMAT,
            "name": self.name,
            "log_id": self.log_id.id.hex(),
            "signature_scheme": self.signer.scheme,
            "policy": {"mmd_ms": self.policy.mmd_ms, "sth_frequency": self.policy.sth_frequency},
            "main_branch": self.main_branch,
            "branches": [
                {"name": b.name, "parent": b.parent, "fork_at": b.fork_at,
                 "count": len(b.leaves) - b.fork_at}
                for b in self._branches.values()
            ],
            "fork_policy": (fork_policy or ForkPolicy(default_branch=self.main_branch)).to_json(),
        }
        fp.write(json.dumps(header, sort_keys=True) + "\n")
        for b in self._branches.values():
            for leaf in b.leaves[b.fork_at:]:
                fp.write(base64.b64encode(leaf).decode() + "\n")

    @classmethod
    def load(cls, fp: IO[str], signer: Signer) -> tuple:
        """Inverse of :meth:`export`; returns ``(log, fork_policy)``."""
        header = json.loads(fp.readline())
        if header.get("format") != EXPORT_FORMAT:
            raise LogError(f"not a {EXPORT_FORMAT} file")
        policy = LogPolicy(**header["policy"])
        log = cls(header["name"], signer, policy, main_branch=header["main_branch"])
        lines = (line.strip() for line in fp)
        lines = (line for line in lines if line)
        for spec in header["branches"]:
            if spec["parent"] is not None:
                log.fork(spec["name"], spec["parent"], spec["fork_at"])
            for _ in range(spec["count"]):
                try:
                    leaf = base64.b64decode(next(lines), validate=True)
                except StopIteration:
                    raise LogError("log file truncated") from None
                log.append(spec["name"], leaf)
        return log, ForkPolicy.from_json(header["fork_policy"])


def _subproof(b: _Branch, m: int, start: int, end: int, complete: bool) -> list:
    n = end - start
    if m == n:
        return [] if complete else [b.mth(start, end)]
    k = _split_point(n)
    if m <= k:
        return _subproof(b, m, start, start + k, complete) + [b.mth(start + k, end)]
    return _subproof(b, m - k, start + k, end, False) + [b.mth(start, start + k)]


def _path(b: _Branch, m: int, start: int, end: int) -> list:
    n = end - start
    if n == 1:
        return []
    k = _split_point(n)
    if m < k:
        return _path(b, m, start, start + k) + [b.mth(start + k, end)]
    return _path(b, m - k, start + k, end) + [b.mth(start, start + k)]


# -- verification (pure) -------------------------------------------------------


def _digest_list(proof) -> Optional[list]:
    out = []
    for p in proof:
        if not isinstance(p, (bytes, bytearray)) or len(p) != 32:
            return None
        out.append(bytes(p))
    return out


def verify_consistency(old_root: bytes, old_size: int, new_root: bytes, new_size: int,
                       proof: Iterable[bytes]) -> bool:
    """RFC 9162 consistency check. Never raises: malformed input yields False."""
    try:
        proof = _digest_list(proof)
        if proof is None or len(old_root) != 32 or len(new_root) != 32:
            return False
        if not (isinstance(old_size, int) and isinstance(new_size, int)):
            return False
        if old_size < 0 or old_size > new_size:
            return False
    except TypeError:
        return False
    if old_size == new_size:
        return not proof and old_root == new_root
    if old_size == 0:
        return not proof and old_root == EMPTY_ROOT
    if not proof:
        return False
    if old_size & (old_size - 1) == 0:
        proof = [old_root] + proof
    fn, sn = old_size - 1, new_size - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    fr = sr = proof[0]
    for c in proof[1:]:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            fr = node_hash(c, fr)
            sr = node_hash(c, sr)
            if not fn & 1:
                while not fn & 1 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            sr = node_hash(sr, c)
        fn >>= 1
        sn >>= 1
    return sn == 0 and fr == old_root and sr == new_root


def verify_inclusion(leaf: bytes, index: int, size: int, root: bytes,
                     proof: Iterable[bytes]) -> bool:
    """RFC 9162 inclusion check. Never raises: malformed input yields False."""
    try:
        proof = _digest_list(proof)
        if proof is None or len(root) != 32:
            return False
        if not (isinstance(index, int) and isinstance(size, int)) or not 0 <= index < size:
            return False
        r = leaf_hash(bytes(leaf))
    except TypeError:
        return False
    fn, sn = index, size - 1
    for p in proof:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            r = node_hash(p, r)
            if not fn & 1:
                while not fn & 1 and fn != 0:
                    fn >>= 1
                    sn >>= 1
        else:
            r = node_hash(r, p)
        fn >>= 1
        sn >>= 1
    return sn == 0 and r == root
