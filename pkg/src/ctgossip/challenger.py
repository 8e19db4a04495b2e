"""Off-path challenger: turns cloned packets into audited STH observations.

The challenger listens on a one-way clone channel, reassembles fragments,
keeps a deduplicated store of signature-checked STHs, fetches its own STHs
over an off-path channel and audits everything it holds for consistency.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping, Optional, Protocol, Union

from . import ct_dns_codec as codec
from .merkle_log import (
    DAY_MS,
    EMPTY_ROOT,
    ForkPolicy,
    LogId,
    MerkleLog,
    RangeError,
    SignedTreeHead,
    Verifier,
    verify_consistency,
)

log = logging.getLogger(__name__)

AGGREGATED = "aggregated"
OFF_PATH = "off_path"
EQUAL_SIZE = "equal_size_distinct_roots"
FAILED_CONSISTENCY = "failed_consistency"
REPORT_FORMAT = "ctgossip-report/1"


class TransportError(Exception):
    """The off-path channel failed; safe to retry later."""


class ProofUnavailable(Exception):
    """The log refused or was unable to produce a proof."""


class InvalidSthError(ValueError):
    pass


class AuditInterrupted(Exception):
    """Transport failed mid-audit. Pass ``cursor`` back to ``audit`` to resume."""

    def __init__(self, evidence: list, cursor: int, cause: Exception):
        super().__init__(f"audit interrupted before tree size {cursor}: {cause}")
        self.evidence = evidence
        self.cursor = cursor
        self.cause = cause


@dataclass
class StoredSth:
    sth: SignedTreeHead
    first_seen: int
    last_seen: int
    observation_count: int
    source: str

    @property
    def key(self) -> tuple:
        return (self.sth.log_id.id, self.sth.tree_size, self.sth.root_hash)

    def to_json(self) -> dict:
        return {
            "sth": self.sth.to_json(),
            "first_seen": self.first_seen,
            "last_seen": self.last_seen,
            "observation_count": self.observation_count,
            "source": self.source,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "StoredSth":
        return cls(SignedTreeHead.from_json(obj["sth"]), obj["first_seen"], obj["last_seen"],
                   obj["observation_count"], obj["source"])


@dataclass(frozen=True)
class Evidence:
    kind: str
    sth_a: SignedTreeHead
    sth_b: SignedTreeHead
    proof: Optional[tuple]
    detected_at: int

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "log": self.sth_a.log_id.name,
            "sth_a": self.sth_a.to_json(),
            "sth_b": self.sth_b.to_json(),
            "proof": None if self.proof is None else [p.hex() for p in self.proof],
            "detected_at": self.detected_at,
        }


class OffPathChannel(Protocol):
    def get_sth(self, log_name: str) -> SignedTreeHead: ...

    def get_consistency_proof(self, log_name: str, first: int, second: int) -> list: ...


class InProcessOffPath:
    """Off-path binding to an in-process log. The log sees only ``identity``.

    ``fail_after`` makes the channel raise TransportError after that many
    successful calls, for exercising partial audits.
    """

    def __init__(self, log: MerkleLog, fork_policy: Optional[ForkPolicy] = None,
                 identity: str = "anonymous", now: int = 0, fail_after: Optional[int] = None):
        self.log = log
        self.fork_policy = fork_policy or ForkPolicy(default_branch=log.main_branch)
        self.identity = identity
        self.now = now
        self.fail_after = fail_after
        self.calls = 0

    def _tick(self):
        if self.fail_after is not None and self.calls >= self.fail_after:
            raise TransportError("off-path channel down")
        self.calls += 1

    def _check_log(self, log_name):
        if log_name != self.log.name:
            raise TransportError(f"no route to log {log_name!r}")

    def get_sth(self, log_name: str) -> SignedTreeHead:
        self._tick()
        self._check_log(log_name)
        return self.log.serve_sth(self.fork_policy, self.identity, self.now)

    def get_consistency_proof(self, log_name: str, first: int, second: int) -> list:
        self._tick()
        self._check_log(log_name)
        branch = self.fork_policy.branch_for(self.identity)
        try:
            return self.log.consistency_proof(branch, first, second)
        except RangeError as exc:
            raise ProofUnavailable(str(exc)) from None


class Reassembler:
    """IP fragment reassembly keyed by (version, src, dst, id, protocol)."""

    def __init__(self, timeout_ms: int = 30_000, max_buffers: int = 1024):
        self.timeout_ms = timeout_ms
        self.max_buffers = max_buffers
        self._buffers: OrderedDict = OrderedDict()
        self.timeouts = 0
        self.evicted = 0

    def __len__(self):
        return len(self._buffers)

    def expire(self, now: int) -> int:
        stale = [k for k, (created, *_rest) in self._buffers.items() if now - created > self.timeout_ms]
        for k in stale:
            del self._buffers[k]
        self.timeouts += len(stale)
        return len(stale)

    def add(self, dg: codec.IpDatagram, now: int) -> Optional[bytes]:
        """Store one fragment; return the reassembled payload once complete."""
        self.expire(now)
        key = (dg.version, dg.src, dg.dst, dg.ident, dg.protocol)
        entry = self._buffers.get(key)
        if entry is None:
            if len(self._buffers) >= self.max_buffers:
                self._buffers.popitem(last=False)
                self.evicted += 1
            entry = [now, {}, None]
            self._buffers[key] = entry
        _, pieces, _ = entry
        pieces.setdefault(dg.fragment_offset, dg.payload)
        if not dg.more_fragments:
            entry[2] = dg.fragment_offset + len(dg.payload)
        total = entry[2]
        if total is None:
            return None
        covered = 0
        for off in sorted(pieces):
            if off > covered:
                return None
            covered = max(covered, off + len(pieces[off]))
        if covered < total:
            return None
        out = bytearray(total)
        # earliest-arriving bytes win on overlap: write in reverse arrival order
        for off, data in reversed(list(pieces.items())):
            chunk = data[: max(0, total - off)]
            out[off:off + len(chunk)] = chunk
        del self._buffers[key]
        return bytes(out)


class Challenger:
    def __init__(self, keys: Mapping[str, Verifier], *, journal: Union[str, Path, None] = None,
                 reassembly_timeout_ms: int = 30_000, max_buffers: int = 1024,
                 sth_frequency: int = 24, window_ms: int = DAY_MS, audit_delay_ms: int = 0,
                 max_labels: int = codec.MAX_LABELS):
        self.keys = dict(keys)
        self.log_ids = {name: LogId.for_key(name, v.public_key) for name, v in self.keys.items()}
        self.reassembler = Reassembler(reassembly_timeout_ms, max_buffers)
        self.sth_frequency = sth_frequency
        self.window_ms = window_ms
        self.audit_delay_ms = audit_delay_ms
        self.max_labels = max_labels
        self.journal = Path(journal) if journal else None
        self.store: dict = {}
        self.counters: Counter = Counter()
        self.proof_requests = 0

    # -- ingestion ----------------------------------------------------------------

    def ingest_clone(self, frame: bytes, now: int) -> Optional[SignedTreeHead]:
        """Decode one cloned frame. Junk is counted, never raised."""
        self.counters["clones"] += 1
        dg = codec.decode_ip(frame)
        if dg is None or dg.protocol != codec.PROTO_UDP:
            self.counters["undecodable"] += 1
            return None
        segment = dg.payload
        if dg.is_fragment:
            segment = self.reassembler.add(dg, now)
            self.counters["reassembly_timeouts"] = self.reassembler.timeouts
            if segment is None:
                return None
            self.counters["reassembled"] += 1
        dns = codec.udp_payload(segment)
        msg = None if dns is None else codec.parse_dns_message(dns, max_labels=self.max_labels)
        if not isinstance(msg, codec.DnsSthMessage):
            self.counters["undecodable"] += 1
            return None
        log_id = self.log_ids.get(msg.log)
        if log_id is None:
            self.counters["unknown_log"] += 1
            return None
        try:
            sth = codec.decode_sth_txt(msg.txt_payload, log_id)
        except codec.SthParseError:
            self.counters["undecodable"] += 1
            return None
        if not self._accept(sth):
            return None
        self._store(sth, now, AGGREGATED)
        return sth

    def _accept(self, sth: SignedTreeHead) -> bool:
        verifier = self.keys.get(sth.log_id.name) if sth.log_id else None
        if verifier is None or self.log_ids[sth.log_id.name] != sth.log_id or not sth.verify(verifier):
            self.counters["quarantined"] += 1
            return False
        return True

    def _store(self, sth: SignedTreeHead, now: int, source: str) -> StoredSth:
        key = (sth.log_id.id, sth.tree_size, sth.root_hash)
        entry = self.store.get(key)
        if entry is None:
            entry = StoredSth(sth, now, now, 1, source)
            self.store[key] = entry
            self.counters["stored"] += 1
            recent = sum(1 for e in self.store.values()
                         if e.sth.log_id == sth.log_id and now - self.window_ms < e.first_seen <= now)
            if recent > self.sth_frequency:
                self.counters["frequency_anomalies"] += 1
                log.warning("log %s: %d distinct STHs within one window", sth.log_id.name, recent)
        else:
            entry.last_seen = max(entry.last_seen, now)
            entry.observation_count += 1
        if self.journal is not None:
            with open(self.journal, "a") as fp:
                fp.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        return entry

    def load_journal(self, path: Union[str, Path]) -> int:
        """Rebuild the store from a journal; the last line per key wins."""
        n = 0
        with open(path) as fp:
            for line in fp:
                if line.strip():
                    entry = StoredSth.from_json(json.loads(line))
                    self.store[entry.key] = entry
                    n += 1
        return n

    def stored(self, log_name: str) -> list:
        return sorted((e for e in self.store.values() if e.sth.log_id.name == log_name),
                      key=lambda e: (e.sth.tree_size, e.sth.root_hash))

    def fetch_off_path(self, channel: OffPathChannel, log_name: str, now: int) -> SignedTreeHead:
        sth = channel.get_sth(log_name)
        if not self._accept(sth):
            raise InvalidSthError(f"off-path STH for {log_name} failed verification")
        self._store(sth, now, OFF_PATH)
        return sth

    # -- auditing -------------------------------------------------------------

    def audit(self, channel: Optional[OffPathChannel], log_name: str, now: int,
              resume_from: Optional[int] = None) -> list:
        """Check every stored STH of ``log_name`` against the others.

        Equal-size heads with different roots are evidence on their own.
        Distinct heads are then sorted by size and each adjacent size group is
        checked with consistency proofs fetched over ``channel`` (skipped when
        ``channel`` is None).
        """
        entries = [e for e in self.stored(log_name) if e.first_seen <= now - self.audit_delay_ms]
        groups: dict = {}
        for e in entries:
            groups.setdefault(e.sth.tree_size, []).append(e.sth)
        sizes = sorted(groups)
        evidence = []
        if resume_from is None:
            for size in sizes:
                first, *others = groups[size]
                evidence.extend(Evidence(EQUAL_SIZE, first, o, None, now) for o in others)
        if channel is None:
            return evidence
        for small, large in zip(sizes, sizes[1:]):
            if resume_from is not None and small < resume_from:
                continue
            for a in groups[small]:
                for b in groups[large]:
                    try:
                        ev = self._check_pair(channel, log_name, a, b, now)
                    except TransportError as exc:
                        raise AuditInterrupted(evidence, small, exc) from exc
                    if ev is not None:
                        evidence.append(ev)
        return evidence

    def _check_pair(self, channel, log_name, a, b, now) -> Optional[Evidence]:
        if a.tree_size == 0:
            if a.root_hash == EMPTY_ROOT:
                return None
            return Evidence(FAILED_CONSISTENCY, a, b, None, now)
        self.proof_requests += 1
        try:
            proof = channel.get_consistency_proof(log_name, a.tree_size, b.tree_size)
        except ProofUnavailable:
            return Evidence(FAILED_CONSISTENCY, a, b, None, now)
        if verify_consistency(a.root_hash, a.tree_size, b.root_hash, b.tree_size, proof):
            return None
        return Evidence(FAILED_CONSISTENCY, a, b, tuple(proof), now)


def report(evidence: Iterable[Evidence], *, generated_at: int = 0,
           keys: Optional[Mapping[str, Verifier]] = None, audit: Optional[dict] = None) -> str:
    """JSON report that a third party can re-verify with the logs' public keys."""
    evidence = list(evidence)
    logs = sorted({e.sth_a.log_id.name for e in evidence})
    doc = {
        "format": REPORT_FORMAT,
        "generated_at": generated_at,
        "finding_count": len(evidence),
        "findings": [e.to_json() for e in evidence],
        "logs": {
            name: {"scheme": keys[name].scheme, "public_key": keys[name].public_key.hex()}
            for name in logs if keys and name in keys
        },
        "audit": audit or {},
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def write_journal_snapshot(challenger: Challenger, fp: IO[str]) -> None:
    for entry in sorted(challenger.store.values(), key=lambda e: (e.sth.log_id.name, e.key)):
        fp.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
