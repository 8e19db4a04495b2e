"""Inline STH aggregation: a staged match+action classifier that fails open.

Every packet is forwarded unmodified. STH responses and tiny IP fragments
are additionally cloned to a challenger channel, every n-th match.

Table lookups (known log, TXT, IN) never cut the parse short, so a packet
that matches and its near-miss twin walk the same number of stages.
"""

from __future__ import annotations

import json
import queue
import random
import struct
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from . import ct_dns_codec as codec
from .ct_dns_codec import (
    CLASS_IN,
    DNS_PORT,
    ETH_IPV4,
    ETH_IPV6,
    ETH_LEN,
    IPV6_FRAGMENT,
    IPV6_LEN,
    PROTO_UDP,
    TYPE_TXT,
    UDP_LEN,
)
from .pcapio import read_pcap, write_pcap

PASS = "pass"
CLONE_STH = "clone_sth"
CLONE_FRAGMENT = "clone_fragment"

STAGES = (
    "ethernet", "ipv4", "ipv6", "fragment_check", "udp",
    "dns_preamble", "dns_name", "dns_type", "dns_class",
)


@dataclass(frozen=True)
class PipelineConfig:
    known_logs: frozenset = frozenset()
    fragment_threshold_bytes: int = codec.RESPONSE_THRESHOLD
    sampling_n: int = 1
    clone_channel_capacity: int = 1024
    sampling_mode: str = "counter"  # "counter" or "random"
    seed: Optional[int] = None
    max_labels: int = codec.MAX_LABELS

    def __post_init__(self):
        object.__setattr__(self, "known_logs", frozenset(self.known_logs))
        if self.sampling_n < 1:
            raise ValueError("sampling_n must be >= 1")
        if self.fragment_threshold_bytes <= 0:
            raise ValueError("fragment_threshold_bytes must be positive")
        if self.clone_channel_capacity < 1:
            raise ValueError("clone_channel_capacity must be >= 1")
        if self.sampling_mode not in ("counter", "random"):
            raise ValueError(f"unknown sampling mode {self.sampling_mode!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "known_logs": sorted(self.known_logs),
            "fragment_threshold_bytes": self.fragment_threshold_bytes,
            "sampling_n": self.sampling_n,
            "clone_channel_capacity": self.clone_channel_capacity,
            "sampling_mode": self.sampling_mode,
            "seed": self.seed,
            "max_labels": self.max_labels,
        }


@dataclass(frozen=True)
class Verdict:
    kind: str
    reject_reason: Optional[str] = None

    @property
    def is_clone(self) -> bool:
        return self.kind != PASS


@dataclass(frozen=True)
class ParseTrace:
    stages: tuple
    offsets: tuple

    def __len__(self):
        return len(self.stages)


class _Trace:
    def __init__(self):
        self.stages = []
        self.offsets = []

    def visit(self, stage, offset):
        self.stages.append(stage)
        self.offsets.append(offset)

    def freeze(self):
        return ParseTrace(tuple(self.stages), tuple(self.offsets))


def classify(packet: bytes, config: PipelineConfig) -> tuple:
    """-> (Verdict, ParseTrace). Pure; any input maps to some verdict."""
    t = _Trace()
    verdict = _classify(bytes(packet), config, t)
    return verdict, t.freeze()


def stage_count(packet: bytes, config: PipelineConfig) -> int:
    return len(classify(packet, config)[1])


def _pass(reason):
    return Verdict(PASS, reason)


def _fragment(total_length, config):
    if total_length < config.fragment_threshold_bytes:
        return Verdict(CLONE_FRAGMENT)
    return _pass("large_fragment")


def _classify(buf: bytes, config: PipelineConfig, t: _Trace) -> Verdict:
    t.visit("ethernet", 0)
    if len(buf) < ETH_LEN:
        return _pass("short_read")
    (ethertype,) = struct.unpack_from(">H", buf, 12)
    ip = ETH_LEN

    if ethertype == ETH_IPV4:
        t.visit("ipv4", ip)
        if len(buf) - ip < 20:
            return _pass("short_read")
        if buf[ip] >> 4 != 4 or buf[ip] & 0x0F < 5:
            return _pass("bad_ip_header")
        ihl = (buf[ip] & 0x0F) * 4
        total, frag = struct.unpack_from(">H2xH", buf, ip + 2)
        if total < ihl or total > len(buf) - ip:
            return _pass("bad_ip_length")
        proto = buf[ip + 9]
        t.visit("fragment_check", ip + 6)
        if frag & 0x2000 or frag & 0x1FFF:
            return _fragment(total, config)
        l4 = ip + ihl
        end = ip + total
    elif ethertype == ETH_IPV6:
        t.visit("ipv6", ip)
        if len(buf) - ip < IPV6_LEN:
            return _pass("short_read")
        if buf[ip] >> 4 != 6:
            return _pass("bad_ip_header")
        plen, proto = struct.unpack_from(">HB", buf, ip + 4)
        total = IPV6_LEN + plen
        if total > len(buf) - ip:
            return _pass("bad_ip_length")
        l4 = ip + IPV6_LEN
        end = ip + total
        t.visit("fragment_check", l4)
        if proto == IPV6_FRAGMENT:
            if plen < 8:
                return _pass("short_read")
            return _fragment(total, config)
    else:
        return _pass("not_ip")

    if proto != PROTO_UDP:
        return _pass("not_udp")
    t.visit("udp", l4)
    if end - l4 < UDP_LEN:
        return _pass("short_read")
    sport, _dport, ulen = struct.unpack_from(">HHH", buf, l4)
    if sport != DNS_PORT:
        return _pass("not_dns_response")
    if ulen < UDP_LEN or ulen > end - l4:
        return _pass("bad_udp_length")
    dns = buf[l4 + UDP_LEN:l4 + ulen]
    base = l4 + UDP_LEN

    t.visit("dns_preamble", base)
    try:
        _txid, _flags, qd, an, _ns, _ar = codec.parse_preamble(dns)
    except codec.StopParse:
        return _pass("short_read")
    if qd != 1 or an != 1:
        return _pass("qd_an_mismatch")

    t.visit("dns_name", base + 12)
    try:
        labels, off, _ = codec.read_name(dns, 12, config.max_labels)
    except codec.StopParse as stop:
        return _pass(stop.reason)
    log = codec.log_label(".".join(labels))
    if log is None:
        name_fail = "not_sth_name"
    elif log not in config.known_logs:
        name_fail = "unknown_log"
    else:
        name_fail = None

    t.visit("dns_type", base + off)
    if len(dns) - off < 4:
        return _pass("short_read")
    qtype, qclass = struct.unpack_from(">HH", dns, off)
    t.visit("dns_class", base + off + 2)
    reason = name_fail or ("not_txt" if qtype != TYPE_TXT else None) \
        or ("not_in" if qclass != CLASS_IN else None)
    return _pass(reason) if reason else Verdict(CLONE_STH)


# -- the stateful processor ------------------------------------------------------


@dataclass(frozen=True)
class Clone:
    frame: bytes
    verdict: str
    timestamp: float
    ingress: str
    match_index: int


@dataclass
class PipelineStats:
    packets: int = 0
    verdicts: Counter = field(default_factory=Counter)
    reject_reasons: Counter = field(default_factory=Counter)
    stage_counts: Counter = field(default_factory=Counter)
    matches: Counter = field(default_factory=Counter)
    clones: Counter = field(default_factory=Counter)
    clones_dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "packets": self.packets,
            "verdicts": {k: self.verdicts.get(k, 0) for k in (PASS, CLONE_STH, CLONE_FRAGMENT)},
            "reject_reasons": dict(sorted(self.reject_reasons.items())),
            "stage_counts": {str(k): v for k, v in sorted(self.stage_counts.items())},
            "matches": {k: self.matches.get(k, 0) for k in (CLONE_STH, CLONE_FRAGMENT)},
            "clones": {k: self.clones.get(k, 0) for k in (CLONE_STH, CLONE_FRAGMENT)},
            "clones_dropped": self.clones_dropped,
        }


class Aggregator:
    """One pipeline instance (one ingress queue). Not thread-safe by itself;
    the clone channel is a bounded queue that a challenger may drain from
    another thread."""

    def __init__(self, config: PipelineConfig, ingress: str = "in0"):
        self.config = config
        self.ingress = ingress
        self.channel: queue.Queue = queue.Queue(maxsize=config.clone_channel_capacity)
        self.stats = PipelineStats()
        self._rng = random.Random(config.seed)

    def _sample(self, kind: str) -> bool:
        n = self.config.sampling_n
        if self.config.sampling_mode == "random":
            return self._rng.random() * n < 1
        return self.stats.matches[kind] % n == 0

    def process(self, packet: bytes, now: float = 0.0) -> tuple:
        """-> (forwarded, clone or None). ``forwarded`` is ``packet`` itself."""
        verdict, trace = classify(packet, self.config)
        st = self.stats
        st.packets += 1
        st.verdicts[verdict.kind] += 1
        st.stage_counts[len(trace)] += 1
        if verdict.reject_reason:
            st.reject_reasons[verdict.reject_reason] += 1
        clone = None
        if verdict.is_clone:
            st.matches[verdict.kind] += 1
            if self._sample(verdict.kind):
                clone = Clone(bytes(packet), verdict.kind, now, self.ingress, st.matches[verdict.kind])
                try:
                    self.channel.put_nowait(clone)
                except queue.Full:
                    st.clones_dropped += 1
                    clone = None
                else:
                    st.clones[verdict.kind] += 1
        return packet, clone

    def drain(self) -> list:
        out = []
        while True:
            try:
                out.append(self.channel.get_nowait())
            except queue.Empty:
                return out


def run_pcap(input_path, config: PipelineConfig, output_path, clones_path) -> dict:
    """Replay a capture through one aggregator; write forwarded and cloned frames."""
    packets = read_pcap(input_path)
    agg = Aggregator(config, ingress=str(input_path))
    forwarded, cloned = [], []
    for ts, frame in packets:
        out, _ = agg.process(frame, ts)
        forwarded.append((ts, out))
        cloned.extend((c.timestamp, c.frame) for c in agg.drain())
    write_pcap(output_path, forwarded)
    write_pcap(clones_path, cloned)
    return agg.stats.to_dict()


def benchmark_classify(frames: Iterable[bytes], config: PipelineConfig,
                       min_seconds: float = 0.5) -> float:
    """Packets classified per second on one core. Informational only."""
    frames = list(frames)
    done = 0
    start = time.perf_counter()
    while True:
        for f in frames:
            classify(f, config)
        done += len(frames)
        elapsed = time.perf_counter() - start
        if elapsed >= min_seconds:
            return done / elapsed
