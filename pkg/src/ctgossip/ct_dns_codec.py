"""STHs as restricted CT-over-DNS messages, and link-layer packet fixtures.

The accepted wire format is deliberately narrow: a UDP response with exactly
one question and one IN TXT answer for ``sth.<log>.ct.googleapis.com``, no
name compression, and a bounded number of labels, so that a constant-bound
parser can handle it.
"""

from __future__ import annotations

import base64
import binascii
import ipaddress
import re
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence, Union

from .merkle_log import LogId, SignedTreeHead

TYPE_TXT = 16
CLASS_IN = 1
RCODE_NXDOMAIN = 3
FLAGS_RESPONSE = 0x8180  # QR, RD, RA
DNS_PORT = 53

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
PROTO_TCP = 6
PROTO_UDP = 17
IPV6_FRAGMENT = 44

ETH_LEN = 14
IPV4_LEN = 20
IPV6_LEN = 40
UDP_LEN = 8

QUERY_SUFFIX = ("ct", "googleapis", "com")
MAX_LABELS = 8
MAX_LABEL_LEN = 63
RESPONSE_THRESHOLD = 400
STH_FRAME_SIZE = 411
TINY_FRAGMENT_SIZE = 64
DEFAULT_TTL = 300

_DIGITS = re.compile(r"^[0-9]+$")


class SthParseError(ValueError):
    pass


class FieldCountError(SthParseError):
    pass


class NumberFormatError(SthParseError):
    pass


class Base64FormatError(SthParseError):
    pass


class DigestLengthError(SthParseError):
    pass


class MessageSizeError(ValueError):
    """An STH message or frame does not fit its byte budget."""


# -- TXT payload -------------------------------------------------------------


def encode_sth_txt(sth: SignedTreeHead) -> str:
    return "%d.%d.%s.%s" % (
        sth.tree_size,
        sth.timestamp,
        base64.b64encode(sth.root_hash).decode(),
        base64.b64encode(sth.signature).decode(),
    )


def decode_sth_txt(text: str, log_id: Optional[LogId] = None) -> SignedTreeHead:
    """Parse ``size.timestamp.b64(root).b64(sig)``. The signature is not checked."""
    parts = text.split(".")
    if len(parts) != 4:
        raise FieldCountError(f"expected 4 dot-separated fields, got {len(parts)}")
    size, ts, root_b64, sig_b64 = parts
    if not (_DIGITS.match(size) and _DIGITS.match(ts)):
        raise NumberFormatError("tree size and timestamp must be decimal integers")
    try:
        root = base64.b64decode(root_b64, validate=True)
        sig = base64.b64decode(sig_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise Base64FormatError(str(exc)) from None
    if len(root) != 32:
        raise DigestLengthError(f"root hash is {len(root)} bytes, expected 32")
    return SignedTreeHead(log_id, int(size), int(ts), root, sig)


# -- DNS messages ------------------------------------------------------------


def sth_query_name(log_name: str) -> str:
    return "sth.%s.%s" % (log_name, ".".join(QUERY_SUFFIX))


def log_label(query_name: str) -> Optional[str]:
    """``<log>`` if ``query_name`` fits the STH template, else None."""
    labels = query_name.lower().split(".")
    if len(labels) == 5 and labels[0] == "sth" and tuple(labels[2:]) == QUERY_SUFFIX and labels[1]:
        return labels[1]
    return None


def encode_name(name: str) -> bytes:
    out = bytearray()
    for label in name.split("."):
        raw = label.encode("ascii")
        if not 0 < len(raw) <= MAX_LABEL_LEN:
            raise ValueError(f"bad DNS label {label!r}")
        out.append(len(raw))
        out += raw
    out.append(0)
    return bytes(out)


def _character_strings(chunks: Iterable[bytes]) -> bytes:
    out = bytearray()
    for chunk in chunks:
        if len(chunk) > 255:
            raise MessageSizeError("TXT character-string longer than 255 bytes")
        out.append(len(chunk))
        out += chunk
    return bytes(out)


@dataclass(frozen=True)
class DnsSthMessage:
    query_name: str
    txid: int
    txt_payload: str
    qd_count: int = 1
    an_count: int = 1
    qtype: int = TYPE_TXT
    qclass: int = CLASS_IN
    flags: int = FLAGS_RESPONSE
    ttl: int = DEFAULT_TTL
    # extra character-strings after the STH string (padding, extensions)
    txt_extra: tuple = ()

    @property
    def log(self) -> Optional[str]:
        return log_label(self.query_name)

    def to_wire(self) -> bytes:
        name = encode_name(self.query_name)
        header = struct.pack(">HHHHHH", self.txid, self.flags, self.qd_count, self.an_count, 0, 0)
        question = name + struct.pack(">HH", self.qtype, self.qclass)
        rdata = _character_strings([self.txt_payload.encode("ascii"), *self.txt_extra])
        answer = name + struct.pack(">HHIH", self.qtype, self.qclass, self.ttl, len(rdata)) + rdata
        return header + question + answer


@dataclass(frozen=True)
class Reject:
    """Why a message or packet was not accepted. ``offset`` is where parsing stopped."""

    reason: str
    offset: int = 0

    def __bool__(self):
        return False


class StopParse(Exception):
    """Internal early exit from the bounded parsers; carries a reject reason."""

    def __init__(self, reason: str, offset: int):
        self.reason = reason
        self.offset = offset


def read_name(buf: bytes, off: int, max_labels: int = MAX_LABELS) -> tuple:
    """Read an uncompressed name with at most ``max_labels`` labels.

    Returns ``(labels, end_offset, iterations)``; the loop body runs at most
    ``max_labels`` times whatever the input. Raises :class:`StopParse` on rejection.
    """
    labels = []
    iterations = 0
    for _ in range(max_labels):
        iterations += 1
        if off >= len(buf):
            raise StopParse("short_read", off)
        n = buf[off]
        if n == 0:
            return labels, off + 1, iterations
        if n & 0xC0 == 0xC0:
            raise StopParse("compressed_name", off)
        if n & 0xC0:
            raise StopParse("bad_label", off)
        if off + 1 + n > len(buf):
            raise StopParse("short_read", off)
        labels.append(buf[off + 1:off + 1 + n].decode("latin-1").lower())
        off += 1 + n
    if off >= len(buf):
        raise StopParse("short_read", off)
    if buf[off] != 0:
        raise StopParse("label_bound_exceeded", off)
    return labels, off + 1, iterations


def parse_preamble(buf: bytes, off: int = 0) -> tuple:
    """Fixed 12-byte DNS header -> (txid, flags, qd, an, ns, ar)."""
    if len(buf) - off < 12:
        raise StopParse("short_read", off)
    return struct.unpack_from(">HHHHHH", buf, off)


def parse_dns_message(data: bytes, *, max_labels: int = MAX_LABELS,
                      threshold: Optional[int] = None,
                      known_logs: Optional[Iterable[str]] = None) -> Union[DnsSthMessage, Reject]:
    """Parse an STH response. Total: every input yields a message or a Reject."""
    try:
        return _parse_dns_message(bytes(data), max_labels, threshold,
                                  None if known_logs is None else set(known_logs))
    except StopParse as stop:
        return Reject(stop.reason, stop.offset)


def _parse_dns_message(buf, max_labels, threshold, known_logs):
    if threshold is not None and len(buf) > threshold:
        raise StopParse("oversize", threshold)
    txid, flags, qd, an, _ns, _ar = parse_preamble(buf)
    if qd != 1 or an != 1:
        raise StopParse("qd_an_mismatch", 4)
    labels, off, _ = read_name(buf, 12, max_labels)
    if len(buf) - off < 4:
        raise StopParse("short_read", off)
    qtype, qclass = struct.unpack_from(">HH", buf, off)
    qname = ".".join(labels)
    log = log_label(qname)
    if log is None:
        raise StopParse("not_sth_name", 12)
    if known_logs is not None and log not in known_logs:
        raise StopParse("unknown_log", 12)
    if qtype != TYPE_TXT:
        raise StopParse("not_txt", off)
    if qclass != CLASS_IN:
        raise StopParse("not_in", off + 2)
    off += 4
    alabels, off, _ = read_name(buf, off, max_labels)
    if alabels != labels:
        raise StopParse("answer_name_mismatch", off)
    if len(buf) - off < 10:
        raise StopParse("short_read", off)
    atype, aclass, ttl, rdlen = struct.unpack_from(">HHIH", buf, off)
    if atype != TYPE_TXT or aclass != CLASS_IN:
        raise StopParse("answer_not_txt_in", off)
    off += 10
    end = off + rdlen
    if end > len(buf) or rdlen == 0:
        raise StopParse("short_read", off)
    strings = []
    # a TXT rdata of <= 65535 bytes holds at most 65535 strings; bound explicitly
    while off < end and len(strings) < 256:
        n = buf[off]
        if off + 1 + n > end:
            raise StopParse("short_read", off)
        strings.append(buf[off + 1:off + 1 + n])
        off += 1 + n
    if off != end:
        raise StopParse("txt_overflow", off)
    try:
        payload = strings[0].decode("ascii")
    except UnicodeDecodeError:
        raise StopParse("txt_not_ascii", end) from None
    return DnsSthMessage(qname, txid, payload, qd, an, qtype, qclass, flags, ttl, tuple(strings[1:]))


def build_sth_response_message(log: Union[LogId, str], sth: SignedTreeHead, txid: int,
                               *, threshold: int = RESPONSE_THRESHOLD, padding: int = 0) -> bytes:
    """Wire-format STH response. ``padding`` adds that many bytes as one extra TXT string."""
    name = log.name if isinstance(log, LogId) else log
    extra = ()
    if padding:
        if padding < 1:
            raise ValueError("padding must be positive")
        extra = (b"=" * (padding - 1),)
    wire = DnsSthMessage(sth_query_name(name), txid, encode_sth_txt(sth), txt_extra=extra).to_wire()
    if len(wire) > threshold:
        raise MessageSizeError(f"STH response is {len(wire)} bytes, threshold {threshold}")
    return wire


def build_query(log_name: str, txid: int, qtype: int = TYPE_TXT) -> bytes:
    header = struct.pack(">HHHHHH", txid, 0x0100, 1, 0, 0, 0)
    return header + encode_name(sth_query_name(log_name)) + struct.pack(">HH", qtype, CLASS_IN)


def parse_query(data: bytes, max_labels: int = MAX_LABELS) -> Union[tuple, Reject]:
    """-> (txid, qname, qtype, qclass, question_bytes) for a one-question query."""
    try:
        txid, flags, qd, *_ = parse_preamble(data)
        if flags & 0x8000 or qd != 1:
            raise StopParse("not_query", 2)
        labels, off, _ = read_name(data, 12, max_labels)
        if len(data) - off < 4:
            raise StopParse("short_read", off)
        qtype, qclass = struct.unpack_from(">HH", data, off)
        return txid, ".".join(labels), qtype, qclass, bytes(data[12:off + 4])
    except StopParse as stop:
        return Reject(stop.reason, stop.offset)


def build_error_response(txid: int, question: bytes, rcode: int = RCODE_NXDOMAIN) -> bytes:
    return struct.pack(">HHHHHH", txid, FLAGS_RESPONSE | rcode, 1, 0, 0, 0) + question


# -- link layer ----------------------------------------------------------------


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(">%dH" % (len(data) // 2), data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _mac(text: str) -> bytes:
    return bytes(int(x, 16) for x in text.split(":"))


@dataclass(frozen=True)
class PacketBlueprint:
    """Everything needed to serialize one Ethernet frame.

    ``fragment_offset`` is in bytes and must be a multiple of 8. With
    ``transport="none"`` the payload is emitted raw after the IP header(s),
    which is how non-first fragments are described.
    """

    payload: bytes = b""
    ip_version: int = 4
    transport: str = "udp"
    sport: int = DNS_PORT
    dport: int = 33333
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    src_mac: str = "02:00:00:00:00:53"
    dst_mac: str = "02:00:00:00:00:01"
    ethertype: Optional[int] = None
    protocol: Optional[int] = None
    ip_id: int = 0x1234
    ttl: int = 64
    dont_fragment: bool = False
    more_fragments: bool = False
    fragment_offset: int = 0
    ipv6_fragment_header: bool = False

    def addresses(self) -> tuple:
        if self.ip_version == 4:
            return self.src_ip or "192.0.2.53", self.dst_ip or "198.51.100.7"
        return self.src_ip or "2001:db8::53", self.dst_ip or "2001:db8::7"


def _transport_bytes(bp: PacketBlueprint, src: bytes, dst: bytes) -> tuple:
    if bp.transport == "udp":
        length = UDP_LEN + len(bp.payload)
        seg = struct.pack(">HHHH", bp.sport, bp.dport, length, 0) + bp.payload
        proto = PROTO_UDP
    elif bp.transport == "tcp":
        seg = struct.pack(">HHIIBBHHH", bp.sport, bp.dport, 1, 1, 5 << 4, 0x18, 65535, 0, 0) + bp.payload
        proto = PROTO_TCP
    elif bp.transport == "none":
        return bp.payload, bp.protocol if bp.protocol is not None else PROTO_UDP
    else:
        raise ValueError(f"unknown transport {bp.transport!r}")
    pseudo = src + dst + struct.pack(">xBH", proto, len(seg)) if len(src) == 4 else \
        src + dst + struct.pack(">I3xB", len(seg), proto)
    csum = _checksum(pseudo + seg) or 0xFFFF
    pos = 6 if proto == PROTO_UDP else 16
    seg = seg[:pos] + struct.pack(">H", csum) + seg[pos + 2:]
    return seg, bp.protocol if bp.protocol is not None else proto


def build_packet(bp: PacketBlueprint) -> bytes:
    src_txt, dst_txt = bp.addresses()
    src = ipaddress.ip_address(src_txt).packed
    dst = ipaddress.ip_address(dst_txt).packed
    if bp.fragment_offset % 8:
        raise ValueError("fragment offset must be a multiple of 8 bytes")
    body, proto = _transport_bytes(bp, src, dst)
    if bp.ip_version == 4:
        total = IPV4_LEN + len(body)
        flags = (0x4000 if bp.dont_fragment else 0) | (0x2000 if bp.more_fragments else 0)
        frag = flags | (bp.fragment_offset // 8)
        hdr = struct.pack(">BBHHHBBH4s4s", 0x45, 0, total, bp.ip_id, frag, bp.ttl, proto, 0, src, dst)
        hdr = hdr[:10] + struct.pack(">H", _checksum(hdr)) + hdr[12:]
        ethertype = ETH_IPV4
    elif bp.ip_version == 6:
        if bp.ipv6_fragment_header:
            fh = struct.pack(">BBHI", proto, 0, bp.fragment_offset | int(bp.more_fragments), bp.ip_id)
            body, proto = fh + body, IPV6_FRAGMENT
        hdr = struct.pack(">IHBB16s16s", 6 << 28, len(body), proto, bp.ttl, src, dst)
        ethertype = ETH_IPV6
    else:
        raise ValueError("ip_version must be 4 or 6")
    eth = _mac(bp.dst_mac) + _mac(bp.src_mac) + struct.pack(
        ">H", bp.ethertype if bp.ethertype is not None else ethertype)
    return eth + hdr + body


def build_sth_frame(sth: SignedTreeHead, log_name: str, *, txid: int = 0x5CA1,
                    ip_version: int = 4, frame_size: Optional[int] = None,
                    threshold: int = RESPONSE_THRESHOLD, **blueprint) -> bytes:
    """Ethernet frame carrying one STH response; padded to ``frame_size`` if given."""
    msg = build_sth_response_message(log_name, sth, txid, threshold=threshold)
    bp = PacketBlueprint(payload=msg, ip_version=ip_version, **blueprint)
    frame = build_packet(bp)
    if frame_size is None or len(frame) == frame_size:
        return frame
    pad = frame_size - len(frame)
    if pad < 1:
        raise MessageSizeError(f"STH frame is {len(frame)} bytes, cannot fit {frame_size}")
    msg = build_sth_response_message(log_name, sth, txid, threshold=threshold, padding=pad)
    return build_packet(replace(bp, payload=msg))


def build_fixture_packet(kind: str, sth: Optional[SignedTreeHead] = None, log_name: str = "pilot",
                         *, blueprint: Optional[PacketBlueprint] = None, **kwargs) -> bytes:
    """Golden frames: ``sth_411``, ``tiny_fragment_64`` or ``custom``."""
    if kind == "sth_411":
        if sth is None:
            raise ValueError("sth_411 needs an STH")
        return build_sth_frame(sth, log_name, frame_size=STH_FRAME_SIZE, **kwargs)
    if kind == "tiny_fragment_64":
        # trailing fragment: MF clear, nonzero offset, 30 data bytes -> 64-byte frame
        data = bytes((i * 7 + 3) & 0xFF for i in range(TINY_FRAGMENT_SIZE - ETH_LEN - IPV4_LEN))
        bp = PacketBlueprint(payload=data, transport="none", protocol=PROTO_UDP,
                             fragment_offset=kwargs.pop("fragment_offset", 64), **kwargs)
        return build_packet(bp)
    if kind == "custom":
        if blueprint is None:
            raise ValueError("custom fixture needs a blueprint")
        return build_packet(blueprint)
    raise ValueError(f"unknown fixture kind {kind!r}")


# -- IP-level decoding and fragmentation (used by the challenger) ---------------


@dataclass(frozen=True)
class IpDatagram:
    version: int
    src: str
    dst: str
    ident: int
    protocol: int
    more_fragments: bool
    fragment_offset: int  # bytes
    is_fragment: bool
    payload: bytes  # bytes after the IP header (and IPv6 fragment header)
    total_length: int


def decode_ip(frame: bytes) -> Optional[IpDatagram]:
    """Best-effort IP decode of an Ethernet frame; None if not well-formed IP."""
    if len(frame) < ETH_LEN:
        return None
    (ethertype,) = struct.unpack_from(">H", frame, 12)
    ip = frame[ETH_LEN:]
    if ethertype == ETH_IPV4:
        if len(ip) < IPV4_LEN or ip[0] >> 4 != 4:
            return None
        ihl = (ip[0] & 0x0F) * 4
        (total, ident, frag) = struct.unpack_from(">HHH", ip, 2)
        if ihl < IPV4_LEN or total < ihl or total > len(ip):
            return None
        mf = bool(frag & 0x2000)
        off = (frag & 0x1FFF) * 8
        return IpDatagram(4, str(ipaddress.IPv4Address(ip[12:16])), str(ipaddress.IPv4Address(ip[16:20])),
                          ident, ip[9], mf, off, mf or off > 0, ip[ihl:total], total)
    if ethertype == ETH_IPV6:
        if len(ip) < IPV6_LEN or ip[0] >> 4 != 6:
            return None
        plen, nxt = struct.unpack_from(">HB", ip, 4)
        if IPV6_LEN + plen > len(ip):
            return None
        src = str(ipaddress.IPv6Address(ip[8:24]))
        dst = str(ipaddress.IPv6Address(ip[24:40]))
        body = ip[IPV6_LEN:IPV6_LEN + plen]
        if nxt == IPV6_FRAGMENT:
            if len(body) < 8:
                return None
            inner, _, offm, ident = struct.unpack_from(">BBHI", body)
            mf, off = bool(offm & 1), offm & 0xFFF8
            return IpDatagram(6, src, dst, ident, inner, mf, off, True, body[8:], IPV6_LEN + plen)
        return IpDatagram(6, src, dst, 0, nxt, False, 0, False, body, IPV6_LEN + plen)
    return None


def fragment_frame(frame: bytes, cuts: Sequence[int]) -> list:
    """Split an unfragmented IP frame at the given payload offsets (multiples of 8)."""
    dg = decode_ip(frame)
    if dg is None or dg.is_fragment:
        raise ValueError("need an unfragmented IP frame")
    points = [0, *sorted(cuts), len(dg.payload)]
    if any(c % 8 for c in points[1:-1]) or any(b <= a for a, b in zip(points, points[1:])):
        raise ValueError("cut points must be increasing multiples of 8 inside the payload")
    src_mac = ":".join("%02x" % b for b in frame[6:12])
    dst_mac = ":".join("%02x" % b for b in frame[0:6])
    out = []
    for a, b in zip(points, points[1:]):
        bp = PacketBlueprint(
            payload=dg.payload[a:b], ip_version=dg.version, transport="none", protocol=dg.protocol,
            src_ip=dg.src, dst_ip=dg.dst, src_mac=src_mac, dst_mac=dst_mac,
            ip_id=dg.ident if dg.version == 4 else (dg.ident or 0x1234),
            more_fragments=b < len(dg.payload), fragment_offset=a,
            ipv6_fragment_header=dg.version == 6,
        )
        out.append(build_packet(bp))
    return out


def udp_payload(segment: bytes, sport: Optional[int] = DNS_PORT) -> Optional[bytes]:
    """DNS bytes of a UDP segment (optionally requiring a source port)."""
    if len(segment) < UDP_LEN:
        return None
    s, _d, length = struct.unpack_from(">HHH", segment)
    if sport is not None and s != sport:
        return None
    if length < UDP_LEN or length > len(segment):
        return None
    return segment[UDP_LEN:length]
