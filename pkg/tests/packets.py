"""Shared packet fixtures: golden frames and their near-miss twins."""

from dataclasses import replace

from ctgossip import ct_dns_codec as codec
from ctgossip.ct_dns_codec import DnsSthMessage, PacketBlueprint, build_packet, encode_sth_txt
from ctgossip.merkle_log import HmacSigner, MerkleLog

LOG = "pilot"


def make_sth(name=LOG, leaves=5, now=1_520_000_000_000, key=b"fixture-key"):
    log = MerkleLog(name, HmacSigner(key))
    log.extend("main", [b"leaf-%d" % i for i in range(leaves)])
    return log, log.issue_sth("main", now)


def sth_message(sth, name=LOG, **fields):
    msg = DnsSthMessage(codec.sth_query_name(name), 0x5CA1, encode_sth_txt(sth))
    return replace(msg, **fields).to_wire()


def sth_frame(sth, name=LOG, ip_version=4, **fields):
    return build_packet(PacketBlueprint(payload=sth_message(sth, name, **fields), ip_version=ip_version))


def twins(sth, ip_version=4):
    """(matching frame, {perturbation: unmatched twin})."""
    base = sth_frame(sth, ip_version=ip_version)
    return base, {
        "unknown_log": sth_frame(sth, name="rogue", ip_version=ip_version),
        "not_in": sth_frame(sth, ip_version=ip_version, qclass=3),
        "not_txt": sth_frame(sth, ip_version=ip_version, qtype=1),
    }


def ipv4_fragment(total_length, more_fragments, offset, proto=17):
    bp = PacketBlueprint(payload=bytes(total_length - 20), transport="none", protocol=proto,
                         more_fragments=more_fragments, fragment_offset=offset)
    return build_packet(bp)
