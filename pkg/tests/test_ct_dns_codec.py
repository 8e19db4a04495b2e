import base64
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctgossip import ct_dns_codec as codec
from ctgossip.ct_dns_codec import (
    DnsSthMessage,
    PacketBlueprint,
    Reject,
    build_fixture_packet,
    build_packet,
    build_sth_response_message,
    decode_ip,
    decode_sth_txt,
    encode_sth_txt,
    fragment_frame,
    parse_dns_message,
    read_name,
)
from ctgossip.merkle_log import EMPTY_ROOT, Ed25519Signer, MerkleLog, SignedTreeHead
from ctgossip.pcapio import PcapError, read_pcap, write_pcap
from oracles import ones_complement_checksum


@pytest.fixture
def sth(log):
    log.extend("main", [b"a", b"b", b"c"])
    return log.issue_sth("main", 1_520_000_000_000)


sths = st.builds(
    lambda size, ts, root, sig: SignedTreeHead(None, size, ts, root, sig),
    st.integers(0, 2**63 - 1),
    st.integers(0, 2**63 - 1),
    st.binary(min_size=32, max_size=32),
    st.binary(min_size=0, max_size=120),
)


def test_encode_empty_sth(signer):
    sth = MerkleLog("pilot", signer).issue_sth("main", 0)
    b64 = base64.b64encode
    assert encode_sth_txt(sth) == "0.0.%s.%s" % (b64(EMPTY_ROOT).decode(), b64(sth.signature).decode())


@settings(max_examples=1000, deadline=None)
@given(sths)
def test_txt_roundtrip(sth):
    assert decode_sth_txt(encode_sth_txt(sth)) == sth


def test_typical_length_with_ed25519():
    log = MerkleLog("pilot", Ed25519Signer.from_seed(b"x"))
    log.extend("main", [b"%d" % i for i in range(5)])
    sth = log.issue_sth("main", 1_523_000_000_000)
    # a realistic log: ~10^8 entries, millisecond timestamp
    text = encode_sth_txt(SignedTreeHead(sth.log_id, 123_456_789, sth.timestamp, sth.root_hash, sth.signature))
    assert abs(len(text) - 170) <= 20


@pytest.mark.parametrize("text, exc", [
    ("garbage", codec.FieldCountError),
    ("1.2.3", codec.FieldCountError),
    ("x.2.%s.AA==" % base64.b64encode(bytes(32)).decode(), codec.NumberFormatError),
    ("1.-2.%s.AA==" % base64.b64encode(bytes(32)).decode(), codec.NumberFormatError),
    ("1.2.!!!!.AA==", codec.Base64FormatError),
    ("1.2.%s.AA==" % base64.b64encode(bytes(31)).decode(), codec.DigestLengthError),
])
def test_decode_errors(text, exc):
    with pytest.raises(exc):
        decode_sth_txt(text)


def test_parse_errors_are_value_errors():
    assert issubclass(codec.DigestLengthError, ValueError)


def test_question_name_labels(sth):
    wire = build_sth_response_message("pilot", sth, 7)
    labels, end, _ = read_name(wire, 12)
    assert labels == ["sth", "pilot", "ct", "googleapis", "com"]
    assert wire[12:end] == b"\x03sth\x05pilot\x02ct\x0agoogleapis\x03com\x00"


@settings(max_examples=200, deadline=None)
@given(sths, st.integers(0, 0xFFFF), st.sampled_from(["pilot", "aviator", "rocketeer", "x-1"]))
def test_message_roundtrip(sth, txid, name):
    msg = parse_dns_message(build_sth_response_message(name, sth, txid))
    assert isinstance(msg, DnsSthMessage)
    assert (msg.qd_count, msg.an_count, msg.txid, msg.log) == (1, 1, txid, name)
    assert decode_sth_txt(msg.txt_payload, sth.log_id) == sth


def test_size_errors(sth):
    from dataclasses import replace
    with pytest.raises(codec.MessageSizeError):
        build_sth_response_message("pilot", replace(sth, signature=bytes(250)), 1, threshold=400)
    with pytest.raises(codec.MessageSizeError):
        build_sth_response_message("pilot", sth, 1, threshold=100)


def test_qd_two_rejected(sth):
    wire = bytearray(build_sth_response_message("pilot", sth, 1))
    wire[4:6] = struct.pack(">H", 2)
    assert parse_dns_message(bytes(wire)) == Reject("qd_an_mismatch", 4)


def test_label_bound(sth):
    name = ".".join(["a"] * 7 + ["sth", "pilot", "ct", "googleapis", "com"])
    wire = DnsSthMessage(name, 1, encode_sth_txt(sth)).to_wire()
    out = parse_dns_message(wire, max_labels=8)
    assert isinstance(out, Reject) and out.reason == "label_bound_exceeded"


def test_compression_rejected(sth):
    wire = build_sth_response_message("pilot", sth, 1)
    q_end = 12 + 29 + 4
    compressed = wire[:q_end] + b"\xc0\x0c" + wire[q_end + 29:]
    assert parse_dns_message(compressed).reason == "compressed_name"


def test_padding_is_ignored_by_decoder(sth):
    wire = build_sth_response_message("pilot", sth, 1, padding=40)
    msg = parse_dns_message(wire)
    assert decode_sth_txt(msg.txt_payload, sth.log_id) == sth
    assert msg.txt_extra == (b"=" * 39,)


def test_known_logs_filter(sth):
    wire = build_sth_response_message("pilot", sth, 1)
    assert parse_dns_message(wire, known_logs={"other"}).reason == "unknown_log"
    assert isinstance(parse_dns_message(wire, known_logs={"pilot"}), DnsSthMessage)


def test_parser_totality_fuzz(sth):
    rng = random.Random(2024)
    seed = build_sth_response_message("pilot", sth, 1)
    for i in range(100_000):
        if i % 2:
            data = rng.randbytes(rng.randint(0, 300))
        else:
            data = bytearray(seed)
            for _ in range(rng.randint(1, 6)):
                data[rng.randrange(len(data))] = rng.randrange(256)
            data = bytes(data[: rng.randint(0, len(data))])
        out = parse_dns_message(data)
        assert isinstance(out, (DnsSthMessage, Reject))


@settings(max_examples=500)
@given(st.binary(max_size=200), st.integers(1, 12))
def test_name_loop_is_bounded(data, bound):
    try:
        _, _, iterations = read_name(data, 0, bound)
    except codec.StopParse:
        return
    assert iterations <= bound


def _check_headers(frame):
    ip = frame[14:]
    if frame[12:14] == b"\x08\x00":
        assert ones_complement_checksum(ip[:20]) == 0xFFFF
        assert struct.unpack(">H", ip[2:4])[0] == len(ip)
        frag = struct.unpack(">H", ip[6:8])[0]
        if ip[9] == 17 and not frag & 0x3FFF:
            assert struct.unpack(">H", ip[24:26])[0] == len(ip) - 20
    else:
        assert struct.unpack(">H", ip[4:6])[0] == len(ip) - 40


def test_sth_411_fixture(sth):
    frame = build_fixture_packet("sth_411", sth)
    assert len(frame) == 411
    _check_headers(frame)
    dg = decode_ip(frame)
    assert not dg.is_fragment
    msg = parse_dns_message(codec.udp_payload(dg.payload))
    assert decode_sth_txt(msg.txt_payload, sth.log_id) == sth


def test_sth_411_too_large(sth):
    from dataclasses import replace
    big = replace(sth, signature=bytes(190))
    with pytest.raises(codec.MessageSizeError):
        build_fixture_packet("sth_411", big, log_name="a" * 40)


def test_tiny_fragment_fixture():
    frame = build_fixture_packet("tiny_fragment_64")
    assert len(frame) == 64
    _check_headers(frame)
    dg = decode_ip(frame)
    assert dg.is_fragment and (dg.more_fragments or dg.fragment_offset > 0)
    assert dg.total_length < 400


@pytest.mark.parametrize("version", [4, 6])
def test_udp_checksum_valid(sth, version):
    frame = codec.build_sth_frame(sth, "pilot", ip_version=version)
    _check_headers(frame)
    dg = decode_ip(frame)
    import ipaddress
    src = ipaddress.ip_address(dg.src).packed
    dst = ipaddress.ip_address(dg.dst).packed
    seg = dg.payload
    if version == 4:
        pseudo = src + dst + struct.pack(">xBH", 17, len(seg))
    else:
        pseudo = src + dst + struct.pack(">I3xB", len(seg), 17)
    data = pseudo + seg + (b"\x00" if len(seg) % 2 else b"")
    assert ones_complement_checksum(data) == 0xFFFF


@pytest.mark.parametrize("version", [4, 6])
def test_fragment_and_decode(sth, version):
    frame = codec.build_sth_frame(sth, "pilot", ip_version=version)
    whole = decode_ip(frame)
    frags = fragment_frame(frame, [16, 128])
    assert len(frags) == 3
    pieces = [decode_ip(f) for f in frags]
    for f in frags:
        _check_headers(f)
    assert all(p.is_fragment for p in pieces)
    assert [p.more_fragments for p in pieces] == [True, True, False]
    assert b"".join(p.payload for p in pieces) == whole.payload


def test_fragment_cut_validation(sth):
    frame = codec.build_sth_frame(sth, "pilot")
    with pytest.raises(ValueError):
        fragment_frame(frame, [10])


def test_blueprint_tcp():
    frame = build_packet(PacketBlueprint(payload=b"xx", transport="tcp"))
    _check_headers(frame)
    assert frame[14 + 9] == 6


def test_query_and_error_response():
    q = codec.build_query("pilot", 99)
    txid, name, qtype, qclass, question = codec.parse_query(q)
    assert (txid, name, qtype, qclass) == (99, "sth.pilot.ct.googleapis.com", 16, 1)
    err = codec.build_error_response(txid, question)
    assert struct.unpack(">H", err[2:4])[0] & 0xF == 3


def test_pcap_roundtrip(tmp_path, sth):
    frames = [(1.5, build_fixture_packet("sth_411", sth)), (2.000001, build_fixture_packet("tiny_fragment_64"))]
    path = tmp_path / "x.pcap"
    assert write_pcap(path, frames) == 2
    back = read_pcap(path)
    assert [f for _, f in back] == [f for _, f in frames]
    assert back[1][0] == pytest.approx(2.000001, abs=1e-6)


def test_pcap_corrupt(tmp_path, sth):
    path = tmp_path / "x.pcap"
    write_pcap(path, [(0, build_fixture_packet("sth_411", sth))])
    data = path.read_bytes()
    (tmp_path / "trunc.pcap").write_bytes(data[:-5])
    with pytest.raises(PcapError):
        read_pcap(tmp_path / "trunc.pcap")
    (tmp_path / "magic.pcap").write_bytes(b"\x00" * 40)
    with pytest.raises(PcapError):
        read_pcap(tmp_path / "magic.pcap")
    with pytest.raises(PcapError):
        read_pcap(tmp_path / "missing.pcap")
