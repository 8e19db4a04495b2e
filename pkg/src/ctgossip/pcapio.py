"""Classic libpcap files: microsecond timestamps, Ethernet link type."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Union

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
SNAPLEN = 65535


class PcapError(IOError):
    pass


def write_pcap(path: Union[str, Path], packets: Iterable) -> int:
    """Write ``(timestamp_seconds, frame)`` pairs; returns the packet count."""
    count = 0
    with open(path, "wb") as fp:
        fp.write(struct.pack("<IHHiIII", MAGIC_US, 2, 4, 0, 0, SNAPLEN, LINKTYPE_ETHERNET))
        for ts, frame in packets:
            usec_total = round(ts * 1_000_000)
            sec, usec = divmod(usec_total, 1_000_000)
            fp.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
            fp.write(frame)
            count += 1
    return count


def read_pcap(path: Union[str, Path]) -> list:
    """Read a whole capture into ``[(timestamp_seconds, frame), ...]``.

    Everything is validated before returning, so callers see a corrupt file
    as a PcapError and never as a partially processed stream.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise PcapError(f"cannot read {path}: {exc}") from exc
    if len(data) < 24:
        raise PcapError(f"{path}: truncated global header")
    for endian in ("<", ">"):
        (magic,) = struct.unpack_from(endian + "I", data)
        if magic in (MAGIC_US, MAGIC_NS):
            break
    else:
        raise PcapError(f"{path}: bad magic")
    scale = 1e-6 if magic == MAGIC_US else 1e-9
    _, _, _, _, _, linktype = struct.unpack_from(endian + "HHiIII", data, 4)
    if linktype != LINKTYPE_ETHERNET:
        raise PcapError(f"{path}: link type {linktype} is not Ethernet")
    out = []
    off = 24
    while off < len(data):
        if len(data) - off < 16:
            raise PcapError(f"{path}: truncated record header at byte {off}")
        sec, frac, incl, _orig = struct.unpack_from(endian + "IIII", data, off)
        off += 16
        if incl > len(data) - off:
            raise PcapError(f"{path}: truncated record at byte {off}")
        out.append((sec + frac * scale, data[off:off + incl]))
        off += incl
    return out
