"""Brute-force reference implementations used only by the tests.

These are deliberately written straight from the textbook definitions and
share no code with the package.
"""

import hashlib


def mth(leaves):
    """RFC 6962 Merkle Tree Hash, by plain recursion."""
    n = len(leaves)
    if n == 0:
        return hashlib.sha256(b"").digest()
    if n == 1:
        return hashlib.sha256(b"\x00" + leaves[0]).digest()
    k = 1
    while k * 2 < n:
        k *= 2
    return hashlib.sha256(b"\x01" + mth(leaves[:k]) + mth(leaves[k:])).digest()


def linear_lpm(table, ip_int):
    """Longest-prefix match by scanning every (network, prefixlen, value) row."""
    best = None
    for net, plen, value in table:
        mask = ((1 << 32) - 1) ^ ((1 << (32 - plen)) - 1) if plen else 0
        if ip_int & mask == net and (best is None or plen > best[0]):
            best = (plen, value)
    return None if best is None else best[1]


def ones_complement_checksum(header):
    total = 0
    for i in range(0, len(header), 2):
        total += (header[i] << 8) | header[i + 1]
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total
