"""Generator for the synthetic headline coverage fixture.

550 probes trace two targets. Probe weights are /24, /23 or /22 (1, 2 or 4
units of 256 addresses, 1000 units in total), and the subsets of probes that
cross zero/one/two IXPs or a top-32 ranked AS are chosen so the weighted
fractions come out at exactly the targeted values.

Run ``python3 tests/coverage_fixtures.py tests/data/coverage/headline`` to
regenerate the checked-in files.
"""

import ipaddress
import json
import random
import sys
from pathlib import Path

TARGETS = {
    # name: (asn, announced prefix, traced address, ixp-count units, top-32 covered units)
    "google": (15169, "216.239.32.0/19", "216.239.34.64", {0: 740, 1: 200, 2: 60}, 316),
    "nordunet": (2603, "194.68.13.0/24", "194.68.13.48", {0: 300, 1: 585, 2: 115}, 581),
}
UNITS = [4] * 100 + [2] * 150 + [1] * 300
TRANSITS = [3000 + j for j in range(64)]
IXPS = list(range(1, 9))
FAILED_PROBES = 2


def _probe_block(i):
    return ipaddress.IPv4Network((int(ipaddress.IPv4Address("11.0.0.0")) + (i << 10), 22))


def _transit_ip(asn, host):
    j = asn - 3000
    return str(ipaddress.IPv4Address((20 << 24) | (j << 16) | (host & 0xFFFF)))


def _pick(rng, order, units, target, taken=()):
    """Choose probes (from ``order``, skipping ``taken``) whose units sum to ``target``."""
    chosen, total = [], 0
    for i in order:
        if i in taken or total + units[i] > target:
            continue
        chosen.append(i)
        total += units[i]
        if total == target:
            return set(chosen)
    raise AssertionError(f"cannot hit {target} exactly")


def generate(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20180310)
    n = len(UNITS)
    probe_asn = {i: 100000 + i for i in range(n + FAILED_PROBES)}

    rib = []
    for i in range(n + FAILED_PROBES):
        block = _probe_block(i)
        units = UNITS[i] if i < n else 1
        plen = {1: 24, 2: 23, 4: 22}[units]
        rib.append((str(ipaddress.IPv4Network((block.network_address, plen))), probe_asn[i]))
        if units == 4 and i % 3 == 0:
            # overlapping more-specific: must not inflate the probe's weight
            rib.append((str(ipaddress.IPv4Network((block.network_address, 24))), probe_asn[i]))
    for asn in TRANSITS:
        rib.append((_transit_ip(asn, 0) + "/16", asn))
    rib.append(("80.81.0.0/16", TRANSITS[-1]))  # IXP LANs are also announced by an AS
    for name, (asn, prefix, _, _, _) in TARGETS.items():
        rib.append((prefix, asn))

    ixp_rows = [(f"80.81.{x}.0/24", x, f"IX-{x}") for x in IXPS]
    # CAIDA-style list: the target ASes rank high but never count as on-path
    ranking = [TRANSITS[0], 15169] + TRANSITS[1:31] + [2603] + TRANSITS[31:]
    top32 = set(ranking[:32])
    covered_pool = [a for a in TRANSITS if a in top32]
    uncovered_pool = [a for a in TRANSITS if a not in top32]

    records = []
    for tname, (tasn, _, tip, ixp_units, cov_units) in TARGETS.items():
        order = list(range(n))
        rng.shuffle(order)
        ixp_count, taken = {}, set()
        for count in (1, 2):
            chosen = _pick(rng, order, UNITS, ixp_units[count], taken)
            taken |= chosen
            ixp_count.update({i: count for i in chosen})
        rng.shuffle(order)
        covered = _pick(rng, order, UNITS, cov_units)
        for i in range(n):
            transit = [rng.choice(covered_pool)] if i in covered else []
            transit += rng.sample(uncovered_pool, rng.randint(0 if transit else 1, 2))
            rng.shuffle(transit)
            hops = ["192.168.1.1", str(_probe_block(i).network_address + 1), str(_probe_block(i).network_address + 2)]
            ixps = rng.sample(IXPS, ixp_count.get(i, 0))
            for k, asn in enumerate(transit):
                hops += [_transit_ip(asn, 1 + k), _transit_ip(asn, 2 + k)]
                if rng.random() < 0.2:
                    hops.append(None)  # silent router
                if ixps:
                    hops.append(f"80.81.{ixps.pop()}.{10 + k}")
            for x in ixps:
                hops.append(f"80.81.{x}.200")
            tnet = ipaddress.IPv4Address(tip)
            hops += [str(tnet - 7), tip]
            records.append({"probe_id": f"p{i}", "probe_asn": probe_asn[i], "target": tname, "day": 0,
                            "hops": hops, "target_asn": tasn})
        for i in range(n, n + FAILED_PROBES):
            records.append({"probe_id": f"p{i}", "probe_asn": probe_asn[i], "target": tname, "day": 0,
                            "hops": [None] * 6, "target_asn": tasn})

    with open(out / "rib.csv", "w") as fp:
        fp.write("prefix,asn\n")
        fp.writelines(f"{p},{a}\n" for p, a in rib)
    with open(out / "ixp.csv", "w") as fp:
        fp.write("prefix,ixp_id,name\n")
        fp.writelines(f"{p},{x},{name}\n" for p, x, name in ixp_rows)
    with open(out / "ranking.csv", "w") as fp:
        fp.write("rank,asn\n")
        fp.writelines(f"{r},{a}\n" for r, a in enumerate(ranking, 1))
    with open(out / "traceroutes.jsonl", "w") as fp:
        fp.writelines(json.dumps(r, sort_keys=True) + "\n" for r in records)
    return out


if __name__ == "__main__":
    generate(sys.argv[1])
