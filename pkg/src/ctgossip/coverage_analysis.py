"""Traceroute-based estimate of how many clients on-path aggregators would cover.

Hops are mapped to vantage points (``AS<n>`` or ``IXP<id>``) with longest
prefix match over a RIB snapshot and an IXP peering-LAN table. Each probe is
weighted by the IPv4 address space its AS originates. From the annotated
paths we compute path-length histograms, day-to-day stability and coverage
curves for a given opt-in ranking.
"""

from __future__ import annotations

import csv
import ipaddress
import json
import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

log = logging.getLogger(__name__)

KNOWN_TARGETS = {"216.239.34.64": "google", "194.68.13.48": "nordunet"}
AS_KIND, IXP_KIND = "as", "ixp"


class TracerouteFormatError(ValueError):
    pass


def as_vp(asn: int) -> str:
    return f"AS{asn}"


def ixp_vp(ixp_id) -> str:
    return f"IXP{ixp_id}"


def vp_kind(vp: str) -> str:
    return IXP_KIND if vp.startswith("IXP") else AS_KIND


def vp_sort_key(vp: str) -> tuple:
    kind = vp_kind(vp)
    tail = vp[3:] if kind == IXP_KIND else vp[2:] if vp.startswith("AS") else ""
    return (kind, int(tail), vp) if tail.isdigit() else (kind, float("inf"), vp)


class PrefixTable:
    """IPv4 longest-prefix match: one dict per prefix length, longest first."""

    def __init__(self):
        self._by_len: dict = {}
        self._lens: list = []

    def __len__(self):
        return sum(len(d) for d in self._by_len.values())

    def insert(self, prefix: Union[str, ipaddress.IPv4Network], value) -> None:
        net = ipaddress.IPv4Network(prefix, strict=False)
        plen = net.prefixlen
        if plen not in self._by_len:
            self._by_len[plen] = {}
            self._lens = sorted(self._by_len, reverse=True)
        self._by_len[plen][int(net.network_address)] = value

    def lookup(self, ip: Union[str, int, ipaddress.IPv4Address]):
        addr = int(ipaddress.IPv4Address(ip))
        for plen in self._lens:
            mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
            hit = self._by_len[plen].get(addr & mask)
            if hit is not None:
                return hit
        return None

    def items(self):
        for plen, table in self._by_len.items():
            for net, value in table.items():
                yield ipaddress.IPv4Network((net, plen)), value


def _csv_rows(path: Union[str, Path], ncols: int):
    with open(path, newline="") as fp:
        for row in csv.reader(fp):
            if not row or row[0].startswith("#") or row[0].strip() == "prefix":
                continue
            if len(row) < ncols:
                raise ValueError(f"{path}: expected {ncols} columns, got {row!r}")
            yield [c.strip() for c in row]


def load_rib(path: Union[str, Path]) -> tuple:
    """``prefix,asn`` CSV -> (PrefixTable of ASNs, {asn: originated IPv4 addresses})."""
    table = PrefixTable()
    per_as = defaultdict(list)
    skipped = 0
    for prefix, asn, *_ in _csv_rows(path, 2):
        try:
            net = ipaddress.IPv4Network(prefix, strict=False)
        except ValueError:
            skipped += 1  # IPv6 and junk rows
            continue
        table.insert(net, int(asn))
        per_as[int(asn)].append(net)
    if skipped:
        log.info("%s: skipped %d non-IPv4 rows", path, skipped)
    return table, address_counts(per_as)


def address_counts(per_as: Mapping[int, Iterable]) -> dict:
    """Originated space per AS, overlapping prefixes counted once."""
    return {asn: sum(n.num_addresses for n in ipaddress.collapse_addresses(nets))
            for asn, nets in per_as.items()}


def load_ixp(path: Union[str, Path]) -> tuple:
    """``prefix,ixp_id,name`` CSV -> (PrefixTable of IXP ids, {id: name})."""
    table, names = PrefixTable(), {}
    for prefix, ixp_id, name, *_ in _csv_rows(path, 3):
        try:
            table.insert(prefix, ixp_id)
        except ValueError:
            continue
        names[ixp_id] = name
    return table, names


def load_ranking(path: Union[str, Path]) -> list:
    """External AS ranking: one ASN per line, or ``rank,asn`` CSV, best first."""
    out = []
    with open(path, newline="") as fp:
        for row in csv.reader(fp):
            if not row or row[0].startswith("#") or not row[-1].strip().lstrip("AS").isdigit():
                continue
            out.append(as_vp(int(row[-1].strip().lstrip("AS"))))
    if not out:
        raise ValueError(f"{path}: empty ranking")
    return out


@dataclass(frozen=True)
class TracerouteRecord:
    probe_id: str
    probe_asn: Optional[int]
    target: str
    day: int
    hops: tuple  # IPv4 address strings, None for a hop that never replied
    target_asn: Optional[int] = None
    target_ip: Optional[str] = None
    source_ip: Optional[str] = None

    @property
    def failed(self) -> bool:
        return not any(self.hops)


def _first_reply(replies) -> Optional[str]:
    for r in replies or ():
        src = r.get("from") if isinstance(r, dict) else None
        if src:
            try:
                return str(ipaddress.IPv4Address(src))
            except ValueError:
                return None
    return None


def _from_ripe(obj: dict, probe_asns: Mapping) -> TracerouteRecord:
    hops = []
    for hop in sorted(obj["result"], key=lambda h: h.get("hop", 0)):
        hops.append(None if "error" in hop else _first_reply(hop.get("result")))
    dst = obj["dst_addr"]
    pid = str(obj["prb_id"])
    asn = probe_asns.get(pid, probe_asns.get(obj["prb_id"]))
    return TracerouteRecord(pid, asn, KNOWN_TARGETS.get(dst, dst), int(obj["timestamp"]) // 86400,
                            tuple(hops), None, dst, obj.get("from") or None)


def _from_simple(obj: dict) -> TracerouteRecord:
    hops = tuple(None if h in (None, "*", "") else str(ipaddress.IPv4Address(h)) for h in obj["hops"])
    asn = obj.get("probe_asn")
    tasn = obj.get("target_asn")
    return TracerouteRecord(str(obj["probe_id"]), None if asn is None else int(asn), str(obj["target"]),
                            int(obj["day"]), hops, None if tasn is None else int(tasn), obj.get("target_ip"))


def load_traceroutes(path: Union[str, Path], *, probe_asns: Optional[Mapping] = None,
                     stats: Optional[Counter] = None) -> list:
    """Read RIPE Atlas traceroute results (JSON array or JSON lines) or the
    simplified schema ``{probe_id, probe_asn, target, day, hops, target_asn}``.

    RIPE day indices are rebased so the earliest day in the file is 0.
    """
    stats = stats if stats is not None else Counter()
    probe_asns = probe_asns or {}
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
        objs = doc if isinstance(doc, list) else [doc]
    except json.JSONDecodeError:
        objs = []
        for line in text.splitlines():
            if not line.strip():
                continue
            try:
                objs.append(json.loads(line))
            except json.JSONDecodeError:
                objs.append(None)
    records, ripe = [], []
    for obj in objs:
        try:
            if not isinstance(obj, dict):
                raise TypeError("not an object")
            if "prb_id" in obj:
                rec = _from_ripe(obj, probe_asns)
                ripe.append(len(records))
            else:
                rec = _from_simple(obj)
        except (KeyError, TypeError, ValueError):
            stats["skipped"] += 1
            continue
        stats["failed" if rec.failed else "ok"] += 1
        records.append(rec)
    if objs and not records:
        raise TracerouteFormatError(f"{path}: no parseable traceroute records")
    if ripe:
        first = min(records[i].day for i in ripe)
        for i in ripe:
            r = records[i]
            records[i] = TracerouteRecord(r.probe_id, r.probe_asn, r.target, r.day - first, r.hops,
                                          r.target_asn, r.target_ip, r.source_ip)
    if stats["skipped"]:
        log.warning("%s: skipped %d unparseable rows", path, stats["skipped"])
    return records


@dataclass(frozen=True)
class AnnotatedPath:
    probe_id: str
    target: str
    day: int
    hops: tuple  # vantage points in path order, no consecutive duplicates
    unmapped: int = 0

    def members(self, kind: Optional[str] = None) -> set:
        return {v for v in self.hops if kind is None or vp_kind(v) == kind}

    def length(self, kind: str) -> int:
        return sum(1 for v in self.hops if vp_kind(v) == kind)


def annotate(record: TracerouteRecord, rib: PrefixTable, ixp: Optional[PrefixTable] = None) -> AnnotatedPath:
    """Map hops to vantage points: IXP LAN first, then origin AS.

    The leading run inside the probe's AS and the trailing run inside the
    target's AS are dropped, so a path of length one crosses exactly one
    vantage point before the target.
    """
    mapped, unmapped = [], 0
    for ip in record.hops:
        if ip is None:
            continue
        hit = ixp.lookup(ip) if ixp is not None else None
        if hit is not None:
            vp = ixp_vp(hit)
        else:
            asn = rib.lookup(ip)
            if asn is None:
                unmapped += 1
                continue
            vp = as_vp(asn)
        if not mapped or mapped[-1] != vp:
            mapped.append(vp)
    probe_asn = record.probe_asn
    if probe_asn is None and record.source_ip:
        probe_asn = rib.lookup(record.source_ip)
    target_asn = record.target_asn
    if target_asn is None and record.target_ip:
        target_asn = rib.lookup(record.target_ip)
    if probe_asn is not None:
        while mapped and mapped[0] == as_vp(probe_asn):
            mapped.pop(0)
    if target_asn is not None:
        while mapped and mapped[-1] == as_vp(target_asn):
            mapped.pop()
    return AnnotatedPath(record.probe_id, record.target, record.day, tuple(mapped), unmapped)


@dataclass
class Dataset:
    """Annotated successful records plus per-probe weights."""

    paths: list
    weights: dict  # probe_id -> weight
    failed: int = 0
    unmapped_hops: int = 0
    probes: set = field(default_factory=set)

    def record_weights(self) -> list:
        """(path, share) with each probe's weight split over its records."""
        per_probe = Counter(p.probe_id for p in self.paths)
        return [(p, self.weights.get(p.probe_id, 0) / per_probe[p.probe_id]) for p in self.paths]

    def for_target(self, target: str) -> "Dataset":
        paths = [p for p in self.paths if p.target == target]
        return Dataset(paths, self.weights, self.failed, sum(p.unmapped for p in paths),
                       {p.probe_id for p in paths})

    @property
    def targets(self) -> list:
        return sorted({p.target for p in self.paths})


def build_dataset(records: Sequence[TracerouteRecord], rib: PrefixTable, ixp: Optional[PrefixTable],
                  as_space: Mapping[int, int], weights: Optional[Mapping[str, float]] = None) -> Dataset:
    paths, failed = [], 0
    probe_asn = {}
    for rec in records:
        if rec.failed:
            failed += 1
            continue
        path = annotate(rec, rib, ixp)
        paths.append(path)
        asn = rec.probe_asn
        if asn is None and rec.source_ip:
            asn = rib.lookup(rec.source_ip)
        probe_asn.setdefault(rec.probe_id, asn)
    if weights is None:
        weights = {pid: as_space.get(asn, 0) if asn is not None else 0 for pid, asn in probe_asn.items()}
    return Dataset(paths, dict(weights), failed, sum(p.unmapped for p in paths), set(probe_asn))


def _total(pairs) -> float:
    total = sum(w for _, w in pairs)
    if total <= 0:
        raise ValueError("total probe weight is zero")
    return total


def path_length_distribution(data: Dataset, kind: str) -> dict:
    """{path length: weighted fraction}, summing to 1."""
    if kind not in (AS_KIND, IXP_KIND):
        raise ValueError(f"kind must be 'as' or 'ixp', not {kind!r}")
    pairs = data.record_weights()
    if not pairs:
        raise ValueError("no successful traceroutes")
    total = _total(pairs)
    hist = defaultdict(float)
    for path, w in pairs:
        hist[path.length(kind)] += w / total
    return dict(sorted(hist.items()))


def path_stability(paths: Iterable[AnnotatedPath], kind: Optional[str] = None) -> Optional[float]:
    """Fraction of consecutive day pairs with identical vantage-point sets.

    None when the probe has no pair of successful records on adjacent days.
    """
    by_day = {p.day: p.members(kind) for p in paths}
    pairs = [(d, d + 1) for d in sorted(by_day) if d + 1 in by_day]
    if not pairs:
        return None
    return sum(by_day[a] == by_day[b] for a, b in pairs) / len(pairs)


def stability_by_probe(data: Dataset, kind: Optional[str] = None) -> dict:
    grouped = defaultdict(list)
    for p in data.paths:
        grouped[p.probe_id].append(p)
    out = {}
    for pid, paths in sorted(grouped.items()):
        s = path_stability(paths, kind)
        if s is not None:
            out[pid] = s
    return out


def coverage(data: Dataset, aggregators: Iterable[str]) -> float:
    s = set(aggregators)
    pairs = data.record_weights()
    if not pairs:
        return 0.0
    total = _total(pairs)
    return sum(w for path, w in pairs if s.intersection(path.hops)) / total


def rank_pop(data: Dataset, kind: Optional[str] = None, *, raw_count: bool = False) -> list:
    """Vantage points by descending traversal weight (or traversal count), ties by id."""
    score = defaultdict(float)
    for path, w in data.record_weights():
        for v in path.members(kind):
            score[v] += 1 if raw_count else w
    return sorted(score, key=lambda v: (-score[v], vp_sort_key(v)))


@dataclass(frozen=True)
class CoverageCurve:
    ranking: str
    points: tuple  # (k, coverage)


def coverage_curve(data: Dataset, ranking: Sequence[str], k_max: int, name: str = "pop") -> CoverageCurve:
    if not ranking:
        raise ValueError("empty ranking")
    if k_max > len(ranking):
        warnings.warn(f"ranking {name!r} has {len(ranking)} entries, truncating curve at k={len(ranking)}",
                      stacklevel=2)
        k_max = len(ranking)
    pairs = data.record_weights()
    total = _total(pairs) if pairs else 1.0
    # first rank at which each path becomes covered
    pos = {v: i for i, v in reversed(list(enumerate(ranking[:k_max])))}
    gained = [0.0] * (k_max + 1)
    for path, w in pairs:
        hits = [pos[v] for v in path.hops if v in pos]
        if hits:
            gained[min(hits) + 1] += w
    points, acc = [], 0.0
    for k in range(k_max + 1):
        acc += gained[k]
        points.append((k, min(1.0, acc / total)))
    return CoverageCurve(name, tuple(points))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_outputs(data: Dataset, out_dir: Union[str, Path], *, k_max: int = 32,
                  external: Optional[Sequence[str]] = None, external_name: str = "external") -> dict:
    """Write plot-ready CSVs plus summary.json into ``out_dir``; return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"targets": {}, "failed_records": data.failed}
    with open(out / "path_length.csv", "w", newline="") as f_len, \
            open(out / "stability.csv", "w", newline="") as f_stab, \
            open(out / "curves.csv", "w", newline="") as f_curve:
        w_len, w_stab, w_curve = (csv.writer(f, lineterminator="\n") for f in (f_len, f_stab, f_curve))
        w_len.writerow(["target", "kind", "length", "fraction"])
        w_stab.writerow(["target", "probe_id", "stability"])
        w_curve.writerow(["target", "ranking", "k", "coverage"])
        for target in data.targets:
            sub = data.for_target(target)
            entry = {"records": len(sub.paths), "probes": len(sub.probes), "unmapped_hops": sub.unmapped_hops}
            for kind in (AS_KIND, IXP_KIND):
                hist = path_length_distribution(sub, kind)
                entry[f"{kind}_path_length"] = {str(k): round(v, 6) for k, v in hist.items()}
                for length, frac in hist.items():
                    w_len.writerow([target, kind, length, _fmt(frac)])
            stab = stability_by_probe(sub)
            for pid, s in stab.items():
                w_stab.writerow([target, pid, _fmt(s)])
            entry["mean_stability"] = round(sum(stab.values()) / len(stab), 6) if stab else None
            rankings = [("pop", rank_pop(sub))]
            if external:
                rankings.append((external_name, list(external)))
            for name, ranking in rankings:
                if not ranking:
                    continue
                curve = coverage_curve(sub, ranking, min(k_max, len(ranking)), name)
                for k, c in curve.points:
                    w_curve.writerow([target, name, k, _fmt(c)])
                entry[f"coverage_{name}_top{curve.points[-1][0]}"] = round(curve.points[-1][1], 6)
            summary["targets"][target] = entry
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
