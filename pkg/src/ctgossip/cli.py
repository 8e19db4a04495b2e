"""``ctgossip`` command line: one subcommand per workflow.

Exit codes: 0 success, 1 usage error, 2 data error. Reports go to stdout
unless an output path is given; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import ipaddress
import json
import logging
import socket
import sys
import tempfile
import time
from pathlib import Path
from typing import Optional

from . import __version__
from . import ct_dns_codec as codec
from .aggregation_pipeline import PipelineConfig, run_pcap
from .challenger import AuditInterrupted, Challenger, InProcessOffPath, TransportError, report
from .coverage_analysis import build_dataset, load_ixp, load_ranking, load_rib, load_traceroutes, write_outputs
from .merkle_log import Ed25519Signer, ForkPolicy, HmacSigner, LogError, MerkleLog, make_verifier
from .network_sim import TopologyError, bundled_scenario, detection_probability, load_scenario
from .pcapio import PcapError, read_pcap, write_pcap
from .reverify import check_report

log = logging.getLogger("ctgossip")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(text: str, path: Optional[str]) -> None:
    if path:
        Path(path).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _now_ms(args) -> int:
    return 0 if args.deterministic else int(time.time() * 1000)


def make_signer(scheme: str, seed: str):
    if scheme == "ed25519":
        return Ed25519Signer.from_seed(seed.encode())
    if scheme == "hmac-sha256":
        return HmacSigner(seed.encode())
    raise UsageError(f"unknown signature scheme {scheme!r}")


def keys_json(signers: dict) -> str:
    return json.dumps({name: {"scheme": s.scheme, "public_key": s.public_key.hex()}
                       for name, s in sorted(signers.items())}, indent=2, sort_keys=True)


def load_keys(path: str) -> dict:
    """``{log: {scheme, public_key(hex)}}`` -> {log: verifier}."""
    obj = json.loads(Path(path).read_text())
    try:
        return {name: make_verifier(v["scheme"], bytes.fromhex(v["public_key"])) for name, v in obj.items()}
    except (KeyError, TypeError, AttributeError) as exc:
        raise ValueError(f"{path}: malformed key file ({exc})") from None


# -- logserve -------------------------------------------------------------------


class LogServer:
    """Answers ``sth.<log>.ct.example`` TXT queries, one STH per UDP response.

    ``classes`` maps source networks to client-class labels, which the fork
    policy of each log turns into a branch.
    """

    def __init__(self, logs: dict, policies: Optional[dict] = None, classes=(), default_class: str = "default"):
        self.logs = logs
        self.policies = policies or {}
        self.classes = [(ipaddress.ip_network(net), label) for net, label in classes]
        self.default_class = default_class
        self.served = 0

    def client_class(self, addr: str) -> str:
        ip = ipaddress.ip_address(addr)
        for net, label in self.classes:
            if ip.version == net.version and ip in net:
                return label
        return self.default_class

    def handle(self, query: bytes, addr: str, now: int = 0) -> Optional[bytes]:
        parsed = codec.parse_query(query)
        if isinstance(parsed, codec.Reject):
            return None
        txid, qname, qtype, qclass, question = parsed
        name = codec.log_label(qname)
        lg = self.logs.get(name) if name else None
        if lg is None or qtype != codec.TYPE_TXT or qclass != codec.CLASS_IN:
            return codec.build_error_response(txid, question)
        policy = self.policies.get(name, ForkPolicy())
        sth = lg.serve_sth(policy, self.client_class(addr), now)
        self.served += 1
        return codec.build_sth_response_message(name, sth, txid)


def _parse_fork(spec: str) -> tuple:
    try:
        net, label = spec.split("=", 1)
        ipaddress.ip_network(net)
    except ValueError:
        raise UsageError(f"--fork expects CIDR=class, got {spec!r}") from None
    return net, label


def build_logserver(args) -> tuple:
    logs, policies, signers = {}, {}, {}
    classes = [_parse_fork(f) for f in args.fork]
    for name in args.log:
        signer = make_signer(args.scheme, f"{args.key_seed}|{name}")
        lg = MerkleLog(name, signer)
        lg.extend("main", (b"%s|%d" % (name.encode(), i) for i in range(args.leaves)))
        policy = ForkPolicy()
        if classes:
            lg.fork("victim")
            lg.extend("main", [b"%s|honest" % name.encode()])
            lg.extend("victim", [b"%s|split" % name.encode()])
            policy = ForkPolicy("fork_by_client_class", {label: "victim" for _, label in classes})
        logs[name], policies[name], signers[name] = lg, policy, signer
    return LogServer(logs, policies, classes), signers


def cmd_logserve(args) -> int:
    server, signers = build_logserver(args)
    if args.export_keys:
        Path(args.export_keys).write_text(keys_json(signers) + "\n")
    family = socket.AF_INET6 if ":" in args.bind else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_DGRAM)
    try:
        sock.bind((args.bind, args.port))
    except OSError as exc:
        print(f"ctgossip logserve: cannot bind {args.bind}:{args.port}: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"listening on {sock.getsockname()[0]}:{sock.getsockname()[1]}", file=sys.stderr, flush=True)
    handled = 0
    try:
        while args.max_queries is None or handled < args.max_queries:
            data, addr = sock.recvfrom(4096)
            handled += 1
            reply = server.handle(data, addr[0], _now_ms(args))
            if reply is not None:
                sock.sendto(reply, addr)
    except KeyboardInterrupt:
        pass
    finally:
        sock.close()
    return EXIT_OK


# -- aggregate / challenge ------------------------------------------------------


def cmd_aggregate(args) -> int:
    cfg = PipelineConfig.load(args.config).to_dict() if args.config else {}
    if args.known_log:
        cfg["known_logs"] = args.known_log
    if args.sampling_n is not None:
        cfg["sampling_n"] = args.sampling_n
    if args.threshold is not None:
        cfg["fragment_threshold_bytes"] = args.threshold
    config = PipelineConfig.from_dict(cfg)
    if not config.known_logs:
        raise UsageError("no known logs: pass --known-log or a config file")
    stats = run_pcap(args.pcap, config, args.out, args.clones)
    _emit(json.dumps(stats, indent=2, sort_keys=True), args.stats)
    return EXIT_OK


def cmd_challenge(args) -> int:
    keys = load_keys(args.keys)
    ch = Challenger(keys, journal=args.journal, audit_delay_ms=args.audit_delay_ms)
    if args.resume_journal:
        ch.load_journal(args.resume_journal)
    last = 0
    for ts, frame in read_pcap(args.clones):
        last = int(ts * 1000)
        ch.ingest_clone(frame, last)
    if args.now is not None:
        now = args.now
    else:
        now = last if args.deterministic else max(_now_ms(args), last)
    channels = {}
    for spec in args.log_state:
        name, _, path = spec.partition("=")
        if not path or name not in keys:
            raise UsageError(f"--log-state expects LOG=PATH for a log in the key file, got {spec!r}")
        signer = make_signer(keys[name].scheme, f"{args.log_key_seed}|{name}")
        if signer.public_key != keys[name].public_key:
            raise UsageError(f"--log-key-seed does not reproduce the key of log {name!r}")
        with open(path) as fp:
            lg, policy = MerkleLog.load(fp, signer)
        channels[name] = InProcessOffPath(lg, policy, args.identity, now)
    evidence, interrupted = [], []
    for name in sorted(keys):
        chan = channels.get(name)
        if chan is not None:
            try:
                ch.fetch_off_path(chan, name, now)
            except TransportError as exc:
                log.warning("off-path fetch for %s failed: %s", name, exc)
        try:
            evidence += ch.audit(chan, name, now)
        except AuditInterrupted as exc:
            evidence += exc.evidence
            interrupted.append({"log": name, "cursor": exc.cursor})
    meta = {"counters": dict(sorted(ch.counters.items())), "proof_requests": ch.proof_requests,
            "stored": len(ch.store), "interrupted": interrupted}
    _emit(report(evidence, generated_at=0 if args.deterministic else now, keys=keys, audit=meta), args.report)
    print(f"{len(evidence)} finding(s) from {ch.counters['clones']} clone(s)", file=sys.stderr)
    return EXIT_OK


def cmd_verify_report(args) -> int:
    keys = {name: (v.scheme, v.public_key) for name, v in load_keys(args.keys).items()}
    checks = check_report(Path(args.report).read_text(), keys)
    for c in checks:
        print(f"finding {c.index} {c.kind}: {'VALID' if c.ok else 'INVALID'} ({c.detail})")
    if not checks:
        print("no findings")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_DATA


# -- simulate / coverage --------------------------------------------------------


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario) if Path(args.scenario).exists() else None
    if scenario is None:
        try:
            scenario = bundled_scenario(args.scenario)
        except FileNotFoundError:
            raise UsageError(f"no scenario file or bundled scenario named {args.scenario!r}") from None
    if args.rounds is not None:
        scenario.rounds = args.rounds
    seed = scenario.seed if args.seed is None else args.seed
    if args.trials:
        p, se = detection_probability(scenario.topology, scenario.strategy, args.trials, seed, scenario.rounds)
        _emit(json.dumps({"trials": args.trials, "seed": seed, "detection_probability": p, "stderr": se},
                         sort_keys=True), args.report)
        return EXIT_OK
    rep = scenario.run(seed)
    if args.report:
        _emit(rep.dumps(), args.report)
    if args.evidence:
        _emit(rep.evidence_report(), args.evidence)
    verdict = "DETECTED" if rep.detected else "NOT-DETECTED"
    extra = f" round={rep.detection_round}" if rep.detected else ""
    print(f"{verdict} evidence={rep.evidence_count}{extra}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    rib, space = load_rib(args.rib)
    ixp = load_ixp(args.ixp)[0] if args.ixp else None
    probe_asns = json.loads(Path(args.probe_asns).read_text()) if args.probe_asns else None
    records = load_traceroutes(args.traceroutes, probe_asns=probe_asns)
    data = build_dataset(records, rib, ixp, space)
    if not data.paths:
        raise ValueError("no successful traceroutes")
    ranking = load_ranking(args.ranking) if args.ranking else None
    if args.out:
        summary = write_outputs(data, args.out, k_max=args.k_max, external=ranking)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            summary = write_outputs(data, tmp, k_max=args.k_max, external=ranking)
            sys.stdout.write((Path(tmp) / "curves.csv").read_text())
        return EXIT_OK
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fixtures(args) -> int:
    """Write golden capture files for trying out the pipeline."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    signer = make_signer(args.scheme, f"{args.key_seed}|pilot")
    lg = MerkleLog("pilot", signer)
    lg.extend("main", (b"pilot|%d" % i for i in range(args.leaves)))
    sth = lg.issue_sth("main", 1_520_000_000_000)
    golden = codec.build_fixture_packet("sth_411", sth)
    tiny = codec.build_fixture_packet("tiny_fragment_64")
    write_pcap(out / "sth_411.pcap", [(0.0, golden)])
    write_pcap(out / "tiny_fragment_64.pcap", [(0.0, tiny)])
    background = [codec.build_packet(codec.PacketBlueprint(payload=bytes([i % 251]) * 300, sport=443))
                  for i in range(9)]
    mixed = []
    for i in range(args.matches):
        mixed.append(golden)
        mixed.extend(background)
    write_pcap(out / "mixed.pcap", [(i * 0.001, f) for i, f in enumerate(mixed)])
    (out / "keys.json").write_text(keys_json({"pilot": signer}) + "\n")
    with open(out / "pilot.log", "w") as fp:
        lg.export(fp)
    print(json.dumps({"dir": str(out), "mixed_packets": len(mixed), "sth_matches": args.matches}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctgossip", description="CT split-view detection toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--deterministic", action="store_true", help="normalize timestamps in outputs")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("logserve", help="serve STHs over CT-over-DNS (UDP)")
    s.add_argument("--bind", default="127.0.0.1")
    s.add_argument("--port", type=int, default=5353)
    s.add_argument("--log", action="append", default=None, help="log name (repeatable)")
    s.add_argument("--leaves", type=int, default=16)
    s.add_argument("--scheme", default="ed25519", choices=["ed25519", "hmac-sha256"])
    s.add_argument("--key-seed", default="ctgossip")
    s.add_argument("--fork", action="append", default=[], metavar="CIDR=CLASS",
                   help="serve a split view to sources in CIDR")
    s.add_argument("--export-keys", metavar="PATH")
    s.add_argument("--max-queries", type=int)
    s.set_defaults(func=cmd_logserve)

    s = sub.add_parser("aggregate", help="run a pcap through the aggregation pipeline")
    s.add_argument("--pcap", required=True)
    s.add_argument("--out", required=True, help="forwarded packets (pcap)")
    s.add_argument("--clones", required=True, help="cloned packets (pcap)")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--known-log", action="append")
    s.add_argument("--sampling-n", type=int)
    s.add_argument("--threshold", type=int)
    s.add_argument("--stats", help="write stats JSON here instead of stdout")
    s.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("challenge", help="ingest clones, audit, and report")
    s.add_argument("--clones", required=True)
    s.add_argument("--keys", required=True, help="JSON {log: {scheme, public_key}}")
    s.add_argument("--journal")
    s.add_argument("--resume-journal")
    s.add_argument("--log-state", action="append", default=[], metavar="LOG=PATH",
                   help="exported log used as the off-path channel")
    s.add_argument("--log-key-seed", default="ctgossip", help="key seed the exported logs were signed with")
    s.add_argument("--identity", default="anonymous")
    s.add_argument("--now", type=int, help="audit time in ms")
    s.add_argument("--audit-delay-ms", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_challenge)

    s = sub.add_parser("verify-report", help="independently re-verify a challenger report")
    s.add_argument("--report", required=True)
    s.add_argument("--keys", required=True)
    s.set_defaults(func=cmd_verify_report)

    s = sub.add_parser("simulate", help="run a split-view scenario")
    s.add_argument("--scenario", required=True, help="scenario JSON or bundled name (fork, honest, isolated)")
    s.add_argument("--seed", type=int)
    s.add_argument("--rounds", type=int)
    s.add_argument("--trials", type=int, help="estimate detection probability over this many seeds")
    s.add_argument("--report", help="write the SimReport JSON here")
    s.add_argument("--evidence", help="write a re-verifiable evidence report here")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("coverage", help="path and coverage analysis of traceroutes")
    s.add_argument("--traceroutes", required=True)
    s.add_argument("--rib", required=True, help="prefix,asn CSV")
    s.add_argument("--ixp", help="prefix,ixp_id,name CSV")
    s.add_argument("--ranking", help="external AS ranking CSV")
    s.add_argument("--probe-asns", help="JSON {probe_id: asn} for RIPE Atlas input")
    s.add_argument("--k-max", type=int, default=32)
    s.add_argument("--out", help="output directory (CSV + summary.json)")
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("fixtures", help="write golden pcaps, keys and a log export")
    s.add_argument("--out", required=True)
    s.add_argument("--matches", type=int, default=100)
    s.add_argument("--leaves", type=int, default=5)
    s.add_argument("--scheme", default="ed25519", choices=["ed25519", "hmac-sha256"])
    s.add_argument("--key-seed", default="ctgossip")
    s.set_defaults(func=cmd_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "logserve" and not args.log:
        args.log = ["pilot"]
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ctgossip {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, PcapError, TopologyError, LogError, codec.MessageSizeError) as exc:
        print(f"ctgossip {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
