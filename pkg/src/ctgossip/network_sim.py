"""Seeded round-based simulation of clients, aggregators, forking logs and challengers.

One round is one STH issuance slot. Each round every log branch grows and
issues a head, every client fetches its log's head as a real DNS/UDP frame
that walks the client's path (aggregators on the path clone it), and every
``audit_period`` rounds each challenger fetches off-path and audits.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

from . import ct_dns_codec as codec
from .aggregation_pipeline import Aggregator, PipelineConfig
from .challenger import Challenger, InProcessOffPath, report
from .merkle_log import HOUR_MS, Ed25519Signer, ForkPolicy, HmacSigner, MerkleLog

MAIN = "main"
VICTIM = "victim"
MODES = ("honest", "fork_static", "fork_adaptive_guess")
LOG_SERVER_IP = "192.0.2.53"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class LogSpec:
    name: str
    initial_leaves: int = 8
    leaves_per_round: int = 2


@dataclass(frozen=True)
class ClientSpec:
    id: str
    klass: str  # what the log can observe about this client
    log: str
    path: tuple = ()


@dataclass(frozen=True)
class ChallengerSpec:
    id: str
    aggregators: tuple
    identity: str  # anonymous off-path identity


@dataclass
class Topology:
    logs: list
    clients: list
    aggregators: dict  # hop label -> PipelineConfig
    challengers: list
    anonymity_pool: tuple = ()
    audit_period: int = 1
    signature_scheme: str = "hmac-sha256"

    def validate(self) -> None:
        names = [lg.name for lg in self.logs]
        if not names or len(set(names)) != len(names):
            raise TopologyError("need at least one log and unique log names")
        hops = {h for c in self.clients for h in c.path}
        observable = {c.id for c in self.clients} | {c.klass for c in self.clients} | hops | set(self.aggregators)
        if len({c.id for c in self.clients}) != len(self.clients):
            raise TopologyError("duplicate client id")
        for c in self.clients:
            if c.log not in names:
                raise TopologyError(f"client {c.id} uses unknown log {c.log!r}")
        ids = [ch.identity for ch in self.challengers]
        if len({ch.id for ch in self.challengers}) != len(self.challengers):
            raise TopologyError("duplicate challenger id")
        for ch in self.challengers:
            if not ch.aggregators:
                raise TopologyError(f"challenger {ch.id} is bound to no aggregator")
            for a in ch.aggregators:
                if a not in self.aggregators:
                    raise TopologyError(f"challenger {ch.id} bound to unknown aggregator {a!r}")
            if self.anonymity_pool and ch.identity not in self.anonymity_pool:
                raise TopologyError(f"identity {ch.identity!r} is not in the anonymity pool")
        if len(set(ids)) != len(ids):
            raise TopologyError("off-path identities must be distinct")
        clash = (set(ids) | set(self.anonymity_pool)) & observable
        if clash:
            raise TopologyError(f"off-path identities overlap client/aggregator identities: {sorted(clash)}")
        if self.audit_period < 1:
            raise TopologyError("audit_period must be >= 1")
        if self.signature_scheme not in ("hmac-sha256", "ed25519"):
            raise TopologyError(f"unknown signature scheme {self.signature_scheme!r}")

    def covered(self, client: ClientSpec) -> bool:
        return any(h in self.aggregators for h in client.path)

    def to_json(self) -> dict:
        return {
            "logs": [asdict(lg) for lg in self.logs],
            "clients": [{"id": c.id, "class": c.klass, "log": c.log, "path": list(c.path)} for c in self.clients],
            "aggregators": {k: v.to_dict() for k, v in sorted(self.aggregators.items())},
            "challengers": [{"id": c.id, "aggregators": list(c.aggregators), "identity": c.identity}
                            for c in self.challengers],
            "anonymity_pool": list(self.anonymity_pool),
            "audit_period": self.audit_period,
            "signature_scheme": self.signature_scheme,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Topology":
        try:
            logs = [LogSpec(**lg) for lg in obj["logs"]]
            log_names = [lg.name for lg in logs]
            aggs = {}
            for hop, cfg in obj.get("aggregators", {}).items():
                cfg = dict(cfg)
                cfg.setdefault("known_logs", log_names)
                aggs[hop] = PipelineConfig.from_dict(cfg)
            topo = cls(
                logs=logs,
                clients=[ClientSpec(c["id"], c.get("class", c["id"]), c["log"], tuple(c.get("path", ())))
                         for c in obj["clients"]],
                aggregators=aggs,
                challengers=[ChallengerSpec(c["id"], tuple(c["aggregators"]), c["identity"])
                             for c in obj.get("challengers", [])],
                anonymity_pool=tuple(obj.get("anonymity_pool", ())),
                audit_period=obj.get("audit_period", 1),
                signature_scheme=obj.get("signature_scheme", "hmac-sha256"),
            )
        except (KeyError, TypeError) as exc:
            raise TopologyError(f"malformed topology: {exc}") from None
        topo.validate()
        return topo


@dataclass(frozen=True)
class AttackerStrategy:
    """How a forking log splits its observers.

    ``victims`` are client classes served the victim branch. ``branch_map``
    (fork_static) pins further observable identities to a branch. For
    fork_adaptive_guess the log serves the victim branch to ``guess_size``
    off-path identities picked uniformly at random, since it cannot see which
    identity is linked to the aggregator covering the victim.
    """

    mode: str = "honest"
    victims: tuple = ()
    branch_map: dict = field(default_factory=dict)
    guess_size: int = 1
    log: Optional[str] = None  # attacked log; defaults to the first one

    def __post_init__(self):
        object.__setattr__(self, "victims", tuple(self.victims))
        if self.mode not in MODES:
            raise ValueError(f"unknown attacker mode {self.mode!r}")
        if self.mode == "honest" and (self.victims or self.branch_map):
            raise ValueError("honest strategy takes no victims")
        if any(b not in (MAIN, VICTIM) for b in self.branch_map.values()):
            raise ValueError("branch_map values must be 'main' or 'victim'")
        if self.guess_size < 0:
            raise ValueError("guess_size must be >= 0")

    def fork_policy(self, topology: Topology, rng: random.Random) -> ForkPolicy:
        if self.mode == "honest":
            return ForkPolicy()
        assignment = {v: VICTIM for v in self.victims}
        if self.mode == "fork_static":
            assignment.update(self.branch_map)
        else:
            identities = sorted(ch.identity for ch in topology.challengers)
            k = min(self.guess_size, len(identities))
            assignment.update({i: VICTIM for i in rng.sample(identities, k)})
        return ForkPolicy("fork_by_client_class", assignment)

    def to_json(self) -> dict:
        return {"mode": self.mode, "victims": list(self.victims), "branch_map": dict(sorted(self.branch_map.items())),
                "guess_size": self.guess_size, "log": self.log}

    @classmethod
    def from_json(cls, obj: dict) -> "AttackerStrategy":
        return cls(obj.get("mode", "honest"), tuple(obj.get("victims", ())), dict(obj.get("branch_map", {})),
                   obj.get("guess_size", 1), obj.get("log"))


@dataclass
class SimReport:
    rounds: int
    seed: int
    strategy: AttackerStrategy
    evidence: dict  # challenger id -> list of Evidence
    detected: bool
    detection_round: Optional[int]
    coverage: dict  # client id -> bool
    stored: dict  # challenger id -> number of distinct STHs held
    fork_policy: dict
    keys: dict = field(default_factory=dict, repr=False)

    @property
    def evidence_count(self) -> int:
        return sum(len(v) for v in self.evidence.values())

    def to_json(self) -> dict:
        return {
            "rounds": self.rounds,
            "seed": self.seed,
            "strategy": self.strategy.to_json(),
            "fork_policy": self.fork_policy,
            "detected": self.detected,
            "detection_round": self.detection_round,
            "evidence_count": self.evidence_count,
            "evidence": {cid: [e.to_json() for e in evs] for cid, evs in sorted(self.evidence.items())},
            "coverage": dict(sorted(self.coverage.items())),
            "stored": dict(sorted(self.stored.items())),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def evidence_report(self) -> str:
        """Every finding in the re-verifiable challenger report format."""
        allev = [e for _, evs in sorted(self.evidence.items()) for e in evs]
        return report(allev, keys=self.keys, audit={"rounds": self.rounds, "seed": self.seed})


def _signer(scheme: str, name: str):
    seed = b"ctgossip-sim|" + name.encode()
    return Ed25519Signer.from_seed(seed) if scheme == "ed25519" else HmacSigner(seed)


def _client_ip(i: int) -> str:
    return f"10.{(i >> 16) & 0xFF}.{(i >> 8) & 0xFF}.{(i & 0xFF) + 1}"


def run_scenario(topology: Topology, strategy: AttackerStrategy, rounds: int, seed: int) -> SimReport:
    topology.validate()
    if rounds < 1:
        raise TopologyError("rounds must be >= 1")
    target = strategy.log or topology.logs[0].name
    if target not in {lg.name for lg in topology.logs}:
        raise TopologyError(f"strategy targets unknown log {target!r}")
    rng = random.Random(seed)

    logs, policies = {}, {}
    for spec in topology.logs:
        lg = MerkleLog(spec.name, _signer(topology.signature_scheme, spec.name))
        lg.extend(MAIN, (b"%s|init|%d" % (spec.name.encode(), i) for i in range(spec.initial_leaves)))
        policy = ForkPolicy()
        if spec.name == target and strategy.mode != "honest":
            lg.fork(VICTIM)
            policy = strategy.fork_policy(topology, rng)
        logs[spec.name], policies[spec.name] = lg, policy

    keys = {name: lg.signer for name, lg in logs.items()}
    aggs = {hop: Aggregator(cfg, ingress=hop) for hop, cfg in sorted(topology.aggregators.items())}
    challengers = {c.id: Challenger(keys, sth_frequency=24) for c in topology.challengers}
    bound = {c.id: c for c in topology.challengers}
    evidence = {c.id: [] for c in topology.challengers}
    seen = {c.id: set() for c in topology.challengers}
    detection_round = None
    ip_id = 0

    for r in range(1, rounds + 1):
        now = r * HOUR_MS
        for spec in topology.logs:
            lg = logs[spec.name]
            for branch in lg.branches:
                lg.extend(branch, (b"%s|%s|%d|%d" % (spec.name.encode(), branch.encode(), r, i)
                                   for i in range(spec.leaves_per_round)))
                lg.issue_sth(branch, now)

        for i, client in enumerate(topology.clients):
            sth = logs[client.log].serve_sth(policies[client.log], client.klass, now)
            ip_id = (ip_id + 1) & 0xFFFF
            frame = codec.build_sth_frame(sth, client.log, txid=ip_id, src_ip=LOG_SERVER_IP,
                                          dst_ip=_client_ip(i), ip_id=ip_id)
            for hop in client.path:
                if hop in aggs:
                    frame, _ = aggs[hop].process(frame, now)

        for hop, agg in aggs.items():
            clones = []
            while not agg.channel.empty():
                clones.append(agg.channel.get_nowait())
            for cid, spec in bound.items():
                if hop in spec.aggregators:
                    for clone in clones:
                        challengers[cid].ingest_clone(clone.frame, now)

        if r % topology.audit_period == 0:
            for cid, ch in challengers.items():
                identity = bound[cid].identity
                for name, lg in logs.items():
                    chan = InProcessOffPath(lg, policies[name], identity, now)
                    ch.fetch_off_path(chan, name, now)
                    for ev in ch.audit(chan, name, now):
                        key = (ev.kind, ev.sth_a.tree_size, ev.sth_a.root_hash, ev.sth_b.tree_size, ev.sth_b.root_hash)
                        if key not in seen[cid]:
                            seen[cid].add(key)
                            evidence[cid].append(ev)
            if detection_round is None and any(evidence.values()):
                detection_round = r

    return SimReport(
        rounds=rounds,
        seed=seed,
        strategy=strategy,
        evidence=evidence,
        detected=any(evidence.values()),
        detection_round=detection_round,
        coverage={c.id: topology.covered(c) for c in topology.clients},
        stored={cid: len(ch.store) for cid, ch in challengers.items()},
        fork_policy={name: p.to_json() for name, p in sorted(policies.items())},
        keys=keys,
    )


def detection_probability(topology: Topology, strategy: AttackerStrategy, trials: int, seed: int,
                          rounds: int = 1) -> tuple:
    """Monte-Carlo P(detected) -> (estimate, standard error)."""
    if trials < 100:
        raise ValueError("need at least 100 trials")
    master = random.Random(seed)
    hits = sum(run_scenario(topology, strategy, rounds, master.getrandbits(63)).detected for _ in range(trials))
    p = hits / trials
    return p, math.sqrt(p * (1 - p) / trials)


def symmetric_topology(k: int, covering: int = 1, log_name: str = "pilot") -> Topology:
    """k challengers, each with its own aggregator and off-path identity.

    The victim client's path crosses the first ``covering`` aggregators; every
    other aggregator carries one bystander client on the main branch.
    """
    if not 1 <= covering <= k:
        raise ValueError("need 1 <= covering <= k")
    cfg = PipelineConfig(known_logs={log_name})
    hops = [f"agg{i}" for i in range(k)]
    clients = [ClientSpec("victim", "victim-net", log_name, ("isp-v", *hops[:covering]))]
    clients += [ClientSpec(f"bystander{i}", f"net{i}", log_name, (f"isp{i}", hops[i])) for i in range(covering, k)]
    return Topology(
        logs=[LogSpec(log_name)],
        clients=clients,
        aggregators={h: cfg for h in hops},
        challengers=[ChallengerSpec(f"ch{i}", (hops[i],), f"anon{i}") for i in range(k)],
        anonymity_pool=tuple(f"anon{i}" for i in range(k)),
    )


@dataclass
class Scenario:
    topology: Topology
    strategy: AttackerStrategy
    rounds: int = 2
    seed: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> "Scenario":
        try:
            strategy = AttackerStrategy.from_json(obj.get("strategy", {}))
        except ValueError as exc:
            raise TopologyError(str(exc)) from None
        return cls(Topology.from_json(obj["topology"]), strategy, obj.get("rounds", 2), obj.get("seed", 0))

    def run(self, seed: Optional[int] = None) -> SimReport:
        return run_scenario(self.topology, self.strategy, self.rounds, self.seed if seed is None else seed)


def load_scenario(path: Union[str, Path]) -> Scenario:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TopologyError(f"{path}: not JSON ({exc})") from None
    if not isinstance(obj, dict) or "topology" not in obj:
        raise TopologyError(f"{path}: missing 'topology'")
    return Scenario.from_json(obj)


BUNDLED = Path(__file__).parent / "data" / "scenarios"


def bundled_scenario(name: str) -> Scenario:
    return load_scenario(BUNDLED / f"{name}.json")

