"""Benchmark harness: chain length, rule count, fan-out, capacity.

Workloads are generated from a fixed seed and protocol (sample counts,
warm-up, batch sizes) pinned in :data:`DEFAULT_BENCH` so reports are
comparable run to run; latencies vary with the host but delivered sets
and decision outcomes do not.  Reports carry raw samples; percentiles are
computed from those samples, never fitted.

Absolute numbers published for the original system (milliseconds across
hundreds of domains, microseconds per thousand rules) are hardware-bound;
what these benchmarks check is shape: linear growth for chain length and
rule count, fan-out monotone in domain count and not hurt by a wider
delivery pool, capacity error-free across the client sweep.  The fan-out
harness can inject per-destination latency; the ``geo`` preset uses the
measured inter-datacenter ping averages (0/550/737/526/445 ms).

CSV output: ``parameter, sample_idx, value_ns``.
"""

from __future__ import annotations

import gc
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .fipm import EvalMode, check_access
from .instance import AsnInstance, InstanceConfig
from .federation import InProcessTransport
from .model import Mesh, Message
from .policy import ALLOW, DENY, PolicySet, Predicate, Rule
from .privileges import GRANT, PrivilegeSet

GEO_PING_MS = {"asia_sg": 0, "eu_west": 550, "s_america": 737,
               "us_east": 526, "us_west": 445}


@dataclass(frozen=True)
class BenchConfig:
    """The checked-in workload protocol."""

    seed: int = 20121215
    warmup: int = 5
    content: str = "x" * 256
    # chain sweep
    chain_lengths: tuple[int, ...] = tuple(range(5, 51, 5))
    chain_rules_per_circle: int = 10
    chain_preds_per_rule: int = 10
    chain_reps: int = 60
    chain_batch: int = 1
    # rules sweep
    rule_counts: tuple[int, ...] = tuple(range(100, 1001, 100))
    rules_reps: int = 60
    rules_batch: int = 1
    # fan-out sweep
    fanout_asns: tuple[int, ...] = (10, 20, 30, 40, 50)
    fanout_widths: tuple[int, ...] = (1, 4)
    fanout_reps: int = 3
    fanout_latency: float = 0.01
    # capacity sweep
    capacity_clients: tuple[int, ...] = (50, 100, 150, 200, 250, 300)
    capacity_duration: float = 0.4


DEFAULT_BENCH = BenchConfig()


@dataclass
class BenchPoint:
    parameter: float
    samples_ns: list[float]
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples_ns))

    @property
    def median(self) -> float:
        return float(np.median(self.samples_ns))

    @property
    def best(self) -> float:
        return float(np.min(self.samples_ns))

    @property
    def p10(self) -> float:
        return float(np.percentile(self.samples_ns, 10))

    @property
    def p90(self) -> float:
        return float(np.percentile(self.samples_ns, 90))


@dataclass
class BenchReport:
    experiment: str
    points: list[BenchPoint]
    meta: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        lines = ["parameter,sample_idx,value_ns"]
        for point in self.points:
            for idx, value in enumerate(point.samples_ns):
                lines.append(f"{point.parameter:g},{idx},{value:.0f}")
        Path(path).write_text("\n".join(lines) + "\n")

    def linear_fit(self) -> tuple[float, float, float]:
        """(slope, intercept, r squared) of per-point best time vs parameter.

        The minimum sample estimates the unpreempted cost, which is what
        the shape claim is about; raw samples, means and percentiles stay
        available in the report and CSV."""
        xs = np.array([p.parameter for p in self.points], dtype=float)
        ys = np.array([p.best for p in self.points], dtype=float)
        slope, intercept = np.polyfit(xs, ys, 1)
        predicted = slope * xs + intercept
        ss_res = float(np.sum((ys - predicted) ** 2))
        ss_tot = float(np.sum((ys - np.mean(ys)) ** 2))
        r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
        return float(slope), float(intercept), r2

    def summary(self) -> str:
        lines = [f"experiment: {self.experiment}"]
        for key, value in sorted(self.meta.items()):
            lines.append(f"  {key}: {value}")
        lines.append(f"  {'param':>10} {'mean':>14} {'p10':>14} {'p90':>14}")
        for point in self.points:
            lines.append(f"  {point.parameter:>10g} {point.mean:>14.0f}"
                         f" {point.p10:>14.0f} {point.p90:>14.0f}"
                         + (f"  {point.extra}" if point.extra else ""))
        if len(self.points) >= 3:
            slope, intercept, r2 = self.linear_fit()
            lines.append(f"  linear fit: slope={slope:.1f} ns/unit"
                         f" intercept={intercept:.0f} ns r2={r2:.4f}")
        return "\n".join(lines)


# --- chain-length benchmark --------------------------------------------------------

def _satisfied_rule(reader_asn: str, n_preds: int) -> Rule:
    return Rule(ALLOW, tuple(Predicate("reader-in-asn", reader_asn)
                             for _ in range(n_preds)))


def _noise_rule(rng: random.Random, users: list[str], n_preds: int) -> Rule:
    # never fully satisfied: one predicate names a user that does not exist
    preds = [Predicate("reader-is", "bench/nobody")]
    for _ in range(n_preds - 1):
        kind = rng.choice(["reader-is", "author-is", "reader-in-asn"])
        arg = rng.choice(users) if kind != "reader-in-asn" else "bench"
        preds.append(Predicate(kind, arg))
    rng.shuffle(preds)
    return Rule(rng.choice([ALLOW, DENY]), tuple(preds))


def build_chain_mesh(max_len: int, config: BenchConfig) -> tuple[Mesh, str, dict[int, Message]]:
    """A linear chain of circles; reader is a member of the root only, so a
    message tagged at depth L forces an L-circle ascent; every policy on
    the way holds for the reader."""
    rng = random.Random(config.seed)
    mesh = Mesh()
    mesh.register_asn("bench", "bench/admin")
    mesh.add_user("bench/reader")
    mesh.add_user("bench/author")
    users = ["bench/admin", "bench/reader", "bench/author"]

    previous = None
    for depth in range(1, max_len + 1):
        cid = f"bench/c{depth}"
        mesh.create_subdomain("bench", f"c{depth}", previous, "bench/admin", cid=cid)
        rules = [_satisfied_rule("bench", config.chain_preds_per_rule)]
        rules += [_noise_rule(rng, users, config.chain_preds_per_rule)
                  for _ in range(config.chain_rules_per_circle - 1)]
        rng.shuffle(rules)
        mesh.set_policies(cid, PolicySet(tuple(rules)))
        previous = cid
    mesh.add_member("bench/c1", "bench/reader")

    messages = {
        depth: Message(id=f"bench/m{depth}", author="bench/author",
                       content=config.content, tags=frozenset({f"bench/c{depth}"}))
        for depth in range(1, max_len + 1)
    }
    return mesh, "bench/reader", messages


def _timed_sweep(targets: dict[float, Callable[[], object]], reps: int,
                 warmup: int, batch: int) -> list[BenchPoint]:
    """Round-robin sampling: every rep visits every parameter once, so
    host-load drift spreads across points instead of skewing one of them.
    GC stays off while the clock runs."""
    for fn in targets.values():
        for _ in range(warmup):
            fn()
    samples: dict[float, list[float]] = {p: [] for p in targets}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(reps):
            for parameter, fn in targets.items():
                t0 = time.perf_counter_ns()
                for _ in range(batch):
                    fn()
                samples[parameter].append((time.perf_counter_ns() - t0) / batch)
    finally:
        if gc_was_enabled:
            gc.enable()
    return [BenchPoint(p, samples[p]) for p in sorted(samples)]


def run_chain_bench(max_len: int = 50, reps: Optional[int] = None,
                    config: BenchConfig = DEFAULT_BENCH) -> BenchReport:
    reps = reps if reps is not None else config.chain_reps
    lengths = [l for l in config.chain_lengths if l <= max_len] or [max_len]
    mesh, reader, messages = build_chain_mesh(max(lengths), config)

    decision = check_access(mesh, messages[max(lengths)], reader,
                            EvalMode.POLICY_CHAIN)
    assert decision.allowed and len(decision.chain) == max(lengths)

    def probe(message):
        return lambda: check_access(mesh, message, reader, EvalMode.POLICY_CHAIN)

    points = _timed_sweep({length: probe(messages[length]) for length in lengths},
                          reps, config.warmup, config.chain_batch)
    return BenchReport("chain", points,
                       meta={"reps": reps, "batch": config.chain_batch,
                             "rules_per_circle": config.chain_rules_per_circle,
                             "mode": "policy-chain"})


# --- rule-count benchmark -------------------------------------------------------------

def build_rules_mesh(n_rules: int, config: BenchConfig) -> tuple[Mesh, str, Message]:
    """One parentless circle loaded with rules none of which fully holds;
    the reader is not a member, so evaluation scans the whole set."""
    rng = random.Random(config.seed + n_rules)
    mesh = Mesh()
    mesh.register_asn("bench", "bench/admin")
    mesh.add_user("bench/reader")
    mesh.add_user("bench/author")
    mesh.create_subdomain("bench", "target", None, "bench/admin", cid="bench/target")
    rules = []
    for _ in range(n_rules):
        # predicates drawn half-satisfied; the terminal one never holds
        first = rng.choice([
            Predicate("reader-in-asn", "bench"),       # holds
            Predicate("reader-is", "bench/someone"),   # does not
        ])
        rules.append(Rule(rng.choice([ALLOW, DENY]),
                          (first, Predicate("reader-is", "bench/nobody"))))
    mesh.set_policies("bench/target", PolicySet(tuple(rules)))
    message = Message(id="bench/m0", author="bench/author",
                      content=config.content, tags=frozenset({"bench/target"}))
    return mesh, "bench/reader", message


def run_rules_bench(max_rules: int = 1000, reps: Optional[int] = None,
                    config: BenchConfig = DEFAULT_BENCH) -> BenchReport:
    reps = reps if reps is not None else config.rules_reps
    counts = [c for c in config.rule_counts if c <= max_rules] or [max_rules]
    targets = {}
    for count in counts:
        mesh, reader, message = build_rules_mesh(count, config)
        decision = check_access(mesh, message, reader, EvalMode.POLICY_CHAIN)
        assert not decision.allowed
        targets[count] = (lambda m=mesh, msg=message, r=reader:
                          check_access(m, msg, r, EvalMode.POLICY_CHAIN))
    points = _timed_sweep(targets, reps, config.warmup, config.rules_batch)
    return BenchReport("rules", points,
                       meta={"reps": reps, "batch": config.rules_batch})


# --- fan-out benchmark ------------------------------------------------------------------

def _build_fanout_cluster(n_asns: int, pool_width: int, data_root: Path,
                          latency: Optional[dict[str, float]],
                          config: BenchConfig):
    """Hub ASN with one follower in each of n_asns-1 spokes; follower and
    membership state is installed directly on both sides so the measured
    operation is the posting pipeline alone."""
    def delay(endpoint: str) -> float:
        if latency is None:
            return config.fanout_latency
        return latency.get(endpoint, 0.0)

    transport = InProcessTransport(latency=delay)
    names = ["hub"] + [f"spoke{i}" for i in range(1, n_asns)]
    instances: dict[str, AsnInstance] = {}
    for name in names:
        cfg = InstanceConfig(asn_id=name, data_dir=str(data_root / name),
                             endpoint=f"mem://{name}", pool_width=pool_width,
                             sync=False, retry_max_attempts=2,
                             retry_base_delay=0.01)
        instance = AsnInstance(cfg, transport=transport)
        transport.register(cfg.endpoint, instance)
        instances[name] = instance

    hub = instances["hub"]
    author = "hub/author"
    hub.mesh.add_user(author)
    hub.persist_user(author)
    group = hub.mesh.create_public_group(author, None, cid="hub/audience")
    followers = []
    for name in names[1:]:
        follower = f"{name}/fan"
        spoke = instances[name]
        spoke.mesh.add_user(follower)
        spoke.persist_user(follower)
        spoke.mesh.upsert_remote_user(author)
        spoke.mesh.add_follower(author, follower)
        spoke.persist_user(author)
        hub.mesh.add_follower(author, follower)
        hub.mesh.add_member("hub/audience", follower)
        followers.append(follower)
    hub.persist_user(author)
    hub.persist_circle("hub/audience", push=False)
    role = hub.mesh.create_role("hub", "poster",
                                PrivilegeSet.from_pairs([("post-message", GRANT)]))
    hub.mesh.assign_role(author, role.id)

    secret = "bench-secret"
    for name in names[1:]:
        hub.pair(hub.config.admin_id, name, f"mem://{name}", secret)
        instances[name].pair(instances[name].config.admin_id, "hub",
                             "mem://hub", secret)
    return instances, author, followers


def run_fanout_bench(n_asns: int, pool_width: int, reps: Optional[int],
                     data_root: Path, config: BenchConfig = DEFAULT_BENCH,
                     latency: Optional[dict[str, float]] = None) -> BenchPoint:
    """One sweep point: wall time from post acceptance until every remote
    destination confirmed its inbox appends."""
    reps = reps if reps is not None else config.fanout_reps
    instances, author, followers = _build_fanout_cluster(
        n_asns, pool_width, data_root, latency, config)
    hub = instances["hub"]
    try:
        samples = []
        delivered: set[str] = set()
        for rep in range(reps):
            t0 = time.perf_counter_ns()
            mid, report = hub.post_message(author, config.content,
                                           tags=["hub/audience"])
            outcomes = report.wait()
            samples.append(float(time.perf_counter_ns() - t0))
            assert all(o.status == "delivered" for o in outcomes.values()), outcomes
            delivered = {
                user
                for instance in instances.values()
                for user in instance.store.inbox_users()
                if mid in {e.message_id for e in instance.store.inbox(user)}
            }
        return BenchPoint(n_asns, samples,
                          extra={"pool_width": pool_width,
                                 "delivered": sorted(delivered)})
    finally:
        for instance in instances.values():
            instance.close()


def run_fanout_sweep(data_root: Path, config: BenchConfig = DEFAULT_BENCH,
                     widths: Optional[Sequence[int]] = None,
                     asn_counts: Optional[Sequence[int]] = None
                     ) -> dict[int, BenchReport]:
    reports: dict[int, BenchReport] = {}
    for width in (widths or config.fanout_widths):
        points = []
        for n in (asn_counts or config.fanout_asns):
            point = run_fanout_bench(n, width, None,
                                     data_root / f"w{width}n{n}", config)
            points.append(point)
        reports[width] = BenchReport(
            "fanout", points,
            meta={"pool_width": width, "reps": config.fanout_reps,
                  "injected_latency_s": config.fanout_latency})
    return reports


def run_geo_bench(data_root: Path, config: BenchConfig = DEFAULT_BENCH,
                  widths: Sequence[int] = (1, 2, 3, 4)) -> BenchReport:
    """Five instances with the measured inter-datacenter ping averages
    injected; sweeps the delivery pool width."""
    latency = {f"mem://{name}": ms / 1000.0 for name, ms in GEO_PING_MS.items()}
    points = []
    for width in widths:
        instances, author, _ = _build_geo_cluster(width, data_root / f"geo{width}",
                                                  latency, config)
        hub = instances["asia_sg"]
        try:
            samples = []
            for _ in range(config.fanout_reps):
                t0 = time.perf_counter_ns()
                _, report = hub.post_message(author, config.content,
                                             tags=["asia_sg/audience"])
                outcomes = report.wait()
                samples.append(float(time.perf_counter_ns() - t0))
                assert all(o.status == "delivered" for o in outcomes.values())
            points.append(BenchPoint(width, samples))
        finally:
            for instance in instances.values():
                instance.close()
    return BenchReport("geo", points,
                       meta={"ping_ms": GEO_PING_MS, "reps": config.fanout_reps})


def _build_geo_cluster(pool_width: int, data_root: Path,
                       latency: dict[str, float], config: BenchConfig):
    def delay(endpoint: str) -> float:
        return latency.get(endpoint, 0.0)

    transport = InProcessTransport(latency=delay)
    names = list(GEO_PING_MS)
    instances: dict[str, AsnInstance] = {}
    for name in names:
        cfg = InstanceConfig(asn_id=name, data_dir=str(data_root / name),
                             endpoint=f"mem://{name}", pool_width=pool_width,
                             sync=False, retry_max_attempts=2,
                             retry_base_delay=0.01)
        instance = AsnInstance(cfg, transport=transport)
        transport.register(cfg.endpoint, instance)
        instances[name] = instance
    hub = instances["asia_sg"]
    author = "asia_sg/author"
    hub.mesh.add_user(author)
    hub.mesh.create_public_group(author, None, cid="asia_sg/audience")
    role = hub.mesh.create_role("asia_sg", "poster",
                                PrivilegeSet.from_pairs([("post-message", GRANT)]))
    hub.mesh.assign_role(author, role.id)
    for name in names[1:]:
        follower = f"{name}/fan"
        spoke = instances[name]
        spoke.mesh.add_user(follower)
        spoke.mesh.upsert_remote_user(author)
        spoke.mesh.add_follower(author, follower)
        hub.mesh.add_follower(author, follower)
        hub.mesh.add_member("asia_sg/audience", follower)
        hub.pair(hub.config.admin_id, name, f"mem://{name}", "geo")
        spoke.pair(spoke.config.admin_id, "asia_sg", "mem://asia_sg", "geo")
    return instances, author, None


# --- capacity benchmark ---------------------------------------------------------------------

def _build_capacity_instance(n_clients: int, data_root: Path,
                             config: BenchConfig) -> tuple[AsnInstance, list[str]]:
    cfg = InstanceConfig(asn_id="cap", data_dir=str(data_root), sync=False)
    instance = AsnInstance(cfg)
    role = instance.mesh.create_role(
        "cap", "poster", PrivilegeSet.from_pairs([("post-message", GRANT)]))
    group = instance.mesh.create_public_group("cap/admin", None, cid="cap/all")
    authors = []
    for i in range(n_clients):
        author = f"cap/client{i}"
        follower = f"cap/fan{i}"
        instance.mesh.add_user(author)
        instance.mesh.add_user(follower)
        instance.mesh.assign_role(author, role.id)
        instance.mesh.add_follower(author, follower)
        instance.mesh.add_member("cap/all", author)
        instance.mesh.add_member("cap/all", follower)
        authors.append(author)
    return instance, authors


def run_capacity_bench(clients: int, duration: float, data_root: Path,
                       config: BenchConfig = DEFAULT_BENCH) -> BenchPoint:
    """Synthetic concurrent posters against one instance; returns per-client
    mean post latency samples plus throughput and the server-side error
    count in ``extra``."""
    instance, authors = _build_capacity_instance(clients, data_root, config)
    try:
        errors: list[Exception] = []
        counts = [0] * clients
        latency_ns = [0.0] * clients
        start_gate = threading.Event()
        deadline = [0.0]

        def client(idx: int) -> None:
            author = authors[idx]
            start_gate.wait()
            while time.monotonic() < deadline[0]:
                t0 = time.perf_counter_ns()
                try:
                    _, report = instance.post_message(author, config.content,
                                                      tags=["cap/all"])
                except Exception as exc:  # server-side failure: the bench must see zero
                    errors.append(exc)
                    return
                latency_ns[idx] += time.perf_counter_ns() - t0
                counts[idx] += 1

        threads = [threading.Thread(target=client, args=(i,)) for i in range(clients)]
        for thread in threads:
            thread.start()
        deadline[0] = time.monotonic() + duration
        start_gate.set()
        for thread in threads:
            thread.join()

        total_ops = sum(counts)
        samples = [latency_ns[i] / counts[i] for i in range(clients) if counts[i]]
        return BenchPoint(clients, samples or [0.0], extra={
            "ops_per_sec": round(total_ops / duration, 1),
            "total_ops": total_ops,
            "errors": len(errors),
        })
    finally:
        instance.close()


def run_capacity_sweep(data_root: Path,
                       config: BenchConfig = DEFAULT_BENCH,
                       client_counts: Optional[Sequence[int]] = None,
                       duration: Optional[float] = None) -> BenchReport:
    points = []
    for clients in (client_counts or config.capacity_clients):
        points.append(run_capacity_bench(
            clients, duration or config.capacity_duration,
            data_root / f"c{clients}", config))
    return BenchReport("capacity", points,
                       meta={"duration_s": duration or config.capacity_duration})
