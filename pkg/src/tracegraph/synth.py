"""Synthetic call-graph workloads with labelled faults.

Topologies are layered DAGs rooted at one entry service. Each trace walks
the DAG from the entry, taking each outgoing edge with its routing
probability; span durations are log-normal around the edge's base latency.
Faults (latency spikes, error bursts, cascades) and elastic-scaling
disturbances are applied to an existing span list after generation.
"""

from __future__ import annotations

import csv
import dataclasses
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import _io
from .errors import ConfigError, TraceGraphError
from .spans import SpanRecord, group_by_trace

LOG_SIGMA = 0.25
CASCADE_DECAY = 0.5

_ROLES = (
    "nginx-web-server",
    "compose-post-service",
    "home-timeline-service",
    "user-timeline-service",
    "social-graph-service",
    "post-storage-service",
    "user-service",
    "text-service",
    "media-service",
    "url-shorten-service",
    "user-mention-service",
    "unique-id-service",
    "write-home-timeline-service",
    "media-frontend",
    "post-storage-memcached",
    "post-storage-mongodb",
    "user-timeline-redis",
    "user-timeline-mongodb",
    "social-graph-redis",
    "social-graph-mongodb",
    "home-timeline-redis",
    "user-memcached",
    "user-mongodb",
    "url-shorten-memcached",
    "url-shorten-mongodb",
    "media-memcached",
    "media-mongodb",
    "write-home-timeline-rabbitmq",
    "jaeger-agent",
    "compose-post-redis",
)


def service_names(n):
    if n <= len(_ROLES):
        return list(_ROLES[:n])
    return list(_ROLES) + [f"service-{k:03d}" for k in range(len(_ROLES), n)]


@dataclass(frozen=True)
class TopologySpec:
    n_services: int = 30
    edge_density: float = 0.1
    max_depth: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_services < 1:
            raise ConfigError(f"topology.n_services must be >= 1, got {self.n_services}")
        if not 0 < self.edge_density <= 1:
            raise ConfigError(f"topology.edge_density must be in (0, 1], got {self.edge_density}")
        if self.max_depth < 1:
            raise ConfigError(f"topology.max_depth must be >= 1, got {self.max_depth}")


@dataclass(frozen=True)
class Edge:
    parent: str
    child: str
    routing_prob: float
    base_latency_us: float
    error_prob: float


@dataclass(frozen=True)
class Topology:
    services: tuple
    entry: str
    entry_latency_us: float
    edges: tuple

    def children(self, service):
        return [e for e in self.edges if e.parent == service]

    def downstream_hops(self, service, max_hops):
        """``{service: hop}`` for services within ``max_hops`` calls of
        ``service`` (shortest hop count, ``service`` itself at 0)."""
        hops = {service: 0}
        queue = deque([service])
        while queue:
            s = queue.popleft()
            if hops[s] == max_hops:
                continue
            for e in self.children(s):
                if e.child not in hops:
                    hops[e.child] = hops[s] + 1
                    queue.append(e.child)
        return hops


def generate_topology(spec):
    rng = np.random.default_rng(spec.seed)
    names = service_names(spec.n_services)
    depth = [0]
    deepest = 0
    for _ in range(1, spec.n_services):
        d = int(rng.integers(1, min(spec.max_depth, deepest + 1) + 1))
        depth.append(d)
        deepest = max(deepest, d)
    base = np.exp(rng.uniform(np.log(2000.0), np.log(8000.0), size=spec.n_services))

    pairs = {}
    for k in range(1, spec.n_services):
        candidates = [p for p in range(k) if depth[p] == depth[k] - 1]
        parent = candidates[int(rng.integers(len(candidates)))]
        pairs[(parent, k)] = float(rng.uniform(0.3, 0.8))
    for a in range(spec.n_services):
        for b in range(spec.n_services):
            if depth[a] < depth[b] and (a, b) not in pairs and rng.random() < spec.edge_density:
                pairs[(a, b)] = float(rng.uniform(0.05, 0.3))

    edges = []
    for (a, b), prob in sorted(pairs.items()):
        edges.append(
            Edge(
                parent=names[a],
                child=names[b],
                routing_prob=prob,
                base_latency_us=float(base[b] * rng.uniform(0.8, 1.25)),
                error_prob=float(rng.uniform(0.001, 0.02)),
            )
        )
    return Topology(tuple(names), names[0], float(base[0]), tuple(edges))


def topology_to_dict(topo):
    return {
        "services": list(topo.services),
        "entry": topo.entry,
        "entry_latency_us": topo.entry_latency_us,
        "edges": [dataclasses.asdict(e) for e in topo.edges],
    }


def topology_from_dict(d):
    return Topology(
        tuple(d["services"]),
        d["entry"],
        float(d["entry_latency_us"]),
        tuple(Edge(**e) for e in d["edges"]),
    )


# ---------------------------------------------------------------------------
# traces


def _duration(rng, base):
    return max(1, int(round(base * np.exp(rng.normal(0.0, LOG_SIGMA)))))


def generate_traces(topology, rate, n_windows, seed, window_length=60_000_000):
    """Poisson(``rate``) traces per window, as a list of :class:`SpanRecord`.

    Spans of a trace come out in depth-first order; traces in window order.
    """
    if rate < 0:
        raise ConfigError(f"rate must be >= 0, got {rate}")
    rng = np.random.default_rng(seed)
    out_edges = {s: topology.children(s) for s in topology.services}
    spans = []
    for w in range(n_windows):
        n_traces = int(rng.poisson(rate)) if rate > 0 else 0
        starts = np.sort(rng.integers(w * window_length, (w + 1) * window_length, size=n_traces))
        for k in range(n_traces):
            trace_id = f"w{w:05d}t{k:05d}"
            counter = [0]

            def emit(service, parent_id, start, base, error_prob):
                counter[0] += 1
                sid = f"{counter[0]:x}"
                dur = _duration(rng, base)
                tags = {
                    "error": "true" if rng.random() < error_prob else "false",
                    "retry_count": "1" if rng.random() < 0.02 else "0",
                    "timeout": "true" if rng.random() < 0.002 else "false",
                }
                spans.append(
                    SpanRecord(trace_id, sid, parent_id, service, f"/{service}/handle",
                               int(start), dur, tags)
                )
                for e in out_edges[service]:
                    if rng.random() < e.routing_prob:
                        offset = int(rng.integers(0, max(1, dur // 2)))
                        emit(e.child, sid, start + offset, e.base_latency_us, e.error_prob)

            emit(topology.entry, None, starts[k], topology.entry_latency_us, 0.005)
    return spans


def _trace_windows(spans, window_length):
    return {
        s.trace_id: s.start_ts // window_length for s in spans if s.parent_span_id is None
    }


# ---------------------------------------------------------------------------
# anomalies


ANOMALY_KINDS = ("latency_spike", "error_burst", "cascade")


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    target: str
    magnitude: float
    affected_windows: frozenset
    cascade_depth: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ConfigError(f"anomaly.kind must be one of {ANOMALY_KINDS}, got {self.kind!r}")
        if self.kind == "error_burst":
            if not 0 <= self.magnitude <= 1:
                raise ConfigError(f"error_burst magnitude must be in [0, 1], got {self.magnitude}")
        elif self.magnitude < 1:
            raise ConfigError(f"latency multiplier must be >= 1, got {self.magnitude}")
        if self.cascade_depth < 0:
            raise ConfigError(f"cascade_depth must be >= 0, got {self.cascade_depth}")
        object.__setattr__(self, "affected_windows", frozenset(int(w) for w in self.affected_windows))


def _multipliers(topology, anomaly):
    if anomaly.kind == "cascade":
        hops = topology.downstream_hops(anomaly.target, anomaly.cascade_depth)
    else:
        hops = {anomaly.target: 0}
    return {s: 1.0 + (anomaly.magnitude - 1.0) * CASCADE_DECAY**h for s, h in hops.items()}


def inject_anomaly(spans, topology, anomaly, window_length=60_000_000):
    """Apply one fault. Returns ``(spans, labels)``.

    ``labels`` are ``(window_index, service, kind)`` triples for every
    affected window in which an affected service had at least one span.
    """
    if anomaly.target not in topology.services:
        raise TraceGraphError(f"unknown target service {anomaly.target!r}")
    windows = _trace_windows(spans, window_length)
    mults = _multipliers(topology, anomaly)
    rng = np.random.default_rng(anomaly.seed)
    labels = set()
    out = []
    for s in spans:
        w = windows.get(s.trace_id)
        if w in anomaly.affected_windows and s.service_name in mults:
            labels.add((w, s.service_name, anomaly.kind))
            if anomaly.kind == "error_burst":
                if rng.random() < anomaly.magnitude:
                    s = dataclasses.replace(s, tags={**s.tags, "error": "true"})
            else:
                s = dataclasses.replace(s, duration=int(round(s.duration * mults[s.service_name])))
        out.append(s)
    return out, sorted(labels)


# ---------------------------------------------------------------------------
# elastic scaling


@dataclass(frozen=True)
class ScalingSpec:
    frequency: float = 0.0
    jitter_magnitude: float = 3.0
    affected_duration_windows: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.frequency < 0:
            raise ConfigError(f"scaling.frequency must be >= 0, got {self.frequency}")
        if self.jitter_magnitude < 0:
            raise ConfigError(f"scaling.jitter_magnitude must be >= 0, got {self.jitter_magnitude}")
        if self.affected_duration_windows < 1:
            raise ConfigError("scaling.affected_duration_windows must be >= 1")


@dataclass(frozen=True)
class ScalingEvent:
    time_us: int
    service: str
    latency_factor: float
    throughput_factor: float
    first_window: int
    last_window: int


def scaling_event_times(frequency, start_us, end_us, seed):
    """Poisson-process event times on ``[start_us, end_us)``."""
    if frequency <= 0:
        return []
    rng = np.random.default_rng([seed, 0])
    mean_gap = 3600e6 / frequency
    times, t = [], float(start_us)
    while True:
        t += rng.exponential(mean_gap)
        if t >= end_us:
            return times
        times.append(int(t))


def apply_scaling(spans, topology, scaling, window_length=60_000_000, window_range=None):
    """Disturb ``spans`` with scaling events. Returns ``(spans, events)``.

    Events land on the windows in ``window_range`` (inclusive; default all
    windows that hold a root span). Each event scales the durations of one
    service by ``jitter_magnitude`` and thins or duplicates its calls by a
    factor drawn from [0.5, 1.5], for ``affected_duration_windows`` windows.
    A dropped call takes its subtree with it; a duplicated call is cloned
    with its subtree under fresh span ids.
    """
    spans = list(spans)
    windows = _trace_windows(spans, window_length)
    if window_range is None:
        if not windows:
            return spans, []
        window_range = (min(windows.values()), max(windows.values()))
    first, last = window_range
    times = scaling_event_times(
        scaling.frequency, first * window_length, (last + 1) * window_length, scaling.seed
    )
    pick = np.random.default_rng([scaling.seed, 1])
    events = []
    for t in times:
        w = t // window_length
        events.append(
            ScalingEvent(
                time_us=t,
                service=topology.services[int(pick.integers(len(topology.services)))],
                latency_factor=float(scaling.jitter_magnitude),
                throughput_factor=float(pick.uniform(0.5, 1.5)),
                first_window=w,
                last_window=w + scaling.affected_duration_windows - 1,
            )
        )
    rng = np.random.default_rng([scaling.seed, 2])
    for k, ev in enumerate(events):
        spans = _apply_event(spans, ev, windows, rng, k)
        windows = _trace_windows(spans, window_length)
    return spans, events


def _apply_event(spans, ev, windows, rng, tag):
    # clone ids carry the event index so later events cannot reuse them
    out = []
    for trace_id, group in group_by_trace(spans).items():
        w = windows.get(trace_id)
        if w is None or not ev.first_window <= w <= ev.last_window:
            out.extend(group)
            continue
        kids = {}
        root = None
        for s in group:
            if s.parent_span_id is None:
                root = s
            else:
                kids.setdefault(s.parent_span_id, []).append(s)
        copies = [0]

        def rebuild(s, parent_id, suffix, dest):
            new = s
            if suffix or parent_id != s.parent_span_id:
                new = dataclasses.replace(s, span_id=s.span_id + suffix, parent_span_id=parent_id)
            if s.service_name == ev.service:
                new = dataclasses.replace(new, duration=int(round(new.duration * ev.latency_factor)))
            dest.append(new)
            for c in kids.get(s.span_id, []):
                visit(c, new.span_id, suffix, dest)

        def visit(s, parent_id, suffix, dest):
            if s.service_name != ev.service:
                rebuild(s, parent_id, suffix, dest)
                return
            f = ev.throughput_factor
            if f < 1.0 and rng.random() >= f:
                return
            rebuild(s, parent_id, suffix, dest)
            if f > 1.0 and rng.random() < f - 1.0:
                copies[0] += 1
                rebuild(s, parent_id, f"{suffix}.d{tag}-{copies[0]}", dest)

        if root is None:
            out.extend(group)
            continue
        if root.service_name == ev.service:
            # entry calls: drop or clone whole traces
            f = ev.throughput_factor
            if f < 1.0 and rng.random() >= f:
                continue
            rebuilt = []
            rebuild(root, None, "", rebuilt)
            out.extend(rebuilt)
            if f > 1.0 and rng.random() < f - 1.0:
                clone = []
                rebuild(root, None, "", clone)
                out.extend(dataclasses.replace(s, trace_id=f"{trace_id}.d{tag}") for s in clone)
        else:
            visit(root, None, "", out)
    return out


# ---------------------------------------------------------------------------
# file outputs


def write_labels(path, labels):
    _io.write_csv(path, ["window_index", "service_name", "kind"], sorted(labels))


def read_labels(path):
    labels = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["window_index", "service_name", "kind"]:
            raise TraceGraphError(f"{path}: unexpected labels header {header}")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise TraceGraphError(f"{path}:{reader.line_num}: expected 3 columns")
            try:
                labels.append((int(row[0]), row[1], row[2]))
            except ValueError:
                raise TraceGraphError(f"{path}:{reader.line_num}: bad window index {row[0]!r}") from None
    return labels


def write_events(path, events):
    _io.write_csv(
        path,
        ["time_us", "service", "latency_factor", "throughput_factor", "first_window", "last_window"],
        [
            (e.time_us, e.service, e.latency_factor, e.throughput_factor, e.first_window, e.last_window)
            for e in events
        ],
    )


@dataclass
class SynthConfig:
    """Everything ``synth`` needs to produce a corpus."""

    topology: TopologySpec = field(default_factory=TopologySpec)
    rate: float = 200.0
    n_windows: int = 60
    window_length: int = 60_000_000
    anomalies: list = field(default_factory=list)
    scaling: ScalingSpec = field(default_factory=ScalingSpec)
