import numpy as np
import pytest

from tracegraph.errors import ConfigError, TraceGraphError
from tracegraph.graphs import WindowConfig, build_graphs
from tracegraph.spans import build_trees, parse_spans, span_to_json
from tracegraph.synth import (
    AnomalySpec,
    ScalingSpec,
    TopologySpec,
    apply_scaling,
    generate_topology,
    generate_traces,
    inject_anomaly,
    read_labels,
    scaling_event_times,
    topology_from_dict,
    topology_to_dict,
    write_events,
    write_labels,
)

WL = 1_000_000


def is_dag(topo):
    indeg = {s: 0 for s in topo.services}
    for e in topo.edges:
        indeg[e.child] += 1
    ready = [s for s, d in indeg.items() if d == 0]
    seen = 0
    while ready:
        s = ready.pop()
        seen += 1
        for e in topo.children(s):
            indeg[e.child] -= 1
            if indeg[e.child] == 0:
                ready.append(e.child)
    return seen == len(topo.services)


@pytest.fixture(scope="module")
def topo():
    return generate_topology(TopologySpec(n_services=8, edge_density=0.2, max_depth=3, seed=5))


def test_single_service_topology():
    t = generate_topology(TopologySpec(n_services=1))
    assert len(t.services) == 1 and t.edges == ()
    spans = generate_traces(t, 10, 3, seed=0, window_length=WL)
    assert spans and all(s.parent_span_id is None for s in spans)


@pytest.mark.parametrize("seed", [0, 1, 42])
def test_topology_is_reachable_dag(seed):
    t = generate_topology(TopologySpec(n_services=30, edge_density=0.1, seed=seed))
    assert is_dag(t)
    assert set(t.downstream_hops(t.entry, 10**6)) == set(t.services)
    assert {e.child for e in t.edges} == set(t.services) - {t.entry}


def test_topology_deterministic_and_serialisable():
    spec = TopologySpec(seed=42)
    a, b = generate_topology(spec), generate_topology(spec)
    assert a == b
    assert topology_from_dict(topology_to_dict(a)) == a


def test_spec_validation():
    with pytest.raises(ConfigError):
        TopologySpec(edge_density=0)
    with pytest.raises(ConfigError):
        AnomalySpec("latency_spike", "x", 0.5, {0})
    with pytest.raises(ConfigError):
        AnomalySpec("error_burst", "x", 1.5, {0})
    with pytest.raises(ConfigError):
        AnomalySpec("meltdown", "x", 2, {0})
    with pytest.raises(ConfigError):
        ScalingSpec(frequency=-1)


def test_zero_rate(topo):
    assert generate_traces(topo, 0, 5, seed=1) == []


def test_traces_ingest_and_aggregate_cleanly(topo):
    spans = generate_traces(topo, 15, 4, seed=2, window_length=WL)
    parsed, rejects = parse_spans([span_to_json(s) for s in spans])
    assert rejects == [] and parsed == spans
    trees, failures = build_trees(spans)
    assert failures == []
    graphs = build_graphs(trees, WindowConfig(WL))
    assert len(graphs) == 4
    assert all(set(g.services) <= set(topo.services) for g in graphs)


def test_traces_follow_topology_edges(topo):
    edges = {(e.parent, e.child) for e in topo.edges}
    spans = generate_traces(topo, 20, 2, seed=3, window_length=WL)
    by_id = {(s.trace_id, s.span_id): s for s in spans}
    for s in spans:
        if s.parent_span_id is None:
            assert s.service_name == topo.entry
        else:
            assert (by_id[(s.trace_id, s.parent_span_id)].service_name, s.service_name) in edges


def test_trace_bytes_deterministic(topo):
    a = "\n".join(map(span_to_json, generate_traces(topo, 10, 3, seed=9)))
    b = "\n".join(map(span_to_json, generate_traces(topo, 10, 3, seed=9)))
    assert a == b


# -- anomalies --------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus(topo):
    return generate_traces(topo, 40, 4, seed=4, window_length=WL)


def _target(topo):
    return topo.edges[0].child


def test_unit_multiplier_is_identity(topo, corpus):
    spans, labels = inject_anomaly(corpus, topo, AnomalySpec("latency_spike", _target(topo), 1.0, {2}), WL)
    assert spans == corpus
    assert labels == [(2, _target(topo), "latency_spike")]


def test_cascade_depth_zero_only_touches_target(topo, corpus):
    target = _target(topo)
    spans, labels = inject_anomaly(corpus, topo, AnomalySpec("cascade", target, 5.0, {1}, cascade_depth=0), WL)
    changed = {a.service_name for a, b in zip(corpus, spans) if a != b}
    assert changed == {target}
    assert [l[1] for l in labels] == [target]


def test_cascade_decays_per_hop(topo, corpus):
    target = topo.entry
    anomaly = AnomalySpec("cascade", target, 9.0, {0, 1}, cascade_depth=2)
    spans, labels = inject_anomaly(corpus, topo, anomaly, WL)
    hops = topo.downstream_hops(target, 2)
    for a, b in zip(corpus, spans):
        if a.service_name in hops and (int(a.trace_id[1:6]), a.service_name, "cascade") in labels:
            assert b.duration == int(round(a.duration * (1 + 8 * 0.5 ** hops[a.service_name])))
        else:
            assert b == a
    assert {l[1] for l in labels} <= set(hops)


def test_latency_spike_recomputation_oracle(topo, corpus):
    target = _target(topo)
    spans, _ = inject_anomaly(corpus, topo, AnomalySpec("latency_spike", target, 10.0, {2}), WL)
    before = build_graphs(build_trees(corpus)[0], WindowConfig(WL))[2]
    after = build_graphs(build_trees(spans)[0], WindowConfig(WL))[2]
    i = before.index()[target]
    ratio = after.X[i, 0] / before.X[i, 0]
    assert ratio == pytest.approx(10.0, rel=1e-3)  # only integer rounding of durations
    others = [k for k in range(before.n_nodes) if k != i]
    np.testing.assert_array_equal(after.X[others, 0], before.X[others, 0])


def test_error_burst_sets_error_tags(topo, corpus):
    target = _target(topo)
    spans, labels = inject_anomaly(corpus, topo, AnomalySpec("error_burst", target, 1.0, {3}), WL)
    hit = [b for a, b in zip(corpus, spans) if a != b]
    assert hit and all(s.service_name == target and s.is_error for s in hit)
    assert labels == [(3, target, "error_burst")]


def test_every_label_has_a_mutated_span(topo, corpus):
    anomaly = AnomalySpec("cascade", topo.entry, 4.0, {0, 2}, cascade_depth=1)
    spans, labels = inject_anomaly(corpus, topo, anomaly, WL)
    mutated = {(int(a.trace_id[1:6]), a.service_name) for a, b in zip(corpus, spans) if a != b}
    assert {(w, s) for w, s, _ in labels} == mutated


def test_unknown_target(topo, corpus):
    with pytest.raises(TraceGraphError, match="unknown target"):
        inject_anomaly(corpus, topo, AnomalySpec("latency_spike", "nope", 2.0, {0}), WL)


def test_labels_round_trip(tmp_path):
    labels = [(0, "db", "latency_spike"), (3, "api", "cascade")]
    write_labels(tmp_path / "l.csv", labels)
    assert read_labels(tmp_path / "l.csv") == labels


# -- elastic scaling --------------------------------------------------------


def test_zero_frequency_is_identity(topo, corpus):
    spans, events = apply_scaling(corpus, topo, ScalingSpec(frequency=0), WL)
    assert spans == corpus and events == []


def _replay_count(frequency, start, end, seed):
    """Independent replay of the exponential-gap draws."""
    rng = np.random.default_rng([seed, 0])
    t, n = float(start), 0
    while True:
        t += rng.exponential(3600e6 / frequency)
        if t >= end:
            return n
        n += 1


@pytest.mark.parametrize("frequency", [1.0, 60.0, 600.0, 6000.0])
@pytest.mark.parametrize("seed", range(5))
def test_event_count_matches_replay(frequency, seed):
    assert len(scaling_event_times(frequency, 0, 4 * WL, seed)) == _replay_count(frequency, 0, 4 * WL, seed)


def test_more_frequency_more_events_on_average():
    low = sum(len(scaling_event_times(100.0, 0, 60 * WL, s)) for s in range(30))
    high = sum(len(scaling_event_times(1000.0, 0, 60 * WL, s)) for s in range(30))
    assert high > low


def test_scaling_output_is_valid_and_deterministic(topo, corpus, tmp_path):
    spec = ScalingSpec(frequency=3000.0, jitter_magnitude=3.0, affected_duration_windows=2, seed=8)
    a, ev_a = apply_scaling(corpus, topo, spec, WL)
    b, ev_b = apply_scaling(corpus, topo, spec, WL)
    assert ev_a and ev_a == ev_b and a == b
    trees, failures = build_trees(a)
    assert failures == []
    lines = [span_to_json(s) for s in a]
    assert parse_spans(lines)[1] == []
    write_events(tmp_path / "e1.csv", ev_a)
    write_events(tmp_path / "e2.csv", ev_b)
    assert (tmp_path / "e1.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
    for ev in ev_a:
        assert 0.5 <= ev.throughput_factor <= 1.5
        assert ev.last_window - ev.first_window == 1


def test_scaling_limited_to_window_range(topo, corpus):
    spec = ScalingSpec(frequency=5000.0, seed=1)
    spans, events = apply_scaling(corpus, topo, spec, WL, window_range=(2, 3))
    assert events and all(e.first_window >= 2 for e in events)
    untouched = [s for s in corpus if int(s.trace_id[1:6]) < 2]
    assert [s for s in spans if int(s.trace_id[1:6]) < 2] == untouched


def test_many_overlapping_events_keep_ids_unique(topo):
    spans = generate_traces(topo, 30, 3, seed=6, window_length=WL)
    out, events = apply_scaling(spans, topo, ScalingSpec(frequency=40000.0, jitter_magnitude=1.0, seed=2), WL)
    assert len(events) > 20
    trees, failures = build_trees(out)
    assert failures == []
