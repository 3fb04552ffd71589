import io
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracegraph.errors import TraceTreeError
from tracegraph.spans import (
    CallPath,
    SpanRecord,
    build_trace_tree,
    build_trees,
    extract_call_paths,
    parse_spans,
    read_spans,
    span_to_json,
    write_rejects,
    write_spans,
)

from conftest import span, tree


def test_parse_minimal_line_has_no_parent():
    line = '{"trace_id":"t1","span_id":"a","service_name":"user","operation_name":"get","start_ts":0,"duration":1000}'
    spans, rejects = parse_spans([line])
    assert rejects == []
    (s,) = spans
    assert s.parent_span_id is None
    assert (s.trace_id, s.span_id, s.service_name, s.duration) == ("t1", "a", "user", 1000)
    assert s.tags == {} and s.logs == ()


def test_empty_stream():
    assert parse_spans([]) == ([], [])
    assert parse_spans(io.BytesIO(b"")) == ([], [])


def test_negative_duration_rejected():
    line = '{"trace_id":"t1","span_id":"a","service_name":"u","operation_name":"g","start_ts":0,"duration":-5}'
    spans, rejects = parse_spans([line])
    assert spans == []
    assert rejects[0].line_no == 1
    assert rejects[0].reason == "negative duration"


@pytest.mark.parametrize(
    "line, reason",
    [
        ("not json", "invalid JSON"),
        ("[1, 2]", "not a JSON object"),
        ('{"trace_id":"t","span_id":"","service_name":"s","operation_name":"o","start_ts":0,"duration":1}', "empty span_id"),
        ('{"trace_id":"t","span_id":"a","parent_span_id":"a","service_name":"s","operation_name":"o","start_ts":0,"duration":1}', "parent_span_id equals span_id"),
        ('{"trace_id":"t","span_id":"a","service_name":"s","operation_name":"o","start_ts":1.5,"duration":1}', "start_ts must be an integer"),
        ('{"trace_id":"t","span_id":"a","service_name":"s","operation_name":"o","duration":1}', "missing field start_ts"),
        ('{"trace_id":"t","span_id":"a","service_name":"s","operation_name":"o","start_ts":0,"duration":1,"tags":{"error":"maybe"}}', "tag error"),
        ('{"trace_id":"t","span_id":"a","service_name":"s","operation_name":"o","start_ts":0,"duration":1,"tags":{"retry_count":"-1"}}', "retry_count"),
        ("   ", "blank line"),
    ],
)
def test_malformed_lines_are_collected(line, reason):
    spans, rejects = parse_spans([line])
    assert spans == []
    assert reason in rejects[0].reason


def test_rejects_keep_line_numbers_and_order():
    good = '{"trace_id":"t","span_id":"%s","service_name":"s","operation_name":"o","start_ts":0,"duration":1}'
    lines = [good % "a", "garbage", good % "b", b"\xff\xfe", good % "c"]
    spans, rejects = parse_spans(lines)
    assert [s.span_id for s in spans] == ["a", "b", "c"]
    assert [(r.line_no, r.reason) for r in rejects] == [(2, rejects[0].reason), (4, "invalid UTF-8")]


def test_unknown_fields_ignored_and_tags_coerced():
    obj = {
        "trace_id": "t", "span_id": "a", "service_name": "s", "operation_name": "o",
        "start_ts": 5, "duration": 7, "flags": 1, "process": {"x": 1},
        "tags": {"error": True, "retry_count": 2, "http.status": "500"},
        "logs": [[6, "boom"], {"ts": 7, "message": "again"}],
    }
    (s,), rejects = parse_spans([json.dumps(obj)])
    assert not rejects
    assert s.tags == {"error": "true", "retry_count": "2", "http.status": "500"}
    assert s.is_error and s.retry_count == 2 and not s.is_timeout
    assert s.logs == ((6, "boom"), (7, "again"))


def test_io_failure_propagates():
    class Broken:
        def __iter__(self):
            yield '{"trace_id":"t","span_id":"a","service_name":"s","operation_name":"o","start_ts":0,"duration":1}'
            raise OSError("disk gone")

    with pytest.raises(OSError):
        parse_spans(Broken())


ids = st.text(alphabet="abcdef0123456789-", min_size=1, max_size=8)
records = st.builds(
    SpanRecord,
    trace_id=ids,
    span_id=ids,
    parent_span_id=st.one_of(st.none(), ids),
    service_name=st.text(min_size=1, max_size=10),
    operation_name=st.text(max_size=10),
    start_ts=st.integers(-(2**53), 2**53),
    duration=st.integers(0, 2**40),
    tags=st.fixed_dictionaries(
        {},
        optional={
            "error": st.sampled_from(["true", "false"]),
            "timeout": st.sampled_from(["true", "false"]),
            "retry_count": st.integers(0, 9).map(str),
            "peer": st.text(max_size=5),
        },
    ),
    logs=st.lists(st.tuples(st.integers(0, 10**12), st.text(max_size=10)), max_size=3).map(tuple),
).filter(lambda s: s.parent_span_id != s.span_id)


@given(st.lists(records, max_size=8))
def test_round_trip(spans):
    text = "\n".join(span_to_json(s) for s in spans)
    parsed, rejects = parse_spans(text.split("\n") if text else [])
    assert rejects == []
    assert parsed == spans


@settings(max_examples=30)
@given(st.lists(records, min_size=1, max_size=10), st.randoms(use_true_random=False))
def test_parsing_is_order_stable(spans, rnd):
    lines = [span_to_json(s) for s in spans]
    perm = list(range(len(lines)))
    rnd.shuffle(perm)
    parsed, _ = parse_spans([lines[k] for k in perm])
    assert parsed == [spans[k] for k in perm]


def test_file_round_trip(tmp_path):
    spans = [span("a"), span("b", "a", service="db", error="true")]
    write_spans(tmp_path / "s.ndjson", spans)
    assert read_spans(tmp_path / "s.ndjson") == (spans, [])
    _, rejects = parse_spans(["x"])
    write_rejects(tmp_path / "r.ndjson", rejects)
    assert json.loads((tmp_path / "r.ndjson").read_text()) == {"line_no": 1, "reason": rejects[0].reason}


# -- trees ------------------------------------------------------------------


def test_single_root_tree():
    t = tree(span("a"))
    assert t.span_count == 1
    assert t.children["a"] == ()


def test_children_ordered_by_start_then_id():
    t = tree(span("a"), span("c", "a", start=5), span("b", "a", start=3), span("d", "a", start=5))
    assert t.children["a"] == ("b", "c", "d")


def test_cycle_is_reported():
    with pytest.raises(TraceTreeError) as err:
        build_trace_tree([span("a", "b"), span("b", "a")])
    assert set(err.value.span_ids) == {"a", "b"}


def test_cycle_beside_a_root():
    with pytest.raises(TraceTreeError, match="cycle") as err:
        build_trace_tree([span("r"), span("a", "b"), span("b", "a")])
    assert set(err.value.span_ids) == {"a", "b"}


def test_multiple_roots_and_dangling_parent():
    with pytest.raises(TraceTreeError, match="multiple roots") as err:
        build_trace_tree([span("a"), span("b")])
    assert err.value.span_ids == ("a", "b")
    with pytest.raises(TraceTreeError, match="dangling") as err:
        build_trace_tree([span("a"), span("b", "zz")])
    assert err.value.span_ids == ("b",)


def test_mixed_traces_rejected():
    with pytest.raises(TraceTreeError):
        build_trace_tree([span("a"), span("b", "a", trace="t2")])


def test_build_trees_collects_failures():
    trees, failures = build_trees([span("a"), span("x", trace="t2"), span("y", trace="t2")])
    assert [t.trace_id for t in trees] == ["t1"]
    assert failures[0][0] == "t2"


# -- call paths -------------------------------------------------------------


def test_single_span_path():
    assert [p.services for p in extract_call_paths(tree(span("a", service="api")))] == [("api",)]


def test_chain_path():
    t = tree(span("a", service="api"), span("b", "a", service="auth"), span("c", "b", service="db"))
    (p,) = extract_call_paths(t, window_index=4)
    assert p == CallPath(("api", "auth", "db"), ("a", "b", "c"), 4)


def test_fan_out_paths():
    t = tree(
        span("a", service="api"),
        span("b", "a", service="auth", start=1),
        span("c", "a", service="db", start=2),
    )
    assert [p.services for p in extract_call_paths(t)] == [("api", "auth"), ("api", "db")]


def test_repeated_service_is_kept():
    t = tree(span("a", service="api"), span("b", "a", service="api"))
    assert extract_call_paths(t)[0].services == ("api", "api")


def _random_tree(rnd, n):
    spans = [span("s0", service=f"svc{rnd.randrange(4)}", start=0)]
    for k in range(1, n):
        parent = f"s{rnd.randrange(k)}"
        spans.append(span(f"s{k}", parent, service=f"svc{rnd.randrange(4)}", start=rnd.randrange(50)))
    return spans


@pytest.mark.parametrize("seed", range(20))
def test_tree_counts_and_leaf_paths(seed):
    rnd = random.Random(seed)
    spans = _random_tree(rnd, rnd.randrange(1, 40))
    rnd.shuffle(spans)
    t = build_trace_tree(spans)
    assert t.span_count == len(spans)
    leaves = {s.span_id for s in spans} - {s.parent_span_id for s in spans}
    paths = extract_call_paths(t)
    assert len(paths) == len(leaves)
    assert {p.span_ids[-1] for p in paths} == leaves
    by_id = {s.span_id: s for s in spans}
    for p in paths:
        assert by_id[p.span_ids[0]].parent_span_id is None
        for parent, child in zip(p.span_ids, p.span_ids[1:]):
            assert by_id[child].parent_span_id == parent
        assert p.services == tuple(by_id[s].service_name for s in p.span_ids)
