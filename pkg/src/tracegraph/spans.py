"""Span records, call-tree reconstruction and call-path extraction.

Input is Jaeger-style NDJSON, one span object per line::

    {"trace_id": "t1", "span_id": "a", "parent_span_id": null,
     "service_name": "user", "operation_name": "get",
     "start_ts": 0, "duration": 1000, "tags": {"error": "false"}, "logs": []}

Timestamps and durations are integer microseconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import _io
from .errors import TraceTreeError

__all__ = [
    "SpanRecord",
    "RejectedLine",
    "TraceTree",
    "CallPath",
    "parse_spans",
    "span_to_json",
    "read_spans",
    "write_spans",
    "write_rejects",
    "group_by_trace",
    "build_trace_tree",
    "build_trees",
    "extract_call_paths",
]

_BOOL_TAGS = ("error", "timeout")


@dataclass(frozen=True)
class SpanRecord:
    trace_id: str
    span_id: str
    parent_span_id: str | None
    service_name: str
    operation_name: str
    start_ts: int
    duration: int
    tags: dict = field(default_factory=dict)
    logs: tuple = ()

    @property
    def is_error(self):
        return self.tags.get("error") == "true"

    @property
    def is_timeout(self):
        return self.tags.get("timeout") == "true"

    @property
    def retry_count(self):
        return int(self.tags.get("retry_count", 0))


@dataclass(frozen=True)
class RejectedLine:
    line_no: int
    reason: str


class _Reject(Exception):
    pass


def _require_str(obj, key, allow_empty=False):
    if key not in obj:
        raise _Reject(f"missing field {key}")
    value = obj[key]
    if not isinstance(value, str):
        raise _Reject(f"{key} must be a string")
    if not value and not allow_empty:
        raise _Reject(f"empty {key}")
    return value


def _require_int(obj, key):
    if key not in obj:
        raise _Reject(f"missing field {key}")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise _Reject(f"{key} must be an integer")
    return value


def _parse_tags(raw):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise _Reject("tags must be an object")
    tags = {}
    for key, value in raw.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, int):
            value = str(value)
        elif not isinstance(value, str):
            raise _Reject(f"tag {key} must be a string")
        tags[key] = value
    for key in _BOOL_TAGS:
        if key in tags and tags[key] not in ("true", "false"):
            raise _Reject(f"tag {key} must be 'true' or 'false'")
    if "retry_count" in tags:
        rc = tags["retry_count"]
        if not rc.isdigit():
            raise _Reject("tag retry_count must be a non-negative integer")
        tags["retry_count"] = str(int(rc))
    return tags


def _parse_logs(raw):
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise _Reject("logs must be a list")
    logs = []
    for entry in raw:
        if isinstance(entry, dict):
            ts, msg = entry.get("ts"), entry.get("message", "")
        elif isinstance(entry, list) and len(entry) == 2:
            ts, msg = entry
        else:
            raise _Reject("log entries must be {ts, message} or [ts, message]")
        if isinstance(ts, bool) or not isinstance(ts, int) or not isinstance(msg, str):
            raise _Reject("log entry needs integer ts and string message")
        logs.append((ts, msg))
    return tuple(logs)


def _parse_object(obj):
    if not isinstance(obj, dict):
        raise _Reject("not a JSON object")
    parent = obj.get("parent_span_id")
    if parent == "":
        parent = None
    if parent is not None and not isinstance(parent, str):
        raise _Reject("parent_span_id must be a string")
    span = SpanRecord(
        trace_id=_require_str(obj, "trace_id"),
        span_id=_require_str(obj, "span_id"),
        parent_span_id=parent,
        service_name=_require_str(obj, "service_name"),
        operation_name=_require_str(obj, "operation_name", allow_empty=True),
        start_ts=_require_int(obj, "start_ts"),
        duration=_require_int(obj, "duration"),
        tags=_parse_tags(obj.get("tags")),
        logs=_parse_logs(obj.get("logs")),
    )
    if span.duration < 0:
        raise _Reject("negative duration")
    if span.parent_span_id == span.span_id:
        raise _Reject("parent_span_id equals span_id")
    return span


def parse_spans(lines):
    """Parse NDJSON span lines.

    ``lines`` is any iterable of ``str`` or ``bytes`` lines (an open file
    works). Returns ``(spans, rejects)``; each malformed line produces a
    :class:`RejectedLine` with its 1-based line number. Errors raised by the
    underlying stream propagate.
    """
    spans, rejects = [], []
    for line_no, line in enumerate(lines, start=1):
        try:
            if isinstance(line, bytes):
                try:
                    line = line.decode("utf-8")
                except UnicodeDecodeError:
                    raise _Reject("invalid UTF-8") from None
            text = line.strip()
            if not text:
                raise _Reject("blank line")
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise _Reject(f"invalid JSON: {exc.msg}") from None
            spans.append(_parse_object(obj))
        except _Reject as exc:
            rejects.append(RejectedLine(line_no, str(exc)))
    return spans, rejects


def span_to_json(span):
    obj = {
        "trace_id": span.trace_id,
        "span_id": span.span_id,
        "service_name": span.service_name,
        "operation_name": span.operation_name,
        "start_ts": span.start_ts,
        "duration": span.duration,
        "tags": dict(span.tags),
        "logs": [{"ts": ts, "message": msg} for ts, msg in span.logs],
    }
    if span.parent_span_id is not None:
        obj["parent_span_id"] = span.parent_span_id
    return _io.dumps(obj)


def read_spans(path):
    with open(path, "rb") as fh:
        return parse_spans(fh)


def write_spans(path, spans):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for span in spans:
            fh.write(span_to_json(span))
            fh.write("\n")


def write_rejects(path, rejects):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rejects:
            fh.write(_io.dumps({"line_no": r.line_no, "reason": r.reason}))
            fh.write("\n")


# ---------------------------------------------------------------------------
# call trees


@dataclass(frozen=True)
class TraceTree:
    trace_id: str
    root: SpanRecord
    spans: dict  # span_id -> SpanRecord
    children: dict  # span_id -> tuple of child span_ids, ordered

    @property
    def span_count(self):
        return len(self.spans)

    def walk(self):
        """Yield ``(span, depth)`` in depth-first pre-order."""
        stack = [(self.root.span_id, 0)]
        while stack:
            sid, depth = stack.pop()
            yield self.spans[sid], depth
            for child in reversed(self.children[sid]):
                stack.append((child, depth + 1))

    def leaves(self):
        return [s for s, _ in self.walk() if not self.children[s.span_id]]


@dataclass(frozen=True)
class CallPath:
    services: tuple
    span_ids: tuple
    window_index: int = 0

    def __len__(self):
        return len(self.services)


def group_by_trace(spans):
    """Group spans by trace_id, keeping first-appearance order."""
    groups = {}
    for span in spans:
        groups.setdefault(span.trace_id, []).append(span)
    return groups


def build_trace_tree(spans):
    """Reconstruct the call tree of one trace.

    Raises :class:`TraceTreeError` for mixed trace ids, duplicate span ids,
    dangling parents, zero or multiple roots, and cycles.
    """
    spans = list(spans)
    if not spans:
        raise TraceTreeError("empty span list")
    trace_ids = {s.trace_id for s in spans}
    if len(trace_ids) != 1:
        raise TraceTreeError(f"spans from {len(trace_ids)} traces", [s.span_id for s in spans])
    trace_id = spans[0].trace_id

    by_id = {}
    dupes = set()
    for s in spans:
        if s.span_id in by_id:
            dupes.add(s.span_id)
        by_id[s.span_id] = s
    if dupes:
        raise TraceTreeError(f"trace {trace_id}: duplicate span ids", dupes)

    dangling = [s.span_id for s in spans if s.parent_span_id is not None and s.parent_span_id not in by_id]
    if dangling:
        raise TraceTreeError(f"trace {trace_id}: dangling parent_span_id", dangling)
    roots = [s.span_id for s in spans if s.parent_span_id is None]
    if len(roots) > 1:
        raise TraceTreeError(f"trace {trace_id}: multiple roots", roots)

    kids = {sid: [] for sid in by_id}
    for s in spans:
        if s.parent_span_id is not None:
            kids[s.parent_span_id].append(s)
    children = {
        sid: tuple(c.span_id for c in sorted(lst, key=lambda c: (c.start_ts, c.span_id)))
        for sid, lst in kids.items()
    }

    if not roots:
        raise TraceTreeError(f"trace {trace_id}: no root span (cycle)", by_id)
    reached = set()
    stack = [roots[0]]
    while stack:
        sid = stack.pop()
        reached.add(sid)
        stack.extend(children[sid])
    if len(reached) != len(by_id):
        raise TraceTreeError(f"trace {trace_id}: cycle", set(by_id) - reached)
    return TraceTree(trace_id, by_id[roots[0]], by_id, children)


def build_trees(spans):
    """Build one tree per trace. Returns ``(trees, failures)``.

    ``failures`` holds ``(trace_id, TraceTreeError)`` pairs; traces are kept
    in first-appearance order.
    """
    trees, failures = [], []
    for trace_id, group in group_by_trace(spans).items():
        try:
            trees.append(build_trace_tree(group))
        except TraceTreeError as exc:
            failures.append((trace_id, exc))
    return trees, failures


def extract_call_paths(tree, window_index=0):
    """One root-to-leaf :class:`CallPath` per leaf, depth-first order."""
    paths = []
    stack = [(tree.root.span_id, (), ())]
    while stack:
        sid, services, ids = stack.pop()
        span = tree.spans[sid]
        services = services + (span.service_name,)
        ids = ids + (sid,)
        kids = tree.children[sid]
        if not kids:
            paths.append(CallPath(services, ids, window_index))
        for child in reversed(kids):
            stack.append((child, services, ids))
    return paths
