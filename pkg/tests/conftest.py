import numpy as np
import pytest

from tracegraph.spans import SpanRecord, build_trace_tree


def span(span_id, parent=None, service="api", start=0, duration=1000, trace="t1", **tags):
    return SpanRecord(
        trace_id=trace,
        span_id=span_id,
        parent_span_id=parent,
        service_name=service,
        operation_name="op",
        start_ts=start,
        duration=duration,
        tags={k: str(v) for k, v in tags.items()},
    )


def tree(*spans):
    return build_trace_tree(list(spans))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, filled by test_acceptance and printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
