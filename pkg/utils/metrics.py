"""
Metrics and timing utilities - in-process counters and stage timings
"""
import threading
import time
from contextlib import contextmanager
from typing import Dict, List

_LOCK = threading.Lock()
_COUNTERS: Dict[str, int] = {}
_TIMINGS: Dict[str, List[float]] = {}


def increment_metric(name: str, amount: int = 1) -> None:
    with _LOCK:
        _COUNTERS[name] = _COUNTERS.get(name, 0) + int(amount)


def get_metric(name: str) -> int:
    with _LOCK:
        return _COUNTERS.get(name, 0)


def list_metrics() -> Dict[str, int]:
    with _LOCK:
        return dict(_COUNTERS)


def record_timing(name: str, ms: float) -> None:
    with _LOCK:
        _TIMINGS.setdefault(name, []).append(float(ms))


def get_timing(name: str) -> Dict[str, float]:
    """count / total_ms / mean_ms for one stage."""
    with _LOCK:
        values = list(_TIMINGS.get(name, []))
    total = sum(values)
    return {"count": len(values), "total_ms": total, "mean_ms": total / len(values) if values else 0.0}


def list_timings() -> Dict[str, Dict[str, float]]:
    with _LOCK:
        names = list(_TIMINGS)
    return {n: get_timing(n) for n in names}


def reset_metrics() -> None:
    with _LOCK:
        _COUNTERS.clear()
        _TIMINGS.clear()


@contextmanager
def timed(name: str, sink: Dict[str, float] | None = None):
    """Time a block; records it globally and, if given, into ``sink[name]`` (ms)."""
    start = time.perf_counter()
    try:
        yield
    finally:
        ms = (time.perf_counter() - start) * 1000.0
        record_timing(name, ms)
        if sink is not None:
            sink[name] = ms


__all__ = [
    "increment_metric",
    "get_metric",
    "list_metrics",
    "record_timing",
    "get_timing",
    "list_timings",
    "reset_metrics",
    "timed",
]
