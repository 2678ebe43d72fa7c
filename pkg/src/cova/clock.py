"""Wall clocks. ``COVA_CLOCK`` pins the start instant for reproducible runs;
time then advances with the monotonic clock so deadlines still fire."""

from __future__ import annotations

import os
import time
from datetime import datetime, timezone

ENV_VAR = "COVA_CLOCK"


def parse_instant(text: str) -> float:
    """ISO-8601 to epoch seconds. A missing zone means UTC."""
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_instant(t: float) -> str:
    """Epoch seconds to ISO-8601 UTC, truncated to whole seconds."""
    return datetime.fromtimestamp(int(t // 1), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class SystemClock:
    def now(self) -> float:
        return time.time()


class InjectedClock:
    def __init__(self, start: float):
        self.start = start
        self._t0 = time.monotonic()

    def now(self) -> float:
        return self.start + (time.monotonic() - self._t0)


class ManualClock:
    """Only moves when told to. For tests."""

    def __init__(self, start: float = 0.0):
        self.t = start

    def now(self) -> float:
        return self.t

    def advance(self, seconds: float) -> None:
        self.t += seconds


Clock = SystemClock | InjectedClock | ManualClock


def clock_from_env(environ: dict[str, str] | None = None) -> Clock:
    value = (os.environ if environ is None else environ).get(ENV_VAR)
    if not value:
        return SystemClock()
    try:
        return InjectedClock(parse_instant(value))
    except ValueError:
        raise ValueError(f"{ENV_VAR}={value!r} is not an ISO-8601 instant") from None
