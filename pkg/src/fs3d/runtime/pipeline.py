"""Gradient buckets and the discrete-event model of the pipelined update.

Each bucket passes through four stages: intra-rack aggregation, inter-rack
synchronization among rack leaders, intra-rack broadcast and the optimizer
update. A stage works on one bucket at a time and a bucket's stages run in
order, so with unit costs the makespan is ``n_stages + n_buckets - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

STAGES = ("aggregated", "synced", "broadcast", "updated")


class ScheduleError(AssertionError):
    pass


@dataclass
class GradientBucket:
    index: int
    names: list
    nbytes: int
    state: list = field(default_factory=list)

    def advance(self, stage: str):
        k = len(self.state)
        if k >= len(STAGES) or STAGES[k] != stage:
            raise ScheduleError(f"bucket {self.index}: {stage} after {self.state}")
        self.state.append(stage)

    @property
    def done(self) -> bool:
        return len(self.state) == len(STAGES)


def make_buckets(names: list[str], sizes: list[int], n_buckets: int | None = None,
                 bucket_bytes: int | None = None) -> list[GradientBucket]:
    """Partition segments, in order, into contiguous buckets.

    With ``n_buckets`` the split balances bytes greedily; with ``bucket_bytes``
    a bucket closes once it reaches the threshold.
    """
    if not names:
        return []
    if n_buckets is not None:
        n_buckets = max(1, min(n_buckets, len(names)))
        total = sum(sizes)
        out, cur, acc = [], [], 0
        for k, (n, s) in enumerate(zip(names, sizes)):
            cur.append(n)
            acc += s
            left = len(names) - k - 1
            need = n_buckets - len(out) - 1
            if need > 0 and (acc >= total * (len(out) + 1) / n_buckets or left == need):
                out.append(cur)
                cur = []
        if cur:
            out.append(cur)
    else:
        limit = bucket_bytes or 1 << 20
        out, cur, acc = [], [], 0
        for n, s in zip(names, sizes):
            cur.append(n)
            acc += s
            if acc >= limit:
                out.append(cur)
                cur, acc = [], 0
        if cur:
            out.append(cur)
    size_of = dict(zip(names, sizes))
    return [GradientBucket(i, b, sum(size_of[n] for n in b)) for i, b in enumerate(out)]


@dataclass
class Event:
    bucket: int
    stage: int
    start: float
    end: float


@dataclass
class Timeline:
    events: list
    n_stages: int
    n_buckets: int

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    @property
    def busy(self) -> float:
        return sum(e.end - e.start for e in self.events)

    @property
    def bubble_ratio(self) -> float:
        """Idle fraction of the stage resources over the makespan."""
        span = self.makespan * self.n_stages
        return 0.0 if span == 0 else 1.0 - self.busy / span

    def order(self) -> list[tuple[int, int]]:
        """(bucket, stage) in execution order: by start time, then stage, then bucket."""
        return [(e.bucket, e.stage) for e in sorted(self.events, key=lambda e: (e.start, e.stage, e.bucket))]

    def check(self):
        """Every stage starts after its predecessor stage of the same bucket
        ends and after the previous bucket leaves the stage."""
        at = {(e.bucket, e.stage): e for e in self.events}
        for e in self.events:
            if e.stage > 0 and e.start < at[(e.bucket, e.stage - 1)].end:
                raise ScheduleError(f"bucket {e.bucket} stage {e.stage} starts before its predecessor")
            if e.bucket > 0 and (e.bucket - 1, e.stage) in at and e.start < at[(e.bucket - 1, e.stage)].end:
                raise ScheduleError(f"stage {e.stage} overlaps buckets {e.bucket - 1} and {e.bucket}")


def _costs(n_buckets, n_stages, costs):
    if costs is None:
        return [[1.0] * n_stages for _ in range(n_buckets)]
    if callable(costs):
        return [[float(costs(b, s)) for s in range(n_stages)] for b in range(n_buckets)]
    return [[float(c) for c in row] for row in costs]


def pipelined_schedule(n_buckets: int, n_stages: int = len(STAGES), costs=None) -> Timeline:
    c = _costs(n_buckets, n_stages, costs)
    end = [[0.0] * n_stages for _ in range(n_buckets)]
    events = []
    for b in range(n_buckets):
        for s in range(n_stages):
            start = max(end[b][s - 1] if s else 0.0, end[b - 1][s] if b else 0.0)
            end[b][s] = start + c[b][s]
            events.append(Event(b, s, start, end[b][s]))
    tl = Timeline(events, n_stages, n_buckets)
    tl.check()
    return tl


def sequential_schedule(n_buckets: int, n_stages: int = len(STAGES), costs=None) -> Timeline:
    c = _costs(n_buckets, n_stages, costs)
    t = 0.0
    events = []
    for b in range(n_buckets):
        for s in range(n_stages):
            events.append(Event(b, s, t, t + c[b][s]))
            t += c[b][s]
    tl = Timeline(events, n_stages, n_buckets)
    tl.check()
    return tl
