"""In-process message transport, logical rank grid and barrier collectives.

Every logical rank runs in its own thread. All cross-rank data moves through
:class:`Transport` mailboxes; collectives are built from point-to-point sends
with per-communicator sequence tags, so mismatched call orders surface as a
timeout (:class:`DeadlockError`) rather than silent corruption.
"""

from __future__ import annotations

import random
import threading
import time
from collections import Counter, defaultdict, deque
from dataclasses import dataclass

import numpy as np


class DeadlockError(RuntimeError):
    pass


class CollectiveMismatchError(RuntimeError):
    pass


class _Aborted(RuntimeError):
    pass


def nbytes(obj) -> int:
    if obj is None:
        return 0
    if isinstance(obj, np.ndarray):
        return int(obj.nbytes)
    if hasattr(obj, "payload_bytes"):
        return int(obj.payload_bytes)
    if isinstance(obj, (list, tuple)):
        return sum(nbytes(o) for o in obj)
    if isinstance(obj, dict):
        return sum(nbytes(v) for v in obj.values())
    return 0


class Transport:
    """Mailboxes keyed by (src, dst, tag) plus per-kind byte counters."""

    def __init__(self, world_size: int, timeout: float = 60.0, jitter: float = 0.0, seed: int = 0):
        self.world_size = world_size
        self.timeout = timeout
        self.jitter = jitter
        self._cv = threading.Condition()
        self._boxes: dict = defaultdict(deque)
        self._bytes = Counter()
        self._calls = Counter()
        self._abort: BaseException | None = None
        self._rngs = [random.Random(seed * 7919 + r) for r in range(world_size)]

    # counters -----------------------------------------------------------
    @property
    def bytes(self) -> Counter:
        with self._cv:
            return Counter(self._bytes)

    @property
    def calls(self) -> Counter:
        with self._cv:
            return Counter(self._calls)

    def count(self, kind: str, n: int):
        with self._cv:
            self._bytes[kind] += int(n)

    def count_call(self, kind: str):
        with self._cv:
            self._calls[kind] += 1

    def reset_counters(self):
        with self._cv:
            self._bytes.clear()
            self._calls.clear()

    # messaging ----------------------------------------------------------
    def _pause(self, rank: int):
        if self.jitter > 0:
            time.sleep(self._rngs[rank].random() * self.jitter)

    def send(self, src: int, dst: int, tag, payload):
        self._pause(src)
        with self._cv:
            if self._abort is not None:
                raise _Aborted("transport aborted") from self._abort
            self._boxes[(src, dst, tag)].append(payload)
            self._cv.notify_all()

    def recv(self, dst: int, src: int, tag):
        self._pause(dst)
        deadline = time.monotonic() + self.timeout
        key = (src, dst, tag)
        with self._cv:
            while True:
                if self._abort is not None:
                    raise _Aborted("transport aborted") from self._abort
                box = self._boxes.get(key)
                if box:
                    out = box.popleft()
                    if not box:
                        del self._boxes[key]
                    return out
                left = deadline - time.monotonic()
                if left <= 0:
                    raise DeadlockError(f"rank {dst} waited {self.timeout}s for {tag} from rank {src}")
                self._cv.wait(left)

    def abort(self, exc: BaseException):
        with self._cv:
            if self._abort is None:
                self._abort = exc
            self._cv.notify_all()

    def pending(self) -> int:
        with self._cv:
            return sum(len(b) for b in self._boxes.values())


def tree_reduce(items: list, op=np.add):
    """Fixed binary tree over list positions: split at len // 2, recurse."""
    if not items:
        raise ValueError("nothing to reduce")
    if len(items) == 1:
        return items[0]
    mid = len(items) // 2
    return op(tree_reduce(items[:mid], op), tree_reduce(items[mid:], op))


def sequential_reduce(items: list, op=np.add):
    acc = items[0]
    for it in items[1:]:
        acc = op(acc, it)
    return acc


_OPS = {"sum": np.add, "max": np.maximum, "min": np.minimum}


class Communicator:
    """A group of ranks; collectives must be called in the same order by all."""

    def __init__(self, transport: Transport, rank: int, members: list[int], name: str):
        if rank not in members:
            raise ValueError(f"rank {rank} not in group {name}")
        self.t = transport
        self.rank = rank
        self.members = list(members)
        self.index = self.members.index(rank)
        self.size = len(self.members)
        self.name = name
        self._seq = 0

    def _tag(self, what):
        self._seq += 1
        return (self.name, self._seq, what)

    def _exchange(self, payloads: list, kind: str, what: str) -> list:
        """Send ``payloads[k]`` to member k; return what each member sent us."""
        tag = self._tag(what)
        self.t.count_call(kind)
        for k, dst in enumerate(self.members):
            if k == self.index:
                continue
            self.t.count(kind, nbytes(payloads[k]))
            self.t.send(self.rank, dst, tag, payloads[k])
        out = [None] * self.size
        out[self.index] = payloads[self.index]
        for k, src in enumerate(self.members):
            if k != self.index:
                out[k] = self.t.recv(self.rank, src, tag)
        return out

    # collectives --------------------------------------------------------
    def all_to_all(self, payloads: list, kind: str = "all_to_all") -> list:
        if len(payloads) != self.size:
            raise CollectiveMismatchError(f"{len(payloads)} payloads for a group of {self.size}")
        return self._exchange(list(payloads), kind, "a2a")

    def all_gather(self, x, kind: str = "all_gather") -> list:
        return self._exchange([x] * self.size, kind, "ag")

    def barrier(self):
        self._exchange([None] * self.size, "barrier", "barrier")

    def broadcast(self, x, root: int = 0, kind: str = "broadcast"):
        tag = self._tag("bcast")
        self.t.count_call(kind)
        if self.index == root:
            for k, dst in enumerate(self.members):
                if k != root:
                    self.t.count(kind, nbytes(x))
                    self.t.send(self.rank, dst, tag, x)
            return x
        return self.t.recv(self.rank, self.members[root], tag)

    def gather(self, x, root: int = 0, kind: str = "gather"):
        tag = self._tag("gather")
        self.t.count_call(kind)
        if self.index != root:
            self.t.count(kind, nbytes(x))
            self.t.send(self.rank, self.members[root], tag, x)
            return None
        out = [None] * self.size
        out[root] = x
        for k, src in enumerate(self.members):
            if k != root:
                out[k] = self.t.recv(self.rank, src, tag)
        return out

    def _check_shapes(self, arrays):
        shapes = {np.shape(a) for a in arrays}
        if len(shapes) != 1:
            raise CollectiveMismatchError(f"{self.name}: shapes differ across ranks: {sorted(shapes)}")

    def reduce_scatter(self, x: np.ndarray, op: str = "sum", order: str = "tree",
                       kind: str = "reduce_scatter") -> np.ndarray:
        """Member k receives the reduction of chunk k of the flattened payload."""
        x = np.asarray(x)
        flat = x.reshape(-1)
        chunks = np.array_split(flat, self.size)
        got = self._exchange(chunks, kind, "rs")
        self._check_shapes(got)
        red = tree_reduce if order == "tree" else sequential_reduce
        return red(got, _OPS[op])

    def all_reduce(self, x, op: str = "sum", order: str = "tree", kind: str = "all_reduce"):
        """Reduce-scatter then all-gather; bitwise identical on every member."""
        x = np.asarray(x)
        if self.size == 1:
            return x.copy()
        mine = self.reduce_scatter(x, op=op, order=order, kind=kind)
        parts = self._exchange([mine] * self.size, kind, "ar-ag")
        return np.concatenate(parts).reshape(x.shape).astype(x.dtype, copy=False)


def all_reduce_bytes(size_bytes_per_rank: int, n: int) -> int:
    """Total bytes moved by :meth:`Communicator.all_reduce` over ``n`` ranks."""
    return 2 * (n - 1) * size_bytes_per_rank if n > 1 else 0


def all_gather_bytes(size_bytes_per_rank: int, n: int) -> int:
    return n * (n - 1) * size_bytes_per_rank


def reduce_scatter_bytes(size_bytes_per_rank: int, n: int) -> int:
    return (n - 1) * size_bytes_per_rank


def broadcast_bytes(size_bytes: int, n: int) -> int:
    return (n - 1) * size_bytes


@dataclass(frozen=True)
class RankWorld:
    """Logical grid fs x gp x dp; rank = (d * gp + g) * fs + f."""

    fs: int = 1
    gp: int = 1
    dp: int = 1
    rack_size: int = 2

    def __post_init__(self):
        if min(self.fs, self.gp, self.dp, self.rack_size) < 1:
            raise ValueError("grid dims must be positive")

    @property
    def size(self) -> int:
        return self.fs * self.gp * self.dp

    def rank(self, f: int, g: int, d: int) -> int:
        return (d * self.gp + g) * self.fs + f

    def coords(self, rank: int) -> tuple[int, int, int]:
        f = rank % self.fs
        g = (rank // self.fs) % self.gp
        d = rank // (self.fs * self.gp)
        return f, g, d

    def fs_group(self, rank: int) -> list[int]:
        _, g, d = self.coords(rank)
        return [self.rank(f, g, d) for f in range(self.fs)]

    def gp_group(self, rank: int) -> list[int]:
        f, _, d = self.coords(rank)
        return [self.rank(f, g, d) for g in range(self.gp)]

    def dp_group(self, rank: int) -> list[int]:
        f, g, _ = self.coords(rank)
        return [self.rank(f, g, d) for d in range(self.dp)]

    def graph_group(self, rank: int) -> list[int]:
        """All fs x gp ranks of one data-parallel replica."""
        _, _, d = self.coords(rank)
        return [self.rank(f, g, d) for g in range(self.gp) for f in range(self.fs)]

    def racks(self, members: list[int]) -> list[list[int]]:
        k = self.rack_size
        return [members[i:i + k] for i in range(0, len(members), k)]


class RankComms:
    """The communicators one rank participates in."""

    def __init__(self, world: RankWorld, transport: Transport, rank: int):
        self.world = world
        self.rank = rank
        f, g, d = world.coords(rank)
        self.coords = (f, g, d)
        self.fs = Communicator(transport, rank, world.fs_group(rank), f"fs{g}.{d}")
        self.gp = Communicator(transport, rank, world.gp_group(rank), f"gp{f}.{d}")
        self.dp = Communicator(transport, rank, world.dp_group(rank), f"dp{f}.{g}")
        self.graph = Communicator(transport, rank, world.graph_group(rank), f"graph{d}")
        self.world_comm = Communicator(transport, rank, list(range(world.size)), "world")
        racks = world.racks(self.dp.members)
        mine = next(r for r in racks if rank in r)
        self.rack = Communicator(transport, rank, mine, f"rack{f}.{g}.{racks.index(mine)}")
        self.is_leader = mine[0] == rank
        leaders = [r[0] for r in racks]
        self.leaders = (Communicator(transport, rank, leaders, f"leaders{f}.{g}")
                        if self.is_leader else None)


def run_ranks(world_size: int, fn, transport: Transport | None = None, timeout: float = 60.0):
    """Run ``fn(rank)`` on one thread per rank and return the results in rank order.

    If any rank raises, the transport is aborted so the others stop waiting,
    and the first original exception (lowest rank) is re-raised.
    """
    transport = transport or Transport(world_size, timeout=timeout)
    results = [None] * world_size
    errors: list = [None] * world_size

    def body(r):
        try:
            results[r] = fn(r)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[r] = exc
            transport.abort(exc)

    threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}", daemon=True)
               for r in range(world_size)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    primary = [e for e in errors if e is not None and not isinstance(e, _Aborted)]
    if primary:
        raise primary[0]
    if any(e is not None for e in errors):
        raise next(e for e in errors if e is not None)
    return results
